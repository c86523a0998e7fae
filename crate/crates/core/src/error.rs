use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the registration toolkit.
///
/// Variants fall in two groups: bad input (malformed files, invalid
/// parameters) and computation failures on otherwise valid input. The CLI
/// maps the first group to exit code 1 and the second to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty cloud")]
    EmptyCloud,

    #[error("degenerate configuration")]
    Degenerate,

    #[error("empty depth frame")]
    EmptyDepthFrame,

    #[error("no landmark survived {0}")]
    NoLandmarks(&'static str),

    #[error("segmentation produced empty cloud")]
    EmptySegmentation,

    #[error("empty isosurface")]
    EmptyIsosurface,

    #[error("mesh projects to zero area")]
    ZeroArea,

    #[error("cloud too small: need more than {required} points, got {actual}")]
    CloudTooSmall { required: usize, actual: usize },

    #[error("cloud has no normals")]
    MissingNormals,

    #[error("correspondence starvation")]
    CorrespondenceStarvation,

    #[error("camera pose misses the surface")]
    CameraMissesSurface,
}

impl Error {
    /// True for errors caused by unreadable or invalid inputs rather than a
    /// failed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Parse(_) | Error::InvalidInput(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::Parse(format!("{other:?}")),
            }
        } else {
            Error::Parse(e.to_string())
        }
    }
}
