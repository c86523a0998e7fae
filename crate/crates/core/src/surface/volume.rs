use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Vec3};

/// A scalar field sampled on a regular grid; `values` is row-major with x
/// varying fastest. Sample `(i, j, k)` sits at `origin + (i, j, k) * spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Point3,
    values: Vec<f64>,
}

/// Contents of the `.volume.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: String,
}

impl ScalarVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: Point3, values: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidInput(format!("volume dims {dims:?} must be >= 2 on every axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(format!("volume spacing {spacing:?} must be positive")));
        }
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::InvalidInput(format!(
                "{} values for a {}x{}x{} volume",
                values.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("volume holds non-finite values".into()));
        }
        Ok(Self { dims, spacing, origin, values })
    }

    /// Samples `f` at every grid node.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], origin: Point3, f: impl Fn(&Point3) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = origin + Vec3::new(i as f64 * spacing[0], j as f64 * spacing[1], k as f64 * spacing[2]);
                    values.push(f(&p));
                }
            }
        }
        Self::new(dims, spacing, origin, values)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.linear_index(i, j, k)]
    }

    pub fn position(&self, i: usize, j: usize, k: usize) -> Point3 {
        self.origin
            + Vec3::new(
                i as f64 * self.spacing[0],
                j as f64 * self.spacing[1],
                k as f64 * self.spacing[2],
            )
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Central-difference gradient at a grid node (one-sided on the border).
    pub fn gradient(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let idx = [i, j, k];
        let mut g = Vec3::zeros();
        for axis in 0..3 {
            let (mut lo, mut hi) = (idx, idx);
            if idx[axis] > 0 {
                lo[axis] -= 1;
            }
            if idx[axis] + 1 < self.dims[axis] {
                hi[axis] += 1;
            }
            let steps = (hi[axis] - lo[axis]) as f64;
            g[axis] = (self.value(hi[0], hi[1], hi[2]) - self.value(lo[0], lo[1], lo[2]))
                / (steps * self.spacing[axis]);
        }
        g
    }

    /// Reads `<name>.raw` (little-endian u16) and `<name>.volume.json`.
    pub fn load(raw_path: impl AsRef<Path>) -> Result<Self> {
        let raw_path = raw_path.as_ref();
        let header: VolumeHeader = serde_json::from_str(&fs::read_to_string(header_path(raw_path))?)?;
        if header.dtype != "u16" {
            return Err(Error::Parse(format!("unsupported volume dtype '{}'", header.dtype)));
        }
        let bytes = fs::read(raw_path)?;
        let n = header.dims.iter().product::<usize>();
        if bytes.len() != 2 * n {
            return Err(Error::Parse(format!(
                "raw volume has {} bytes, header implies {}",
                bytes.len(),
                2 * n
            )));
        }
        let values = bytes
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as f64)
            .collect();
        let o = header.origin;
        Self::new(header.dims, header.spacing, Point3::new(o[0], o[1], o[2]), values)
            .map_err(|e| Error::Parse(e.to_string()))
    }

    /// Writes the raw file and JSON sidecar. Values must be integers in the
    /// u16 range.
    pub fn save(&self, raw_path: impl AsRef<Path>) -> Result<()> {
        let raw_path = raw_path.as_ref();
        let mut bytes = Vec::with_capacity(2 * self.values.len());
        for &v in &self.values {
            if v.fract() != 0.0 || !(0.0..=65535.0).contains(&v) {
                return Err(Error::InvalidInput(format!("value {v} is not representable as u16")));
            }
            bytes.extend_from_slice(&(v as u16).to_le_bytes());
        }
        fs::write(raw_path, bytes)?;
        let header = VolumeHeader {
            dims: self.dims,
            spacing: self.spacing,
            origin: [self.origin.x, self.origin.y, self.origin.z],
            dtype: "u16".into(),
        };
        fs::write(header_path(raw_path), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }
}

/// Sidecar path: `head.raw` -> `head.volume.json`.
pub fn header_path(raw_path: &Path) -> PathBuf {
    raw_path.with_extension("volume.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let o = Point3::origin();
        assert!(ScalarVolume::new([1, 2, 2], [1.0; 3], o, vec![0.0; 4]).is_err());
        assert!(ScalarVolume::new([2, 2, 2], [1.0, 0.0, 1.0], o, vec![0.0; 8]).is_err());
        assert!(ScalarVolume::new([2, 2, 2], [1.0; 3], o, vec![0.0; 7]).is_err());
        assert!(ScalarVolume::new([2, 2, 2], [1.0; 3], o, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn x_fastest_layout_and_gradient() {
        let v = ScalarVolume::from_fn([4, 3, 2], [0.5, 1.0, 2.0], Point3::new(1.0, 0.0, 0.0), |p| {
            3.0 * p.x - p.y + 0.5 * p.z
        })
        .unwrap();
        assert_eq!(v.value(1, 0, 0), v.values()[1]);
        assert_eq!(v.value(0, 1, 0), v.values()[4]);
        assert_eq!(v.value(0, 0, 1), v.values()[12]);
        assert_eq!(v.position(2, 1, 1), Point3::new(2.0, 1.0, 2.0));
        for (i, j, k) in [(0, 0, 0), (2, 1, 1), (3, 2, 1)] {
            assert!((v.gradient(i, j, k) - Vec3::new(3.0, -1.0, 0.5)).norm() < 1e-12);
        }
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.raw");
        let v = ScalarVolume::from_fn([3, 2, 2], [1.5, 1.5, 2.0], Point3::new(-1.0, 2.0, 3.0), |p| {
            (p.x * 10.0 + 100.0).round()
        })
        .unwrap();
        v.save(&path).unwrap();
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("head.volume.json")).unwrap()).unwrap();
        assert_eq!(header["dtype"], "u16");
        assert_eq!(header["dims"][0], 3);
        assert_eq!(std::fs::read(&path).unwrap().len(), 24);
        assert_eq!(ScalarVolume::load(&path).unwrap(), v);

        let frac = ScalarVolume::new([2, 2, 2], [1.0; 3], Point3::origin(), vec![0.5; 8]).unwrap();
        assert!(frac.save(dir.path().join("bad.raw")).is_err());
    }
}
