//! Depth frames, 2D facial landmarks and their lifting into 3D.
//!
//! Pixel `(u, v)` has its center at integer coordinates: column `u`, row `v`.
//! Landmarks may be sub-pixel; they are assumed to be given in depth-frame
//! pixel coordinates (RGB/depth alignment happens upstream).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::pgm;

/// Landmark indices kept for registration: nose (27-35) and eyes (36-47)
/// of the 68-point facial convention.
pub const EYES_NOSE: std::ops::RangeInclusive<u8> = 27..=47;

/// Number of landmarks in the facial convention.
pub const LANDMARK_COUNT: u8 = 68;

pub const DEFAULT_LIFT_WINDOW: usize = 5;
pub const DEFAULT_SEGMENT_MARGIN_MM: f64 = 10.0;

/// Pinhole intrinsics plus the metric size of one raw depth unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.depth_scale > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.depth_scale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Back-projects pixel coordinates at depth `z_mm`.
    pub fn unproject(&self, u: f64, v: f64, z_mm: f64) -> Point3 {
        Point3::new((u - self.cx) * z_mm / self.fx, (v - self.cy) * z_mm / self.fy, z_mm)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Point3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Millimeters per raw depth unit.
    pub fn mm_per_unit(&self) -> f64 {
        self.depth_scale * 1000.0
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        let k: Self = serde_json::from_str(&text)?;
        k.validate()?;
        Ok(k)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Sidecar path for a depth image: `face.pgm` -> `face.intrinsics.json`.
pub fn intrinsics_path(depth_path: &Path) -> PathBuf {
    depth_path.with_extension("intrinsics.json")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    width: usize,
    height: usize,
    depth: Vec<u16>,
    intrinsics: CameraIntrinsics,
}

impl DepthFrame {
    pub fn new(
        width: usize,
        height: usize,
        depth: Vec<u16>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        intrinsics.validate()?;
        if width == 0 || height == 0 || depth.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{} depth samples for a {width}x{height} frame",
                depth.len()
            )));
        }
        Ok(Self {
            width,
            height,
            depth,
            intrinsics,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn raw(&self) -> &[u16] {
        &self.depth
    }

    pub fn at(&self, u: usize, v: usize) -> u16 {
        self.depth[v * self.width + u]
    }

    /// Reads `path` (16-bit PGM) and its `.intrinsics.json` sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::load_with_intrinsics(path, intrinsics_path(path))
    }

    pub fn load_with_intrinsics(path: impl AsRef<Path>, intrinsics: impl AsRef<Path>) -> Result<Self> {
        let img = pgm::read_pgm(path.as_ref())?;
        let k = CameraIntrinsics::load(intrinsics)?;
        Self::new(img.width, img.height, img.data, k)
    }

    /// Writes the PGM and its intrinsics sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        pgm::write_pgm16(path, self.width, self.height, &self.depth)?;
        self.intrinsics.save(intrinsics_path(path))
    }
}

/// Back-projects every valid pixel, row-major, depths in millimeters.
pub fn depth_to_cloud(frame: &DepthFrame) -> Result<PointCloud> {
    let k = frame.intrinsics;
    let scale = k.mm_per_unit();
    let mut pts = Vec::new();
    for v in 0..frame.height {
        for u in 0..frame.width {
            let d = frame.at(u, v);
            if d > 0 {
                pts.push(k.unproject(u as f64, v as f64, d as f64 * scale));
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyDepthFrame);
    }
    PointCloud::new(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub index: u8,
    pub u: f64,
    pub v: f64,
}

/// Indexed 2D landmarks on an image, kept sorted by index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandmarkSet {
    image_width: usize,
    image_height: usize,
    landmarks: Vec<Landmark>,
}

#[derive(Deserialize)]
struct LandmarkSetRepr {
    image_width: usize,
    image_height: usize,
    landmarks: Vec<Landmark>,
}

impl<'de> Deserialize<'de> for LandmarkSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = LandmarkSetRepr::deserialize(d)?;
        LandmarkSet::new(r.image_width, r.image_height, r.landmarks).map_err(serde::de::Error::custom)
    }
}

impl LandmarkSet {
    pub fn new(image_width: usize, image_height: usize, mut landmarks: Vec<Landmark>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for l in &landmarks {
            if l.index >= LANDMARK_COUNT {
                return Err(Error::InvalidInput(format!("landmark index {} out of range", l.index)));
            }
            if !seen.insert(l.index) {
                return Err(Error::InvalidInput(format!("duplicate landmark index {}", l.index)));
            }
            let inside = l.u >= 0.0
                && l.u < image_width as f64
                && l.v >= 0.0
                && l.v < image_height as f64;
            if !inside {
                return Err(Error::InvalidInput(format!(
                    "landmark {} at ({}, {}) lies outside the {image_width}x{image_height} image",
                    l.index, l.u, l.v
                )));
            }
        }
        landmarks.sort_by_key(|l| l.index);
        Ok(Self {
            image_width,
            image_height,
            landmarks,
        })
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn landmarks(&self) -> &[Landmark] {
        &self.landmarks
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path.as_ref())?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Landmarks lifted to 3D: `cloud[i]` belongs to landmark `indices[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedLandmarks {
    pub cloud: PointCloud,
    pub indices: Vec<u8>,
}

/// Nose and eye landmarks only (indices 27-47).
pub fn select_eyes_nose(lm: &LandmarkSet) -> LandmarkSet {
    LandmarkSet {
        image_width: lm.image_width,
        image_height: lm.image_height,
        landmarks: lm
            .landmarks
            .iter()
            .filter(|l| EYES_NOSE.contains(&l.index))
            .copied()
            .collect(),
    }
}

pub(crate) fn nearest_pixel(x: f64, size: usize) -> usize {
    (x.round().max(0.0) as usize).min(size - 1)
}

/// Lifts each landmark with the depth under it; a dead pixel falls back to
/// the median of valid depths in a `window`x`window` neighborhood, and a
/// landmark whose whole window is invalid is dropped.
pub fn lift_landmarks(frame: &DepthFrame, lm: &LandmarkSet, window: usize) -> Result<LiftedLandmarks> {
    if lm.image_width != frame.width || lm.image_height != frame.height {
        return Err(Error::InvalidInput(format!(
            "landmarks are for a {}x{} image, depth frame is {}x{}",
            lm.image_width, lm.image_height, frame.width, frame.height
        )));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidInput(format!("window must be odd, got {window}")));
    }
    let k = frame.intrinsics;
    let half = window / 2;
    let mut pts = Vec::new();
    let mut indices = Vec::new();
    for l in &lm.landmarks {
        let pu = nearest_pixel(l.u, frame.width);
        let pv = nearest_pixel(l.v, frame.height);
        let raw = match frame.at(pu, pv) {
            0 => {
                let mut valid: Vec<u16> = Vec::with_capacity(window * window);
                for v in pv.saturating_sub(half)..=(pv + half).min(frame.height - 1) {
                    for u in pu.saturating_sub(half)..=(pu + half).min(frame.width - 1) {
                        let d = frame.at(u, v);
                        if d > 0 {
                            valid.push(d);
                        }
                    }
                }
                match median(&mut valid) {
                    Some(m) => m,
                    None => continue,
                }
            }
            d => d as f64,
        };
        pts.push(k.unproject(l.u, l.v, raw * k.mm_per_unit()));
        indices.push(l.index);
    }
    if pts.is_empty() {
        return Err(Error::NoLandmarks("depth lifting"));
    }
    Ok(LiftedLandmarks {
        cloud: PointCloud::new(pts)?,
        indices,
    })
}

fn median(values: &mut [u16]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        0.5 * (values[n / 2 - 1] as f64 + values[n / 2] as f64)
    })
}

/// Points of `cloud` inside the keypoints' bounding box grown by
/// `margin_mm` on every side (boundary included).
pub fn segment_region(cloud: &PointCloud, keypoints: &PointCloud, margin_mm: f64) -> Result<PointCloud> {
    let (lo, hi) = keypoints
        .bounds()
        .ok_or_else(|| Error::InvalidInput("no keypoints to segment around".into()))?;
    if !(margin_mm >= 0.0) {
        return Err(Error::InvalidInput(format!("negative margin {margin_mm}")));
    }
    let inside = |p: &Point3| {
        (0..3).all(|a| p[a] >= lo[a] - margin_mm && p[a] <= hi[a] + margin_mm)
    };
    let keep: Vec<usize> = cloud
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| inside(p))
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptySegmentation);
    }
    Ok(cloud.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 300.0,
            fy: 310.0,
            cx: 16.0,
            cy: 12.0,
            depth_scale: 0.0001,
        }
    }

    fn frame_with(fill: u16) -> DepthFrame {
        DepthFrame::new(32, 24, vec![fill; 32 * 24], intrinsics()).unwrap()
    }

    #[test]
    fn principal_point_ray() {
        let mut f = frame_with(0);
        f.depth[12 * 32 + 16] = 5000; // 500 mm
        let c = depth_to_cloud(&f).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c.points()[0] - Point3::new(0.0, 0.0, 500.0)).norm() < 1e-12);
    }

    #[test]
    fn all_zero_frame_is_empty() {
        let err = depth_to_cloud(&frame_with(0)).unwrap_err();
        assert_eq!(err.to_string(), "empty depth frame");
    }

    #[test]
    fn plane_round_trip() {
        let f = frame_with(4000);
        let c = depth_to_cloud(&f).unwrap();
        assert_eq!(c.len(), 32 * 24);
        for (i, p) in c.points().iter().enumerate() {
            assert!((p.z - 400.0).abs() < 1e-6);
            let (u, v) = f.intrinsics().project(p);
            assert!((u - (i % 32) as f64).abs() < 0.5);
            assert!((v - (i / 32) as f64).abs() < 0.5);
        }
    }

    #[test]
    fn lift_at_principal_point() {
        let f = frame_with(6000);
        let lm = LandmarkSet::new(32, 24, vec![Landmark { index: 30, u: 16.0, v: 12.0 }]).unwrap();
        let lifted = lift_landmarks(&f, &lm, 5).unwrap();
        assert_eq!(lifted.indices, vec![30]);
        assert!((lifted.cloud.points()[0] - Point3::new(0.0, 0.0, 600.0)).norm() < 1e-9);
    }

    #[test]
    fn dead_pixel_uses_window_median() {
        let mut f = frame_with(5500);
        f.depth[5 * 32 + 5] = 0;
        let lm = LandmarkSet::new(32, 24, vec![Landmark { index: 40, u: 5.2, v: 4.9 }]).unwrap();
        let lifted = lift_landmarks(&f, &lm, 5).unwrap();
        assert!((lifted.cloud.points()[0].z - 550.0).abs() < 1e-9);
    }

    #[test]
    fn fully_dead_window_drops_landmark() {
        let mut f = frame_with(5000);
        for v in 0..6 {
            for u in 0..6 {
                f.depth[v * 32 + u] = 0;
            }
        }
        let lm = LandmarkSet::new(
            32,
            24,
            vec![Landmark { index: 27, u: 2.0, v: 2.0 }, Landmark { index: 28, u: 20.0, v: 20.0 }],
        )
        .unwrap();
        let lifted = lift_landmarks(&f, &lm, 5).unwrap();
        assert_eq!(lifted.indices, vec![28]);

        let only_dead = LandmarkSet::new(32, 24, vec![Landmark { index: 27, u: 2.0, v: 2.0 }]).unwrap();
        assert!(matches!(lift_landmarks(&f, &only_dead, 5), Err(Error::NoLandmarks(_))));
    }

    #[test]
    fn lift_rejects_mismatched_dimensions() {
        let lm = LandmarkSet::new(64, 48, vec![]).unwrap();
        assert!(lift_landmarks(&frame_with(100), &lm, 5).is_err());
    }

    fn full_set() -> LandmarkSet {
        let lms = (0..68).map(|i| Landmark { index: i, u: i as f64, v: 1.0 }).collect();
        LandmarkSet::new(100, 10, lms).unwrap()
    }

    #[test]
    fn eyes_nose_subset() {
        let sel = select_eyes_nose(&full_set());
        assert_eq!(sel.len(), 21);
        assert!(sel.landmarks().iter().all(|l| (27..=47).contains(&l.index)));

        let jaw = LandmarkSet::new(100, 10, vec![Landmark { index: 0, u: 1.0, v: 1.0 }]).unwrap();
        assert!(select_eyes_nose(&jaw).is_empty());

        let lms = (27..68).map(|i| Landmark { index: i, u: i as f64, v: 1.0 }).collect();
        let with_mouth = LandmarkSet::new(100, 10, lms).unwrap();
        assert_eq!(select_eyes_nose(&with_mouth).len(), 21);
    }

    #[test]
    fn landmark_validation() {
        let bad_index = vec![Landmark { index: 68, u: 1.0, v: 1.0 }];
        assert!(LandmarkSet::new(10, 10, bad_index).is_err());
        let dup = vec![Landmark { index: 3, u: 1.0, v: 1.0 }, Landmark { index: 3, u: 2.0, v: 1.0 }];
        assert!(LandmarkSet::new(10, 10, dup).is_err());
        let outside = vec![Landmark { index: 3, u: 10.0, v: 1.0 }];
        assert!(LandmarkSet::new(10, 10, outside).is_err());
    }

    #[test]
    fn landmark_json_shape() {
        let text = r#"{"image_width": 4, "image_height": 3,
            "landmarks": [{"index": 31, "u": 1.5, "v": 2.25}, {"index": 27, "u": 0, "v": 0}]}"#;
        let set: LandmarkSet = serde_json::from_str(text).unwrap();
        assert_eq!(set.landmarks()[0].index, 27);
        assert_eq!(set.landmarks()[1].u, 1.5);
        let bad = r#"{"image_width": 4, "image_height": 3, "landmarks": [{"index": 31, "u": 9, "v": 0}]}"#;
        assert!(serde_json::from_str::<LandmarkSet>(bad).is_err());
    }

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    #[test]
    fn segment_self_contains() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.0, 5.0, 2.0]]);
        for margin in [0.0, 0.5, 10.0] {
            assert_eq!(segment_region(&c, &c, margin).unwrap(), c);
        }
    }

    #[test]
    fn segment_boundary_convention() {
        let kp = cloud(&[[0.0, 0.0, 0.0], [10.0, 10.0, 10.0]]);
        let c = cloud(&[[20.0, 5.0, 5.0], [20.5, 5.0, 5.0], [5.0, 5.0, 5.0], [5.0, -10.0, 5.0]]);
        let seg = segment_region(&c, &kp, 10.0).unwrap();
        assert_eq!(seg.points(), &[Point3::new(20.0, 5.0, 5.0), Point3::new(5.0, 5.0, 5.0), Point3::new(5.0, -10.0, 5.0)]);
        let far = cloud(&[[100.0, 0.0, 0.0]]);
        assert_eq!(segment_region(&far, &kp, 1.0).unwrap_err().to_string(), "segmentation produced empty cloud");
    }

    #[test]
    fn depth_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("face.pgm");
        let mut f = frame_with(1234);
        f.depth[7] = 65535;
        f.save(&path).unwrap();
        assert!(dir.path().join("face.intrinsics.json").exists());
        assert_eq!(DepthFrame::load(&path).unwrap(), f);
    }
}
