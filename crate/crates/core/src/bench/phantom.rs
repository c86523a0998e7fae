//! Analytic face phantom: an implicit head surface voxelized as a CT volume
//! and ray-cast into a depth frame, with landmarks known in both.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::{CameraIntrinsics, DepthFrame, Landmark, LandmarkSet};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, RigidTransform, Vec3};
use crate::surface::ScalarVolume;

/// Volume value on the skin; inside is brighter.
pub const PHANTOM_ISO: f64 = 1000.0;
const VALUE_PER_MM: f64 = 100.0;

const RAY_STEP_MM: f64 = 0.5;
const BISECTION_STEPS: usize = 60;

/// Landmark positions relative to the head center, in mm, for indices 27..=47.
/// +x is image right, +y is image down for the default camera.
const LANDMARK_LAYOUT: [(u8, f64, f64); 21] = [
    (27, 0.0, -25.0),
    (28, 0.0, -15.0),
    (29, 0.0, -5.0),
    (30, 0.0, 5.0),
    (31, -12.0, 15.0),
    (32, -6.0, 17.0),
    (33, 0.0, 18.0),
    (34, 6.0, 17.0),
    (35, 12.0, 15.0),
    (36, -46.0, -25.0),
    (37, -37.0, -30.0),
    (38, -27.0, -30.0),
    (39, -18.0, -25.0),
    (40, -27.0, -21.0),
    (41, -37.0, -21.0),
    (42, 18.0, -25.0),
    (43, 27.0, -30.0),
    (44, 37.0, -30.0),
    (45, 46.0, -25.0),
    (46, 37.0, -21.0),
    (47, 27.0, -21.0),
];

const NOSE_TIP_Y: f64 = 5.0;
const EYE_Y: f64 = -25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub grid_dims: [usize; 3],
    pub grid_spacing: [f64; 3],
    pub head_center: [f64; 3],
    pub head_radii: [f64; 3],
    pub nose_amplitude: f64,
    pub nose_width: f64,
    /// Falloff of the ridge from the tip toward the brow.
    pub nose_length: f64,
    /// Falloff below the tip.
    pub nose_drop: f64,
    pub eye_depth: f64,
    pub eye_radius: f64,
    pub eye_separation: f64,
    pub camera_viewpoint: [f64; 3],
    pub camera_view_axis: [f64; 3],
    pub image_size: [usize; 2],
    pub intrinsics: CameraIntrinsics,
    pub noise_sigma: f64,
    /// Gaussian voxel noise, in mm of skin displacement.
    pub ct_noise_sigma: f64,
    /// Uniform jitter applied to the CT-side image landmarks.
    pub ct_landmark_jitter_px: f64,
    /// Landmark indices missing on the CT side.
    pub ct_dropped_landmarks: Vec<u8>,
    pub render_resolution: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            grid_dims: [161, 211, 91],
            grid_spacing: [1.0, 1.0, 1.0],
            head_center: [0.0, 0.0, 500.0],
            head_radii: [75.0, 100.0, 95.0],
            nose_amplitude: 18.0,
            nose_width: 8.0,
            nose_length: 22.0,
            nose_drop: 8.0,
            eye_depth: 8.0,
            eye_radius: 12.0,
            eye_separation: 64.0,
            camera_viewpoint: [0.0, 0.0, 0.0],
            camera_view_axis: [0.0, 0.0, 1.0],
            image_size: [640, 480],
            intrinsics: CameraIntrinsics {
                fx: 570.0,
                fy: 570.0,
                cx: 320.0,
                cy: 240.0,
                depth_scale: 1e-4,
            },
            noise_sigma: 0.5,
            ct_noise_sigma: 0.3,
            ct_landmark_jitter_px: 1.0,
            ct_dropped_landmarks: vec![47],
            render_resolution: 1.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = self
            .grid_spacing
            .iter()
            .chain(&self.head_radii)
            .chain(&[
                self.nose_amplitude,
                self.nose_width,
                self.nose_length,
                self.nose_drop,
                self.eye_depth,
                self.eye_radius,
                self.eye_separation,
                self.render_resolution,
            ])
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return Err(Error::InvalidInput("phantom geometry must be positive".into()));
        }
        if self.grid_dims.iter().any(|&d| d < 2) || self.image_size.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput("phantom grid and image need nonzero size".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.ct_noise_sigma >= 0.0 && self.ct_landmark_jitter_px >= 0.0) {
            return Err(Error::InvalidInput("noise and jitter must be >= 0".into()));
        }
        if !(Vec3::from(self.camera_view_axis).norm() > 0.0) {
            return Err(Error::InvalidInput("camera view axis is zero".into()));
        }
        self.intrinsics.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn head_center(&self) -> Point3 {
        Point3::from(self.head_center)
    }

    /// Implicit skin function, positive inside, close to a signed distance
    /// in mm on the face.
    pub fn implicit(&self, p: &Point3) -> f64 {
        let d = p - self.head_center();
        let [a, b, c] = self.head_radii;
        let rho = ((d.x / a).powi(2) + (d.y / b).powi(2) + (d.z / c).powi(2)).sqrt();
        let base = c * (1.0 - rho);
        let front = (-d.z / c).clamp(0.0, 1.0).powi(2);
        let nose_falloff = if d.y < NOSE_TIP_Y { self.nose_length } else { self.nose_drop };
        let nose = self.nose_amplitude
            * gauss(d.x, self.nose_width)
            * gauss(d.y - NOSE_TIP_Y, nose_falloff);
        let half = self.eye_separation / 2.0;
        let eyes = self.eye_depth
            * (gauss((d.x - half).hypot(d.y - EYE_Y), self.eye_radius)
                + gauss((d.x + half).hypot(d.y - EYE_Y), self.eye_radius));
        base + front * (nose - eyes)
    }

    pub fn volume_value(&self, p: &Point3) -> f64 {
        (PHANTOM_ISO + VALUE_PER_MM * self.implicit(p)).clamp(0.0, 2.0 * PHANTOM_ISO)
    }

    /// Camera-to-CT pose from the viewpoint and view axis. Camera +y follows
    /// CT +y as closely as the axis allows.
    pub fn camera_pose(&self) -> RigidTransform {
        let z = Vec3::from(self.camera_view_axis).normalize();
        let up = if z.y.abs() > 0.9 { Vec3::z() } else { Vec3::y() };
        let y = (up - z * up.dot(&z)).normalize();
        let x = y.cross(&z);
        RigidTransform {
            rotation: nalgebra::Matrix3::from_columns(&[x, y, z]),
            translation: Vec3::from(self.camera_viewpoint),
        }
    }

    /// Volume origin: grid centered on the head in x and y, starting just
    /// in front of the nose in z.
    fn grid_origin(&self) -> Point3 {
        let c = self.head_center();
        let [nx, ny, _] = self.grid_dims;
        let [sx, sy, _] = self.grid_spacing;
        Point3::new(
            c.x - (nx - 1) as f64 * sx / 2.0,
            c.y - (ny - 1) as f64 * sy / 2.0,
            c.z - self.head_radii[2] - self.nose_amplitude - 10.0,
        )
    }

    /// Surface point on the face at head-relative (x, y), by bisection
    /// along the frontal direction.
    fn face_point(&self, x: f64, y: f64) -> Point3 {
        let c = self.head_center();
        let at = |z: f64| Point3::new(c.x + x, c.y + y, z);
        let mut outside = c.z - self.head_radii[2] - self.nose_amplitude - 20.0;
        let mut inside = c.z;
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (outside + inside);
            if self.implicit(&at(mid)) >= 0.0 {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        at(0.5 * (outside + inside))
    }
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-(x * x) / (2.0 * sigma * sigma)).exp()
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: ScalarVolume,
    pub depth_frame: DepthFrame,
    /// Exact projections of the surface landmarks that land in the image.
    pub camera_landmarks: LandmarkSet,
    /// CT-frame landmarks, in index order 27..=47.
    pub surface_landmarks_3d: PointCloud,
    pub landmark_indices: Vec<u8>,
    /// Maps CT coordinates into the camera frame.
    pub ground_truth: RigidTransform,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut volume = ScalarVolume::from_fn(spec.grid_dims, spec.grid_spacing, spec.grid_origin(), |p| {
        spec.volume_value(p)
    })?;
    if spec.ct_noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2);
        let noise = Normal::new(0.0, VALUE_PER_MM * spec.ct_noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let values = volume
            .values()
            .iter()
            .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 2.0 * PHANTOM_ISO))
            .collect();
        volume = ScalarVolume::new(spec.grid_dims, spec.grid_spacing, spec.grid_origin(), values)?;
    }
    let pose = spec.camera_pose();
    let ground_truth = pose.inverse();

    let depth_frame = ray_cast(spec, &pose)?;

    let (landmark_indices, pts): (Vec<u8>, Vec<Point3>) = LANDMARK_LAYOUT
        .iter()
        .map(|&(i, x, y)| (i, spec.face_point(x, y)))
        .unzip();
    let [w, h] = spec.image_size;
    let mut cam = Vec::new();
    for (&index, p) in landmark_indices.iter().zip(&pts) {
        let q = ground_truth.apply_point(p);
        if q.z <= 0.0 {
            continue;
        }
        let (u, v) = spec.intrinsics.project(&q);
        if u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64 {
            cam.push(Landmark { index, u, v });
        }
    }
    if cam.is_empty() {
        return Err(Error::CameraMissesSurface);
    }
    Ok(Phantom {
        volume,
        depth_frame,
        camera_landmarks: LandmarkSet::new(w, h, cam)?,
        surface_landmarks_3d: PointCloud::new(pts)?,
        landmark_indices,
        ground_truth,
    })
}

/// Depth image of the implicit surface. Depth noise is drawn per hit pixel
/// in row-major order.
fn ray_cast(spec: &PhantomSpec, pose: &RigidTransform) -> Result<DepthFrame> {
    let [w, h] = spec.image_size;
    let k = spec.intrinsics;
    let unit = k.mm_per_unit();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let center = spec.head_center();
    let pad = spec.nose_amplitude + 5.0;
    let radii = Vec3::from(spec.head_radii).add_scalar(pad);
    let origin = Point3::from(spec.camera_viewpoint);

    let mut depth = vec![0u16; w * h];
    let mut hits = 0usize;
    for v in 0..h {
        for u in 0..w {
            let dir_cam = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let dir = pose.apply_vector(&dir_cam);
            let Some((t0, t1)) = ellipsoid_span(&origin, &dir, &center, &radii) else {
                continue;
            };
            let Some(t) = first_crossing(spec, &origin, &dir, t0.max(0.0), t1) else {
                continue;
            };
            let z = if spec.noise_sigma > 0.0 { t + noise.sample(&mut rng) } else { t };
            let raw = (z / unit).round();
            if raw >= 1.0 && raw <= u16::MAX as f64 {
                depth[v * w + u] = raw as u16;
                hits += 1;
            }
        }
    }
    if hits == 0 {
        return Err(Error::CameraMissesSurface);
    }
    DepthFrame::new(w, h, depth, k)
}

/// Ray parameter interval inside an axis-aligned ellipsoid.
fn ellipsoid_span(o: &Point3, d: &Vec3, c: &Point3, r: &Vec3) -> Option<(f64, f64)> {
    let oc = (o - c).component_div(r);
    let ds = d.component_div(r);
    let a = ds.norm_squared();
    let b = 2.0 * oc.dot(&ds);
    let cc = oc.norm_squared() - 1.0;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let t1 = (-b + s) / (2.0 * a);
    (t1 > 0.0).then(|| ((-b - s) / (2.0 * a), t1))
}

fn first_crossing(spec: &PhantomSpec, o: &Point3, d: &Vec3, t0: f64, t1: f64) -> Option<f64> {
    let f = |t: f64| spec.implicit(&(o + d * t));
    let mut prev = t0;
    if f(prev) >= 0.0 {
        return None;
    }
    let mut t = t0;
    while t < t1 {
        t = (t + RAY_STEP_MM).min(t1);
        if f(t) >= 0.0 {
            let (mut lo, mut hi) = (prev, t);
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if f(mid) >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        prev = t;
    }
    None
}

/// CT-side image landmarks: the surface landmarks projected into the
/// normal-angle image with uniform jitter, minus the dropped indices.
pub fn ct_image_landmarks(
    spec: &PhantomSpec,
    phantom: &Phantom,
    image: &crate::surface::NormalAngleImage,
) -> Result<LandmarkSet> {
    let plane = image
        .plane
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("image has no projection plane".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let j = spec.ct_landmark_jitter_px;
    let mut out = Vec::new();
    for (&index, p) in phantom.landmark_indices.iter().zip(phantom.surface_landmarks_3d.points()) {
        let (du, dv) = if j > 0.0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        if spec.ct_dropped_landmarks.contains(&index) {
            continue;
        }
        let (u, v) = plane.project(p);
        let (u, v) = (u + du, v + dv);
        if u >= 0.0 && u < image.width as f64 && v >= 0.0 && v < image.height as f64 {
            out.push(Landmark { index, u, v });
        }
    }
    LandmarkSet::new(image.width, image.height, out)
}
