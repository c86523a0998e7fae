//! Phantom benchmark: the landmark pipeline against ISS, Harris-3D and
//! SIFT-3D keypoints, all feeding the same coarse and fine ICP.

mod phantom;
mod report;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use phantom::{ct_image_landmarks, generate_phantom, Phantom, PhantomSpec, PHANTOM_ISO};
pub use report::{parse_csv, report_emit, CsvRow, ReportFormat, CSV_COLUMNS};

use crate::depth::{
    depth_to_cloud, lift_landmarks, segment_region, select_eyes_nose, DEFAULT_LIFT_WINDOW,
    DEFAULT_SEGMENT_MARGIN_MM,
};
use crate::error::{Error, Result};
use crate::geometry::{apply_transform, Point3, PointCloud, RigidTransform, Vec3};
use crate::keypoints::{harris3d_keypoints, iss_keypoints, sift3d_keypoints, KeypointParams};
use crate::registration::{coarse_register, evaluate_rmse, fine_register};
use crate::surface::{
    backproject_landmarks, estimate_normals, marching_cubes, mesh_to_cloud, render_normal_angle_image,
    DEFAULT_NORMAL_NEIGHBORS,
};

/// Fine RMSE below which a run counts as a successful registration.
pub const SUCCESS_RMSE_MM: f64 = 2.0;

/// The CT side is cut with a wider margin than the camera side so the
/// target covers every source point.
pub const TARGET_MARGIN_MM: f64 = 2.0 * DEFAULT_SEGMENT_MARGIN_MM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ours,
    Iss,
    Harris,
    Sift,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ours, Method::Iss, Method::Harris, Method::Sift];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Iss => "iss",
            Method::Harris => "harris",
            Method::Sift => "sift",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?} (expected ours, iss, harris or sift)")))
    }
}

/// Rotation by `angle_deg` about `axis` through `center`, then a
/// translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub angle_deg: f64,
    pub axis: [f64; 3],
    pub center: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            angle_deg: 0.0,
            axis: [0.0, 0.0, 1.0],
            center: [0.0, 0.0, 0.0],
            translation: [0.0, 0.0, 0.0],
        }
    }
}

impl Perturbation {
    pub fn transform(&self) -> Result<RigidTransform> {
        let axis = Vec3::from(self.axis);
        if !(axis.norm() > 0.0) || !self.angle_deg.is_finite() {
            return Err(Error::InvalidInput("perturbation needs a nonzero axis and finite angle".into()));
        }
        let c = Vec3::from(self.center);
        let rot = RigidTransform::from_axis_angle(axis, self.angle_deg.to_radians(), Vec3::zeros());
        let t = c - rot.rotation * c + Vec3::from(self.translation);
        Ok(RigidTransform {
            rotation: rot.rotation,
            translation: t,
        })
    }
}

/// A phantom plus the perturbation applied to the camera side.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub note: String,
}

impl Scenario {
    /// Reads a scenario file, or a bare phantom spec with no perturbation.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let scenario = if value.get("phantom").is_some() || value.get("perturbation").is_some() {
            serde_json::from_value(value)?
        } else {
            Scenario {
                phantom: serde_json::from_value(value)?,
                perturbation: Perturbation::default(),
                note: String::new(),
            }
        };
        scenario.phantom.validate()?;
        scenario.perturbation.transform()?;
        Ok(scenario)
    }
}

/// The 5x5 grid of rotations {0, 7.5, .., 30} deg and translations
/// {0, 12.5, .., 50} mm. Axes and directions are drawn from `seed`; every
/// rotation is about the head center as the camera sees it.
pub fn perturbation_grid(spec: &PhantomSpec, seed: u64) -> Vec<Perturbation> {
    let center = spec.camera_pose().inverse().apply_point(&spec.head_center());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = move || loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    };
    let mut out = Vec::with_capacity(25);
    for i in 0..5 {
        for j in 0..5 {
            let axis = unit();
            let dir = unit();
            out.push(Perturbation {
                angle_deg: 7.5 * i as f64,
                axis: axis.into(),
                center: center.coords.into(),
                translation: (dir * 12.5 * j as f64).into(),
            });
        }
    }
    out
}

/// Everything the methods share: segmented clouds and landmark keypoints
/// on both sides, before any perturbation.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: PhantomSpec,
    pub phantom: Phantom,
    /// Segmented depth cloud, camera frame.
    pub source: PointCloud,
    pub source_landmarks: PointCloud,
    /// Segmented CT skin cloud with mesh normals.
    pub target: PointCloud,
    pub target_landmarks: PointCloud,
    /// Camera position in the camera frame (the origin).
    pub viewpoint: Point3,
}

impl Scene {
    pub fn prepare(spec: &PhantomSpec) -> Result<Self> {
        let phantom = generate_phantom(spec)?;
        let cam_lm = select_eyes_nose(&phantom.camera_landmarks);
        let lifted = lift_landmarks(&phantom.depth_frame, &cam_lm, DEFAULT_LIFT_WINDOW)?;
        let full = depth_to_cloud(&phantom.depth_frame)?;
        let source = segment_region(&full, &lifted.cloud, DEFAULT_SEGMENT_MARGIN_MM)?;

        let mesh = marching_cubes(&phantom.volume, PHANTOM_ISO)?;
        let view_axis = -spec.camera_pose().rotation.column(2).into_owned();
        let image = render_normal_angle_image(&mesh, &view_axis, spec.render_resolution)?;
        let ct_lm = select_eyes_nose(&ct_image_landmarks(spec, &phantom, &image)?);
        let back = backproject_landmarks(&image, &ct_lm)?;
        let target = segment_region(&mesh_to_cloud(&mesh), &back.cloud, TARGET_MARGIN_MM)?;

        Ok(Self {
            spec: spec.clone(),
            phantom,
            source,
            source_landmarks: lifted.cloud,
            target,
            target_landmarks: back.cloud,
            viewpoint: Point3::origin(),
        })
    }

    /// Maps camera-frame points into the CT frame.
    pub fn camera_to_ct(&self) -> RigidTransform {
        self.phantom.ground_truth.inverse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub src_features: usize,
    pub tgt_features: usize,
    pub coarse_rmse_mm: Option<f64>,
    pub fine_rmse_mm: Option<f64>,
    pub t_coarse_s: f64,
    pub t_fine_s: f64,
    pub t_total_s: f64,
    /// Keypoint extraction time, outside the registration cost.
    pub t_extract_s: f64,
    pub converged: bool,
    /// Final pose error against the phantom ground truth; the translation
    /// part is the displacement error at the source centroid.
    pub rotation_error_deg: Option<f64>,
    pub translation_error_mm: Option<f64>,
    pub error: Option<String>,
}

impl MethodRow {
    fn failed(method: Method, e: &Error) -> Self {
        Self {
            method,
            src_features: 0,
            tgt_features: 0,
            coarse_rmse_mm: None,
            fine_rmse_mm: None,
            t_coarse_s: 0.0,
            t_fine_s: 0.0,
            t_total_s: 0.0,
            t_extract_s: 0.0,
            converged: false,
            rotation_error_deg: None,
            translation_error_mm: None,
            error: Some(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub trials: usize,
    pub rows: Vec<MethodRow>,
}

/// One registration run of one method, untimed fields deterministic.
struct Run {
    src_features: usize,
    tgt_features: usize,
    coarse_rmse: f64,
    fine_rmse: f64,
    t_extract: f64,
    t_coarse: f64,
    t_fine: f64,
    transform: RigidTransform,
}

fn keypoints_for(method: Method, source: &PointCloud, viewpoint: &Point3, target: &PointCloud) -> Result<(PointCloud, PointCloud)> {
    let detect = |c: &PointCloud| {
        let params = KeypointParams::for_cloud(c)?;
        match method {
            Method::Iss => iss_keypoints(c, &params),
            Method::Harris => harris3d_keypoints(c, &params),
            Method::Sift => sift3d_keypoints(c, &params),
            Method::Ours => unreachable!("landmark keypoints are not detected"),
        }
    };
    let src = match method {
        Method::Iss => source.clone(),
        _ => estimate_normals(source, DEFAULT_NORMAL_NEIGHBORS, viewpoint)?,
    };
    Ok((detect(&src)?, detect(target)?))
}

fn run_once(scene: &Scene, perturbation: &RigidTransform, method: Method) -> Result<Run> {
    let source = apply_transform(perturbation, &scene.source);
    let viewpoint = perturbation.apply_point(&scene.viewpoint);

    let start = Instant::now();
    let (src_kp, tgt_kp) = match method {
        Method::Ours => (
            apply_transform(perturbation, &scene.source_landmarks),
            scene.target_landmarks.clone(),
        ),
        _ => keypoints_for(method, &source, &viewpoint, &scene.target)?,
    };
    let t_extract = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let coarse = coarse_register(&src_kp, &tgt_kp)?;
    let t_coarse = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let fine = fine_register(&source, &scene.target, &coarse.transform)?;
    let t_fine = start.elapsed().as_secs_f64();

    Ok(Run {
        src_features: src_kp.len(),
        tgt_features: tgt_kp.len(),
        coarse_rmse: evaluate_rmse(&source, &scene.target, &coarse.transform)?,
        fine_rmse: evaluate_rmse(&source, &scene.target, &fine.transform)?,
        t_extract,
        t_coarse,
        t_fine,
        transform: fine.transform,
    })
}

/// Runs every method `trials` times on a prepared scene. Stage errors end
/// up in the method's row; rows come out in `Method` order.
pub fn run_comparison_on(scene: &Scene, perturbation: &RigidTransform, methods: &[Method], trials: usize) -> Result<BenchReport> {
    if trials < 1 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    // Source points after the perturbation map to CT through this.
    let truth = scene.camera_to_ct().compose(&perturbation.inverse());
    let centroid = perturbation.apply_point(&scene.source.centroid().ok_or(Error::EmptyCloud)?);

    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let mut runs = Vec::with_capacity(trials);
        let mut failure = None;
        for _ in 0..trials {
            match run_once(scene, perturbation, method) {
                Ok(r) => runs.push(r),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failure {
            rows.push(MethodRow::failed(method, &e));
            continue;
        }
        let n = trials as f64;
        let mean = |f: fn(&Run) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let (t_coarse, t_fine) = (mean(|r| r.t_coarse), mean(|r| r.t_fine));
        let first = &runs[0];
        rows.push(MethodRow {
            method,
            src_features: first.src_features,
            tgt_features: first.tgt_features,
            coarse_rmse_mm: Some(first.coarse_rmse),
            fine_rmse_mm: Some(first.fine_rmse),
            t_coarse_s: t_coarse,
            t_fine_s: t_fine,
            t_total_s: t_coarse + t_fine,
            t_extract_s: mean(|r| r.t_extract),
            converged: first.fine_rmse < SUCCESS_RMSE_MM,
            rotation_error_deg: Some(first.transform.inverse().compose(&truth).rotation_angle_deg()),
            translation_error_mm: Some((first.transform.apply_point(&centroid) - truth.apply_point(&centroid)).norm()),
            error: None,
        });
    }
    Ok(BenchReport { trials, rows })
}

/// Generates the phantom for `spec` and runs the comparison on it.
pub fn run_comparison(spec: &PhantomSpec, perturbation: &RigidTransform, methods: &[Method], trials: usize) -> Result<BenchReport> {
    if trials < 1 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    run_comparison_on(&Scene::prepare(spec)?, perturbation, methods, trials)
}

#[cfg(test)]
mod tests;
