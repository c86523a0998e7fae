//! Point-to-point ICP and the two-stage (keypoint coarse, full-cloud fine)
//! registration built on it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{estimate_rigid, Point3, PointCloud, RigidTransform};
use crate::index::{dist2, NeighborIndex};

pub const COARSE_MAX_ITERATIONS: usize = 200;
pub const FINE_MAX_ITERATIONS: usize = 150;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Pairs farther apart than this are dropped; 0 disables the gate.
    pub max_correspondence_distance: f64,
    pub translation_epsilon: f64,
    pub rmse_epsilon: f64,
    /// Fraction of the (gated) pairs kept, best distances first.
    pub overlap_fraction: f64,
}

impl IcpParams {
    pub fn coarse() -> Self {
        Self {
            max_iterations: COARSE_MAX_ITERATIONS,
            max_correspondence_distance: 0.0,
            translation_epsilon: DEFAULT_EPSILON,
            rmse_epsilon: DEFAULT_EPSILON,
            overlap_fraction: 1.0,
        }
    }

    pub fn fine() -> Self {
        Self {
            max_iterations: FINE_MAX_ITERATIONS,
            ..Self::coarse()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "overlap_fraction {} outside (0, 1]",
                self.overlap_fraction
            )));
        }
        for (name, v) in [
            ("max_correspondence_distance", self.max_correspondence_distance),
            ("translation_epsilon", self.translation_epsilon),
            ("rmse_epsilon", self.rmse_epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be a finite value >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Maps the original source cloud into the target frame.
    pub transform: RigidTransform,
    pub rmse: f64,
    pub iterations_run: usize,
    /// True when an epsilon stopped the loop before the iteration budget.
    pub converged: bool,
    /// Residual RMSE over the surviving pairs after each iteration's solve.
    pub per_iteration_rmse: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ResultRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    rmse: f64,
    iterations_run: usize,
    converged: bool,
    per_iteration_rmse: Vec<f64>,
}

impl Serialize for RegistrationResult {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let t = &self.transform.translation;
        ResultRepr {
            rotation: self.transform.rotation_rows(),
            translation: [t.x, t.y, t.z],
            rmse: self.rmse,
            iterations_run: self.iterations_run,
            converged: self.converged,
            per_iteration_rmse: self.per_iteration_rmse.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegistrationResult {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = ResultRepr::deserialize(d)?;
        let transform: RigidTransform = serde_json::from_value(serde_json::json!({
            "rotation": r.rotation,
            "translation": r.translation,
        }))
        .map_err(serde::de::Error::custom)?;
        Ok(Self {
            transform,
            rmse: r.rmse,
            iterations_run: r.iterations_run,
            converged: r.converged,
            per_iteration_rmse: r.per_iteration_rmse,
        })
    }
}

impl RegistrationResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn require_points(cloud: &PointCloud, min: usize) -> Result<()> {
    if cloud.len() < min {
        return Err(Error::CloudTooSmall {
            required: min,
            actual: cloud.len(),
        });
    }
    Ok(())
}

/// Point-to-point ICP from `init`.
///
/// Each iteration pairs every moved source point with its nearest target
/// point, gates and trims the pairs, solves the rigid update on the
/// survivors and records their residual RMSE. The loop stops after
/// `max_iterations`, when the RMSE changes by less than `rmse_epsilon`, or
/// when the update translation is shorter than `translation_epsilon`.
pub fn icp(source: &PointCloud, target: &PointCloud, init: &RigidTransform, p: &IcpParams) -> Result<RegistrationResult> {
    p.validate()?;
    require_points(source, 3)?;
    require_points(target, 3)?;
    let index = NeighborIndex::build(target)?;
    let tgt = target.points();
    let mut current = *init;
    let mut per_iteration_rmse = Vec::new();
    let mut converged = false;
    let mut moved: Vec<Point3> = source.points().iter().map(|q| current.apply_point(q)).collect();

    for _ in 0..p.max_iterations {
        let nn = index.nearest_batch(&moved);
        let mut pairs: Vec<usize> = (0..moved.len())
            .filter(|&i| p.max_correspondence_distance == 0.0 || nn[i].distance <= p.max_correspondence_distance)
            .collect();
        if p.overlap_fraction < 1.0 {
            pairs.sort_by(|&a, &b| nn[a].distance.total_cmp(&nn[b].distance).then(a.cmp(&b)));
            let keep = (p.overlap_fraction * pairs.len() as f64).ceil() as usize;
            pairs.truncate(keep);
            pairs.sort_unstable();
        }
        if pairs.len() < 3 {
            return Err(Error::CorrespondenceStarvation);
        }
        let src: Vec<Point3> = pairs.iter().map(|&i| moved[i]).collect();
        let dst: Vec<Point3> = pairs.iter().map(|&i| tgt[nn[i].index]).collect();
        let delta = estimate_rigid(&src, &dst)?;
        current = delta.compose(&current);
        moved = source.points().iter().map(|q| current.apply_point(q)).collect();

        let sq: f64 = pairs.iter().zip(&dst).map(|(&i, d)| dist2(&moved[i], d)).sum();
        let rmse = (sq / pairs.len() as f64).sqrt();
        let prev = per_iteration_rmse.last().copied();
        per_iteration_rmse.push(rmse);
        let rmse_settled = prev.is_some_and(|r: f64| (r - rmse).abs() < p.rmse_epsilon);
        if rmse_settled || delta.translation.norm() < p.translation_epsilon {
            converged = true;
            break;
        }
    }

    Ok(RegistrationResult {
        transform: current,
        rmse: *per_iteration_rmse.last().expect("at least one iteration"),
        iterations_run: per_iteration_rmse.len(),
        converged,
        per_iteration_rmse,
    })
}

/// Translation taking the source centroid onto the target centroid.
pub fn centroid_alignment(source: &PointCloud, target: &PointCloud) -> Result<RigidTransform> {
    let s = source.centroid().ok_or(Error::EmptyCloud)?;
    let t = target.centroid().ok_or(Error::EmptyCloud)?;
    Ok(RigidTransform::from_translation(t - s))
}

/// Coarse stage on keypoint clouds: centroid pre-alignment, then ICP with
/// `IcpParams::coarse()`.
pub fn coarse_register(source_kp: &PointCloud, target_kp: &PointCloud) -> Result<RegistrationResult> {
    coarse_register_with(source_kp, target_kp, &IcpParams::coarse())
}

pub fn coarse_register_with(source_kp: &PointCloud, target_kp: &PointCloud, p: &IcpParams) -> Result<RegistrationResult> {
    require_points(source_kp, 3)?;
    require_points(target_kp, 3)?;
    icp(source_kp, target_kp, &centroid_alignment(source_kp, target_kp)?, p)
}

/// Fine stage on full clouds from `init`, with `IcpParams::fine()`.
pub fn fine_register(source: &PointCloud, target: &PointCloud, init: &RigidTransform) -> Result<RegistrationResult> {
    icp(source, target, init, &IcpParams::fine())
}

/// Root mean square, over the transformed source points, of the distance
/// to the nearest target point.
pub fn evaluate_rmse(source: &PointCloud, target: &PointCloud, t: &RigidTransform) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = NeighborIndex::build(target)?;
    let moved: Vec<Point3> = source.points().iter().map(|q| t.apply_point(q)).collect();
    let nn = index.nearest_batch(&moved);
    let sq: f64 = moved
        .iter()
        .zip(&nn)
        .map(|(q, n)| dist2(q, &target.points()[n.index]))
        .sum();
    Ok((sq / moved.len() as f64).sqrt())
}

/// Coarse and fine stages of one registration, with the post-hoc RMSE of
/// the final transform over the full source cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub coarse: RegistrationResult,
    pub fine: RegistrationResult,
    pub rmse_mm: f64,
}

impl TwoStageResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Coarse registration on the keypoints, then fine registration of the
/// full clouds from the coarse transform.
pub fn register_two_stage(
    source: &PointCloud,
    target: &PointCloud,
    source_kp: &PointCloud,
    target_kp: &PointCloud,
) -> Result<TwoStageResult> {
    let coarse = coarse_register(source_kp, target_kp)?;
    let fine = fine_register(source, target, &coarse.transform)?;
    let rmse_mm = evaluate_rmse(source, target, &fine.transform)?;
    Ok(TwoStageResult { coarse, fine, rmse_mm })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{apply_transform, Vec3};

    /// A smooth, asymmetric height field sampled on a jittered grid.
    fn surface(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n * n)
            .map(|k| {
                let x = (k % n) as f64 * 2.0 - n as f64 + rng.random_range(-0.3..0.3);
                let y = (k / n) as f64 * 2.0 - n as f64 + rng.random_range(-0.3..0.3);
                let z = 12.0 * (-(x * x + (y - 5.0).powi(2)) / 60.0).exp() + 0.02 * x * x - 0.01 * y * y + 0.03 * x * y;
                Point3::new(x, y, z)
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn brute_rmse(source: &PointCloud, target: &PointCloud, t: &RigidTransform) -> f64 {
        let mut sq = 0.0;
        for q in source.points() {
            let m = t.apply_point(q);
            let best = target.points().iter().map(|p| dist2(&m, p)).fold(f64::INFINITY, f64::min);
            sq += best;
        }
        (sq / source.len() as f64).sqrt()
    }

    #[test]
    fn aligned_clouds_converge_immediately() {
        let c = surface(20, 1);
        let r = icp(&c, &c, &RigidTransform::identity(), &IcpParams::fine()).unwrap();
        assert_eq!(r.iterations_run, 1);
        assert!(r.converged);
        assert!(r.rmse < 1e-12, "rmse {}", r.rmse);
        assert!(r.transform.rotation_error(&RigidTransform::identity()) < 1e-12);
        assert!(r.transform.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_a_small_motion() {
        let c = surface(30, 2);
        let truth = RigidTransform::from_axis_angle(Vec3::new(0.3, -0.5, 1.0), 5f64.to_radians(), Vec3::new(0.6, -0.8, 0.5));
        let target = apply_transform(&truth, &c);
        let interior: Vec<usize> = (0..c.len()).filter(|&i| c.points()[i].x.abs() < 18.0 && c.points()[i].y.abs() < 18.0).collect();
        let src = c.select(&interior);
        let r = icp(&src, &target, &RigidTransform::identity(), &IcpParams::fine()).unwrap();
        let err = r.transform.inverse().compose(&truth).rotation_angle_deg();
        assert!(err < 0.1, "rotation error {err} deg after {} its, converged {}, rmse {:?}", r.iterations_run, r.converged, &r.per_iteration_rmse[..r.iterations_run.min(8)]);
        assert!(r.rmse < 1e-6, "rmse {}", r.rmse);
        assert!(r.transform.is_proper(1e-9));
    }

    #[test]
    fn result_includes_the_initial_transform() {
        let c = surface(20, 3);
        let truth = RigidTransform::from_axis_angle(Vec3::z(), 0.4, Vec3::new(50.0, 10.0, -5.0));
        let target = apply_transform(&truth, &c);
        let r = icp(&c, &target, &truth, &IcpParams::fine()).unwrap();
        assert!(r.transform.rotation_error(&truth) < 1e-9);
        assert!(r.transform.translation_error(&truth) < 1e-9);
    }

    #[test]
    fn starvation_and_small_inputs() {
        let c = surface(10, 4);
        let far = apply_transform(&RigidTransform::from_translation(Vec3::new(0.0, 0.0, 100.0)), &c);
        let p = IcpParams {
            max_correspondence_distance: 1.0,
            ..IcpParams::fine()
        };
        let e = icp(&c, &far, &RigidTransform::identity(), &p).unwrap_err();
        assert_eq!(e.to_string(), "correspondence starvation");
        let two = PointCloud::new(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]).unwrap();
        assert!(coarse_register(&two, &c).is_err());
        assert!(!coarse_register(&two, &c).unwrap_err().is_input_error());
        let bad = IcpParams {
            overlap_fraction: 0.0,
            ..IcpParams::fine()
        };
        assert!(icp(&c, &c, &RigidTransform::identity(), &bad).is_err());
    }

    #[test]
    fn coarse_on_identical_keypoints_is_identity() {
        let kp = PointCloud::new(vec![
            Point3::new(0.0, 0.0, 500.0),
            Point3::new(30.0, 5.0, 510.0),
            Point3::new(-30.0, 4.0, 508.0),
            Point3::new(0.0, -40.0, 480.0),
            Point3::new(2.0, 20.0, 495.0),
        ])
        .unwrap();
        let r = coarse_register(&kp, &kp).unwrap();
        assert!(r.transform.rotation_error(&RigidTransform::identity()) < 1e-9);
        assert!(r.transform.translation.norm() < 1e-9);
    }

    #[test]
    fn antipodal_start_fails_visibly() {
        let c = surface(30, 5);
        let flip = RigidTransform::from_axis_angle(Vec3::new(0.0, 1.0, 0.2), std::f64::consts::PI, Vec3::zeros());
        let target = apply_transform(&flip, &c);
        let r = fine_register(&c, &target, &RigidTransform::identity()).unwrap();
        let final_rmse = evaluate_rmse(&c, &target, &r.transform).unwrap();
        assert!(final_rmse > 1.0, "rmse {final_rmse}");
        assert!(r.transform.inverse().compose(&flip).rotation_angle_deg() > 10.0);
    }

    #[test]
    fn trimming_keeps_the_best_pairs() {
        let c = surface(20, 6);
        let mut pts = c.points().to_vec();
        // Gross outliers on a tenth of the target.
        for q in pts.iter_mut().step_by(10) {
            q.z += 200.0;
        }
        let target = PointCloud::new(pts).unwrap();
        let p = IcpParams {
            overlap_fraction: 0.8,
            ..IcpParams::fine()
        };
        let r = icp(&c, &target, &RigidTransform::identity(), &p).unwrap();
        assert!(r.transform.translation.norm() < 1e-9);
        assert!(r.rmse < 1e-9);
    }

    #[test]
    fn evaluate_rmse_examples() {
        let c = surface(10, 7);
        assert_eq!(evaluate_rmse(&c, &c, &RigidTransform::identity()).unwrap(), 0.0);
        let one = PointCloud::new(vec![Point3::new(3.0, 0.0, 0.0)]).unwrap();
        let t = PointCloud::new(vec![Point3::origin(), Point3::new(-5.0, 0.0, 0.0)]).unwrap();
        assert_eq!(evaluate_rmse(&one, &t, &RigidTransform::identity()).unwrap(), 3.0);
        let empty = PointCloud::new(vec![]).unwrap();
        assert!(matches!(evaluate_rmse(&empty, &t, &RigidTransform::identity()), Err(Error::EmptyCloud)));
    }

    #[test]
    fn result_json_round_trip() {
        let c = surface(12, 8);
        let target = apply_transform(&RigidTransform::from_axis_angle(Vec3::x(), 0.05, Vec3::new(1.0, 2.0, 3.0)), &c);
        let r = icp(&c, &target, &RigidTransform::identity(), &IcpParams::fine()).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        for key in ["rotation", "translation", "rmse", "iterations_run", "converged", "per_iteration_rmse"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["rotation"].as_array().unwrap().len(), 3);
        let back: RegistrationResult = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn two_stage_on_identical_clouds_has_zero_rmse() {
        let c = surface(14, 9);
        let kp = c.select(&[3, 50, 97, 120, 181]);
        let r = register_two_stage(&c, &c, &kp, &kp).unwrap();
        assert!(r.rmse_mm < 1e-9);
        assert!(r.fine.transform.rotation_error(&RigidTransform::identity()) < 1e-9);
        let two = kp.select(&[0, 1]);
        assert!(matches!(
            register_two_stage(&c, &c, &two, &kp),
            Err(Error::CloudTooSmall { .. })
        ));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<TwoStageResult>(&json).unwrap(), r);
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| Point3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-20.0..20.0)))
                .collect(),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rmse_is_non_increasing(seed in any::<u64>(), angle in 0.0..0.6f64, shift in -20.0..20.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = random_cloud(&mut rng, 200);
            let t = RigidTransform::from_axis_angle(Vec3::new(1.0, 2.0, 0.5), angle, Vec3::new(shift, 0.0, 5.0));
            let tgt = apply_transform(&t, &random_cloud(&mut rng, 150));
            let r = icp(&src, &tgt, &RigidTransform::identity(), &IcpParams::fine()).unwrap();
            for w in r.per_iteration_rmse.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{} then {}", w[0], w[1]);
            }
            prop_assert!(r.transform.is_proper(1e-9));
            prop_assert_eq!(r.rmse, *r.per_iteration_rmse.last().unwrap());
        }

        #[test]
        fn evaluate_rmse_matches_quadratic_scan(seed in any::<u64>(), n in 1usize..300, m in 1usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_cloud(&mut rng, n);
            let b = random_cloud(&mut rng, m);
            let t = RigidTransform::from_axis_angle(Vec3::new(rng.random(), rng.random(), 1.0), rng.random_range(0.0..3.0), Vec3::new(1.0, -2.0, 3.0));
            prop_assert_eq!(evaluate_rmse(&a, &b, &t).unwrap(), brute_rmse(&a, &b, &t));
        }
    }
}
