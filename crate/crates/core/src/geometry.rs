//! Points, clouds and rigid transforms.
//!
//! All coordinates are millimeters.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;

/// Tolerance used when checking that a normal has unit length.
pub const UNIT_NORMAL_TOLERANCE: f64 = 1e-6;

/// An ordered set of 3D points with optional per-point unit normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !is_finite(p)) {
            return Err(Error::InvalidInput(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self {
            points,
            normals: None,
        })
    }

    /// Builds a cloud with normals; normals must be unit length and match the
    /// point count.
    pub fn with_normals(points: Vec<Point3>, normals: Vec<Vec3>) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        cloud.set_normals(normals)?;
        Ok(cloud)
    }

    pub fn set_normals(&mut self, normals: Vec<Vec3>) -> Result<()> {
        if normals.len() != self.points.len() {
            return Err(Error::InvalidInput(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            if !(n.norm() - 1.0).abs().le(&UNIT_NORMAL_TOLERANCE) {
                return Err(Error::InvalidInput(format!(
                    "normal {i} is not unit length (|n| = {})",
                    n.norm()
                )));
            }
        }
        self.normals = Some(normals);
        Ok(())
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn without_normals(&self) -> Self {
        Self {
            points: self.points.clone(),
            normals: None,
        }
    }

    /// Keeps the points (and normals) at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Option<Point3> {
        centroid(&self.points)
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    pub(crate) fn from_parts_unchecked(points: Vec<Point3>, normals: Option<Vec<Vec3>>) -> Self {
        Self { points, normals }
    }
}

fn is_finite(p: &Point3) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.z.is_finite()
}

pub fn centroid(points: &[Point3]) -> Option<Point3> {
    if points.is_empty() {
        return None;
    }
    let sum = points.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords);
    Some(Point3::from(sum / points.len() as f64))
}

/// A proper rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle_rad` about `axis` (need not be normalized), then
    /// translation by `t`.
    pub fn from_axis_angle(axis: Vec3, angle_rad: f64, t: Vec3) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_rad);
        Self {
            rotation: *rotation.matrix(),
            translation: t,
        }
    }

    /// Validates a rotation matrix against the orthonormality and
    /// determinant tolerance (1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        if !t.is_proper(1e-9) {
            return Err(Error::InvalidInput(
                "rotation is not a proper orthonormal matrix".into(),
            ));
        }
        Ok(t)
    }

    /// Checks `RᵀR = I` elementwise and `det R = 1` within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        let ortho = (rtr - Matrix3::identity()).iter().all(|e| e.abs() <= tol);
        ortho
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `a.compose(&b)` applies `b` first, then `a`.
    pub fn compose(&self, b: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * b.rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in degrees, in [0, 180].
    pub fn rotation_angle_deg(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    /// Frobenius norm of the rotation difference.
    pub fn rotation_error(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation).norm()
    }

    pub fn translation_error(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Rotation matrix rows, for serialization.
    pub fn rotation_rows(&self) -> [[f64; 3]; 3] {
        let r = &self.rotation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        ]
    }
}

#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TransformRepr {
            rotation: self.rotation_rows(),
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = TransformRepr::deserialize(d)?;
        let r = repr.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        RigidTransform::new(rotation, Vec3::from(repr.translation))
            .map_err(serde::de::Error::custom)
    }
}

/// Maps every point `p -> R p + t` and every normal `n -> R n`.
pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    let points = cloud.points.iter().map(|p| t.apply_point(p)).collect();
    let normals = cloud
        .normals
        .as_ref()
        .map(|ns| ns.iter().map(|n| renormalize(t.apply_vector(n))).collect());
    PointCloud { points, normals }
}

// Rotating a unit vector can drift its norm by an ulp or two.
fn renormalize(n: Vec3) -> Vec3 {
    let len = n.norm();
    if len > 0.0 {
        n / len
    } else {
        n
    }
}

/// Least-squares rigid transform taking `source[i]` onto `target[i]`.
///
/// Kabsch solution through the SVD of the cross-covariance, with the
/// smallest singular direction negated whenever the unconstrained optimum
/// would be a reflection.
pub fn estimate_rigid(source: &[Point3], target: &[Point3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} source vs {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let cs = centroid(source).expect("non-empty");
    let ct = centroid(target).expect("non-empty");

    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for (s, d) in source.iter().zip(target) {
        let a = s - cs;
        let b = d - ct;
        cross += a * b.transpose();
        scatter += a * a.transpose();
    }

    // Collinear (or coincident) sources leave the rotation about their line
    // undetermined.
    let spread = scatter.symmetric_eigenvalues();
    let mut ev = [spread[0], spread[1], spread[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate);
    }

    let svd = cross.svd(true, true);
    let u = svd.u.ok_or(Error::Degenerate)?;
    let v_t = svd.v_t.ok_or(Error::Degenerate)?;
    let sv = svd.singular_values;

    // nalgebra does not guarantee sorted singular values.
    let smallest = (0..3)
        .min_by(|&a, &b| sv[a].total_cmp(&sv[b]))
        .expect("three singular values");
    let mut v = v_t.transpose();
    if (v * u.transpose()).determinant() < 0.0 {
        let mut col = v.column_mut(smallest);
        col.neg_mut();
    }
    let rotation = v * u.transpose();
    let translation = ct.coords - rotation * cs.coords;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}
