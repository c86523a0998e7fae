use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Vec3};
use crate::index::NeighborIndex;

pub const DEFAULT_NORMAL_NEIGHBORS: usize = 20;

/// Covariance of `points` about their centroid.
pub(crate) fn covariance(points: impl Iterator<Item = Point3> + Clone) -> Matrix3<f64> {
    let mut n = 0usize;
    let mut sum = Vec3::zeros();
    for p in points.clone() {
        sum += p.coords;
        n += 1;
    }
    let mean = sum / n.max(1) as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov / n.max(1) as f64
}

/// Eigen-decomposition with eigenvalues sorted descending; the matching
/// eigenvectors are the columns of the returned matrix.
pub(crate) fn sorted_eigen(m: &Matrix3<f64>) -> ([f64; 3], Matrix3<f64>) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let vecs = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (vals, vecs)
}

/// Per-point normals from the smallest-eigenvalue direction of the k-nearest
/// neighborhood covariance (the point itself included), flipped to face
/// `viewpoint`.
pub fn estimate_normals(cloud: &PointCloud, k: usize, viewpoint: &Point3) -> Result<PointCloud> {
    if k < 3 || cloud.len() <= k {
        return Err(Error::CloudTooSmall {
            required: k.max(3),
            actual: cloud.len(),
        });
    }
    let index = NeighborIndex::build(cloud)?;
    let pts = cloud.points();
    let normals: Vec<Vec3> = pts
        .par_iter()
        .map(|p| {
            let nn = index.k_nearest(p, k);
            let cov = covariance(nn.iter().map(|n| pts[n.index]));
            let (_, vecs) = sorted_eigen(&cov);
            let mut n: Vec3 = vecs.column(2).into_owned();
            n /= n.norm();
            if n.dot(&(viewpoint - p)) < 0.0 {
                n = -n;
            }
            n
        })
        .collect();
    PointCloud::with_normals(pts.to_vec(), normals)
}
