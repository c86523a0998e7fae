//! Baseline 3D keypoint detectors: ISS, Harris-3D and a curvature-driven
//! SIFT-3D. Each selects a subset of the input points; output order follows
//! point index, so results do not depend on the thread count.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Vec3};
use crate::index::{median_spacing, NeighborIndex};
use crate::surface::normals::sorted_eigen;

/// ISS requires `lambda3 > ISS_FLATNESS_FLOOR * lambda1`; exactly planar
/// neighborhoods carry only rounding noise in `lambda3`.
pub const ISS_FLATNESS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IssParams {
    pub salient_radius: f64,
    pub nonmax_radius: f64,
    pub gamma_21: f64,
    pub gamma_32: f64,
    pub min_neighbors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarrisParams {
    pub radius: f64,
    pub response_threshold: f64,
    pub k_constant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiftParams {
    pub min_scale: f64,
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub contrast_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointParams {
    pub iss: IssParams,
    pub harris: HarrisParams,
    pub sift: SiftParams,
}

impl KeypointParams {
    /// Defaults scaled to a cloud whose point spacing is `spacing` mm.
    pub fn for_spacing(spacing: f64) -> Self {
        Self {
            iss: IssParams {
                salient_radius: 6.0 * spacing,
                nonmax_radius: 4.0 * spacing,
                gamma_21: 0.975,
                gamma_32: 0.975,
                min_neighbors: 5,
            },
            harris: HarrisParams {
                radius: 6.0 * spacing,
                response_threshold: 1e-6,
                k_constant: 0.04,
            },
            sift: SiftParams {
                min_scale: 2.0 * spacing,
                octaves: 4,
                scales_per_octave: 4,
                contrast_threshold: 2e-3,
            },
        }
    }

    /// Defaults for `cloud`, spacing taken as its median nearest-neighbor
    /// distance.
    pub fn for_cloud(cloud: &PointCloud) -> Result<Self> {
        let spacing = median_spacing(&NeighborIndex::build(cloud)?);
        if !(spacing > 0.0) {
            return Err(Error::Degenerate);
        }
        Ok(Self::for_spacing(spacing))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidInput(format!("keypoint parameter {what} out of range")));
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let ratio = |v: f64| v > 0.0 && v < 1.0;
        let i = &self.iss;
        if !pos(i.salient_radius) {
            return bad("iss.salient_radius");
        }
        if !pos(i.nonmax_radius) {
            return bad("iss.nonmax_radius");
        }
        if !ratio(i.gamma_21) {
            return bad("iss.gamma_21");
        }
        if !ratio(i.gamma_32) {
            return bad("iss.gamma_32");
        }
        if !pos(self.harris.radius) {
            return bad("harris.radius");
        }
        if !self.harris.response_threshold.is_finite() {
            return bad("harris.response_threshold");
        }
        if !self.harris.k_constant.is_finite() {
            return bad("harris.k_constant");
        }
        let s = &self.sift;
        if !pos(s.min_scale) {
            return bad("sift.min_scale");
        }
        if s.octaves < 1 {
            return bad("sift.octaves");
        }
        if s.scales_per_octave < 1 {
            return bad("sift.scales_per_octave");
        }
        if !(s.contrast_threshold >= 0.0 && s.contrast_threshold.is_finite()) {
            return bad("sift.contrast_threshold");
        }
        Ok(())
    }
}

/// A selected point: its index in the input cloud, detector response and
/// the scale (mm) it was selected at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub index: usize,
    pub response: f64,
    pub scale: f64,
}

/// The detected points, with normals when the input carries them.
pub fn detections_to_cloud(cloud: &PointCloud, dets: &[Detection]) -> PointCloud {
    let idx: Vec<usize> = dets.iter().map(|d| d.index).collect();
    cloud.select(&idx)
}

/// Keeps `i` when `score[i]` beats every other candidate within `radius`;
/// equal scores go to the lower index.
fn non_max_suppress(index: &NeighborIndex, candidate: &[bool], score: &[f64], radius: f64) -> Vec<usize> {
    let pts = index.points();
    (0..pts.len())
        .into_par_iter()
        .filter(|&i| {
            candidate[i]
                && index.within_radius(&pts[i], radius).iter().all(|n| {
                    let j = n.index;
                    j == i || !candidate[j] || score[i] > score[j] || (score[i] == score[j] && i < j)
                })
        })
        .collect()
}

/// Per-point ISS eigenvalues (descending); `None` where the neighborhood has
/// fewer than `min_neighbors` other points.
pub fn iss_eigenvalues(cloud: &PointCloud, p: &IssParams) -> Result<Vec<Option<[f64; 3]>>> {
    let index = NeighborIndex::build(cloud)?;
    Ok(iss_eigenvalues_with(&index, p))
}

fn iss_eigenvalues_with(index: &NeighborIndex, p: &IssParams) -> Vec<Option<[f64; 3]>> {
    let pts = index.points();
    let neighborhoods: Vec<Vec<usize>> = pts
        .par_iter()
        .map(|q| index.within_radius(q, p.salient_radius).into_iter().map(|n| n.index).collect())
        .collect();
    // Weight each point by the inverse of its local density.
    let weight: Vec<f64> = neighborhoods.iter().map(|n| 1.0 / n.len() as f64).collect();
    neighborhoods
        .par_iter()
        .enumerate()
        .map(|(i, nb)| {
            if nb.len() - 1 < p.min_neighbors {
                return None;
            }
            let mut m = Matrix3::zeros();
            let mut wsum = 0.0;
            for &j in nb {
                if j == i {
                    continue;
                }
                let d = pts[j] - pts[i];
                m += weight[j] * d * d.transpose();
                wsum += weight[j];
            }
            let (vals, _) = sorted_eigen(&(m / wsum));
            Some(vals)
        })
        .collect()
}

/// Whether eigenvalues `l` pass the ISS saliency ratios.
pub fn iss_salient(l: &[f64; 3], p: &IssParams) -> bool {
    l[0] > 0.0
        && l[2] > ISS_FLATNESS_FLOOR * l[0]
        && l[1] / l[0] < p.gamma_21
        && l[2] / l[1] < p.gamma_32
}

/// Intrinsic Shape Signatures keypoints.
pub fn iss_detect(cloud: &PointCloud, p: &IssParams) -> Result<Vec<Detection>> {
    if cloud.len() <= p.min_neighbors {
        return Err(Error::CloudTooSmall {
            required: p.min_neighbors + 1,
            actual: cloud.len(),
        });
    }
    let index = NeighborIndex::build(cloud)?;
    let eig = iss_eigenvalues_with(&index, p);
    let salient: Vec<bool> = eig.iter().map(|e| e.is_some_and(|l| iss_salient(&l, p))).collect();
    let l3: Vec<f64> = eig.iter().map(|e| e.map_or(0.0, |l| l[2])).collect();
    Ok(non_max_suppress(&index, &salient, &l3, p.nonmax_radius)
        .into_iter()
        .map(|i| Detection {
            index: i,
            response: l3[i],
            scale: p.salient_radius,
        })
        .collect())
}

pub fn iss_keypoints(cloud: &PointCloud, params: &KeypointParams) -> Result<PointCloud> {
    Ok(detections_to_cloud(cloud, &iss_detect(cloud, &params.iss)?))
}

fn require_normals(cloud: &PointCloud, min_len: usize) -> Result<&[Vec3]> {
    let normals = cloud.normals().ok_or(Error::MissingNormals)?;
    if cloud.len() < min_len {
        return Err(Error::CloudTooSmall {
            required: min_len,
            actual: cloud.len(),
        });
    }
    Ok(normals)
}

/// Harris-3D response at every point: `M` is the mean of `n nᵀ` over the
/// normals within `radius` (the point included) and the response is
/// `det(M) - k (trace(M)^2 - 1)`. Unit normals give `trace(M) = 1`, so a
/// plane scores 0 and the response reduces to `det(M)`.
pub fn harris_responses(cloud: &PointCloud, p: &HarrisParams) -> Result<Vec<f64>> {
    let normals = require_normals(cloud, 11)?;
    let index = NeighborIndex::build(cloud)?;
    Ok(harris_responses_with(&index, normals, p))
}

fn harris_responses_with(index: &NeighborIndex, normals: &[Vec3], p: &HarrisParams) -> Vec<f64> {
    index
        .points()
        .par_iter()
        .map(|q| {
            let nb = index.within_radius(q, p.radius);
            let mut m = Matrix3::zeros();
            for n in &nb {
                let v = normals[n.index];
                m += v * v.transpose();
            }
            m /= nb.len() as f64;
            let tr = m.trace();
            m.determinant() - p.k_constant * (tr * tr - 1.0)
        })
        .collect()
}

pub fn harris3d_detect(cloud: &PointCloud, p: &HarrisParams) -> Result<Vec<Detection>> {
    let normals = require_normals(cloud, 11)?;
    let index = NeighborIndex::build(cloud)?;
    let r = harris_responses_with(&index, normals, p);
    let cand: Vec<bool> = r.iter().map(|&v| v > p.response_threshold).collect();
    Ok(non_max_suppress(&index, &cand, &r, p.radius)
        .into_iter()
        .map(|i| Detection {
            index: i,
            response: r[i],
            scale: p.radius,
        })
        .collect())
}

pub fn harris3d_keypoints(cloud: &PointCloud, params: &KeypointParams) -> Result<PointCloud> {
    Ok(detections_to_cloud(cloud, &harris3d_detect(cloud, &params.harris)?))
}

/// Curvature proxy `1 - |n . n̄|`, with `n̄` the plain (not renormalized)
/// mean of the normals within `radius`. Zero on a plane, roughly
/// `κ² r² / 4` on a surface of curvature `κ`.
pub fn curvature_proxy(index: &NeighborIndex, normals: &[Vec3], radius: f64) -> Vec<f64> {
    index
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let nb = index.within_radius(q, radius);
            let mean: Vec3 = nb.iter().map(|n| normals[n.index]).sum::<Vec3>() / nb.len() as f64;
            (1.0 - normals[i].dot(&mean).abs()).max(0.0)
        })
        .collect()
}

/// The scale-space levels `min_scale * 2^(k / scales_per_octave)`,
/// `k = 0..=octaves * scales_per_octave`.
pub fn sift_scales(p: &SiftParams) -> Vec<f64> {
    let n = p.octaves * p.scales_per_octave;
    (0..=n)
        .map(|k| p.min_scale * 2f64.powf(k as f64 / p.scales_per_octave as f64))
        .collect()
}

/// Sample-spacing factor for the per-octave smoothing support.
const SUPPORT_SPACING: f64 = 0.47;

/// Smoothing support for one octave: a Poisson-disk subsample of the cloud
/// (greedy in index order, minimum spacing `rho`), each sample carrying the
/// centroid, size and summed field of the points closest to it. Built from
/// distances only, so it moves rigidly with the cloud.
struct Support {
    index: NeighborIndex,
    count: Vec<f64>,
    field_sum: Vec<f64>,
}

impl Support {
    fn build(index: &NeighborIndex, field: &[f64], rho: f64) -> Result<Self> {
        let pts = index.points();
        let mut taken = vec![false; pts.len()];
        let mut seeds = Vec::new();
        for i in 0..pts.len() {
            let blocked = index
                .within_radius(&pts[i], rho)
                .iter()
                .any(|n| n.distance < rho && taken[n.index]);
            if !blocked {
                taken[i] = true;
                seeds.push(pts[i]);
            }
        }
        let seed_index = NeighborIndex::from_points(&seeds)?;
        let owner = seed_index.nearest_batch(pts);
        let mut sum = vec![Vec3::zeros(); seeds.len()];
        let mut count = vec![0.0; seeds.len()];
        let mut field_sum = vec![0.0; seeds.len()];
        for (i, o) in owner.iter().enumerate() {
            sum[o.index] += pts[i].coords;
            count[o.index] += 1.0;
            field_sum[o.index] += field[i];
        }
        let centroids: Vec<Point3> = sum.iter().zip(&count).map(|(s, &c)| Point3::from(s / c)).collect();
        Ok(Self {
            index: NeighborIndex::from_points(&centroids)?,
            count,
            field_sum,
        })
    }

    /// Gaussian-weighted field average around every point, truncated at 3σ.
    fn smooth(&self, points: &[Point3], sigma: f64) -> Vec<f64> {
        let inv = 1.0 / (2.0 * sigma * sigma);
        points
            .par_iter()
            .map(|q| {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for n in self.index.within_radius(q, 3.0 * sigma) {
                    let w = (-n.distance * n.distance * inv).exp();
                    acc += w * self.field_sum[n.index];
                    wsum += w * self.count[n.index];
                }
                if wsum > 0.0 {
                    acc / wsum
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Difference-of-Gaussians stack `dog[k] = L[k+1] - L[k]`, where `L[k]` is
/// the square root of the curvature proxy (radius `min_scale`) smoothed at
/// `sift_scales(p)[k]`.
pub fn sift_dog(index: &NeighborIndex, normals: &[Vec3], p: &SiftParams) -> Result<Vec<Vec<f64>>> {
    let field: Vec<f64> = curvature_proxy(index, normals, p.min_scale).into_iter().map(f64::sqrt).collect();
    let scales = sift_scales(p);
    let mut levels = Vec::with_capacity(scales.len());
    let mut support: Option<(usize, Support)> = None;
    for (k, &s) in scales.iter().enumerate() {
        let octave = (k / p.scales_per_octave).min(p.octaves - 1);
        if support.as_ref().is_none_or(|(o, _)| *o != octave) {
            let base = scales[octave * p.scales_per_octave];
            support = Some((octave, Support::build(index, &field, SUPPORT_SPACING * base)?));
        }
        let (_, sup) = support.as_ref().expect("support built above");
        levels.push(sup.smooth(index.points(), s));
    }
    Ok(levels
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect())
        .collect())
}

/// SIFT-3D keypoints on the curvature proxy. A point at DoG level `k` is a
/// candidate when its value strictly exceeds (or undercuts) every value at
/// levels `k-1..=k+1` within `scale[k] / 2` and its magnitude passes
/// `contrast_threshold`. Each point keeps its strongest level; candidates
/// then suppress weaker ones within their own scale.
pub fn sift3d_detect(cloud: &PointCloud, p: &SiftParams) -> Result<Vec<Detection>> {
    let normals = require_normals(cloud, 51)?;
    let index = NeighborIndex::build(cloud)?;
    let scales = sift_scales(p);
    // DoG level k sits between scales k and k+1.
    let mid = 2f64.powf(0.5 / p.scales_per_octave as f64);
    let dog = sift_dog(&index, normals, p)?;
    let pts = index.points();

    let best: Vec<Option<(f64, f64)>> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut best: Option<(f64, f64)> = None;
            for k in 1..dog.len().saturating_sub(1) {
                let v = dog[k][i];
                if v.abs() <= p.contrast_threshold || best.is_some_and(|(r, _)| v.abs() <= r) {
                    continue;
                }
                let nb = index.within_radius(&pts[i], 0.5 * scales[k]);
                let (mut is_max, mut is_min) = (true, true);
                'outer: for (level, values) in dog[k - 1..=k + 1].iter().enumerate() {
                    for n in &nb {
                        if level == 1 && n.index == i {
                            continue;
                        }
                        let w = values[n.index];
                        is_max &= v > w;
                        is_min &= v < w;
                        if !is_max && !is_min {
                            break 'outer;
                        }
                    }
                }
                if is_max || is_min {
                    best = Some((v.abs(), scales[k] * mid));
                }
            }
            best
        })
        .collect();

    let kept: Vec<usize> = (0..pts.len())
        .into_par_iter()
        .filter(|&i| {
            let Some((r, s)) = best[i] else { return false };
            index.within_radius(&pts[i], s).iter().all(|n| {
                let j = n.index;
                match best[j] {
                    Some((rj, _)) if j != i => r > rj || (r == rj && i < j),
                    _ => true,
                }
            })
        })
        .collect();
    Ok(kept
        .into_iter()
        .map(|i| {
            let (response, scale) = best[i].expect("kept points are candidates");
            Detection { index: i, response, scale }
        })
        .collect())
}

pub fn sift3d_keypoints(cloud: &PointCloud, params: &KeypointParams) -> Result<PointCloud> {
    Ok(detections_to_cloud(cloud, &sift3d_detect(cloud, &params.sift)?))
}
