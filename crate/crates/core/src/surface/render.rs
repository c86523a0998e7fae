//! Normal-angle images: an orthographic rendering of a mesh in which each
//! pixel's brightness encodes how directly the surface faces the viewer.
//! A 2D landmark detector can run on the image, and every lit pixel keeps
//! the 3D surface point it came from so detections map back onto the mesh.

use std::fs;
use std::path::{Path, PathBuf};

use super::mesh::TriangleMesh;
use crate::depth::{nearest_pixel, LandmarkSet, LiftedLandmarks};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Vec3};
use crate::pgm;

pub const DEFAULT_RESOLUTION_MM_PER_PX: f64 = 1.0;

/// Landmarks on empty pixels search this far (in pixels) for a lit one.
pub const BACKPROJECT_SEARCH_RADIUS_PX: f64 = 3.0;

/// Rendering sub-samples per pixel along each image axis.
const SUBSAMPLES: usize = 2;

/// Gray level for a surface normal: 255 facing the viewer, falling linearly
/// with the angle to 0 at 90 degrees and beyond.
pub fn gray_for_normal(normal: &Vec3, view_axis: &Vec3) -> u8 {
    let cos = normal.dot(view_axis).clamp(-1.0, 1.0);
    let theta = cos.acos().to_degrees();
    if theta >= 90.0 {
        0
    } else {
        (255.0 * (1.0 - theta / 90.0)).round().clamp(0.0, 255.0) as u8
    }
}

/// Geometry of the image plane. `view_axis` points from the surface toward
/// the viewer; columns run along `u_axis`, rows along `v_axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePlane {
    pub view_axis: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub u_min: f64,
    pub v_min: f64,
    pub resolution: f64,
}

impl ImagePlane {
    /// In-plane basis for a view axis: rows follow world +y where possible
    /// (+z when looking along y), columns complete a right-handed frame.
    pub fn basis(view_axis: &Vec3) -> (Vec3, Vec3) {
        let hint = if view_axis.y.abs() > 0.9 { Vec3::z() } else { Vec3::y() };
        let v = (hint - view_axis * hint.dot(view_axis)).normalize();
        let u = view_axis.cross(&v);
        (u, v)
    }

    /// Continuous image coordinates of a point, pixel centers at integers.
    pub fn project(&self, p: &Point3) -> (f64, f64) {
        (
            (p.coords.dot(&self.u_axis) - self.u_min) / self.resolution - 0.5,
            (p.coords.dot(&self.v_axis) - self.v_min) / self.resolution - 0.5,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalAngleImage {
    pub width: usize,
    pub height: usize,
    pub gray: Vec<u8>,
    pub lookup: Vec<Option<Point3>>,
    /// Present for rendered images; not persisted to disk.
    pub plane: Option<ImagePlane>,
}

impl NormalAngleImage {
    pub fn lookup_at(&self, col: usize, row: usize) -> Option<Point3> {
        self.lookup[row * self.width + col]
    }

    /// Writes `<name>.pgm` and the `<name>.lookup.bin` sidecar (three
    /// little-endian float32 per pixel, NaN for empty pixels).
    pub fn save(&self, pgm_path: impl AsRef<Path>) -> Result<()> {
        let pgm_path = pgm_path.as_ref();
        pgm::write_pgm8(pgm_path, self.width, self.height, &self.gray)?;
        let mut bytes = Vec::with_capacity(12 * self.lookup.len());
        for p in &self.lookup {
            let xyz = match p {
                Some(p) => [p.x as f32, p.y as f32, p.z as f32],
                None => [f32::NAN; 3],
            };
            for v in xyz {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(lookup_path(pgm_path), bytes)?;
        Ok(())
    }

    pub fn load(pgm_path: impl AsRef<Path>) -> Result<Self> {
        let pgm_path = pgm_path.as_ref();
        let img = pgm::read_pgm(pgm_path)?;
        if img.maxval > 255 {
            return Err(Error::Parse("normal-angle image must be 8-bit".into()));
        }
        let bytes = fs::read(lookup_path(pgm_path))?;
        let n = img.width * img.height;
        if bytes.len() != 12 * n {
            return Err(Error::Parse(format!(
                "lookup sidecar has {} bytes, expected {}",
                bytes.len(),
                12 * n
            )));
        }
        let lookup = bytes
            .chunks_exact(12)
            .map(|c| {
                let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
                let p = Point3::new(f(0), f(4), f(8));
                if p.coords.iter().all(|v| v.is_finite()) {
                    Some(p)
                } else {
                    None
                }
            })
            .collect();
        Ok(Self {
            width: img.width,
            height: img.height,
            gray: img.data.into_iter().map(|v| v as u8).collect(),
            lookup,
            plane: None,
        })
    }
}

/// `face.pgm` -> `face.lookup.bin`.
pub fn lookup_path(pgm_path: &Path) -> PathBuf {
    pgm_path.with_extension("lookup.bin")
}

/// Renders `mesh` orthographically along `view_axis`.
///
/// The image covers the projected bounding box at `resolution_mm_per_px`.
/// Triangles are rasterized at 2x2 samples per pixel; per pixel the sample
/// closest to the viewer wins, earlier samples (triangle order, then
/// sample order) winning exact ties.
pub fn render_normal_angle_image(
    mesh: &TriangleMesh,
    view_axis: &Vec3,
    resolution_mm_per_px: f64,
) -> Result<NormalAngleImage> {
    if mesh.is_empty() {
        return Err(Error::InvalidInput("mesh has no triangles".into()));
    }
    if (view_axis.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput("view axis must be a unit vector".into()));
    }
    if !(resolution_mm_per_px > 0.0 && resolution_mm_per_px.is_finite()) {
        return Err(Error::InvalidInput(format!("bad resolution {resolution_mm_per_px}")));
    }
    let (u_axis, v_axis) = ImagePlane::basis(view_axis);
    let verts = mesh.vertices();
    let normals = mesh.normals();

    let used: Vec<usize> = {
        let mut seen = vec![false; verts.len()];
        for t in mesh.triangles() {
            for &i in t {
                seen[i] = true;
            }
        }
        (0..verts.len()).filter(|&i| seen[i]).collect()
    };
    let (mut u_min, mut u_max, mut v_min, mut v_max) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &i in &used {
        let (a, b) = (verts[i].coords.dot(&u_axis), verts[i].coords.dot(&v_axis));
        u_min = u_min.min(a);
        u_max = u_max.max(a);
        v_min = v_min.min(b);
        v_max = v_max.max(b);
    }
    if !(u_max > u_min && v_max > v_min) {
        return Err(Error::ZeroArea);
    }
    let res = resolution_mm_per_px;
    let width = ((u_max - u_min) / res).floor() as usize + 1;
    let height = ((v_max - v_min) / res).floor() as usize + 1;
    let plane = ImagePlane {
        view_axis: *view_axis,
        u_axis,
        v_axis,
        u_min,
        v_min,
        resolution: res,
    };

    // Per pixel: (depth toward viewer, point, normal).
    let mut best: Vec<Option<(f64, Point3, Vec3)>> = vec![None; width * height];
    let sub = SUBSAMPLES as f64;
    for t in mesh.triangles() {
        let p = [verts[t[0]], verts[t[1]], verts[t[2]]];
        // Continuous pixel-edge coordinates: pixel `c` spans [c, c + 1).
        let xy: [(f64, f64); 3] = p.map(|q| {
            (
                (q.coords.dot(&u_axis) - u_min) / res,
                (q.coords.dot(&v_axis) - v_min) / res,
            )
        });
        let area = (xy[1].0 - xy[0].0) * (xy[2].1 - xy[0].1) - (xy[2].0 - xy[0].0) * (xy[1].1 - xy[0].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let xs = xy.map(|v| v.0);
        let ys = xy.map(|v| v.1);
        let lo_x = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_x = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo_y = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_y = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Sub-sample s sits at (s + 0.5) / SUBSAMPLES.
        let s_range = |lo: f64, hi: f64, limit: usize| {
            let first = (lo * sub - 0.5).ceil().max(0.0) as usize;
            let last = ((hi * sub - 0.5).floor().max(-1.0) + 1.0) as usize;
            first..last.min(limit * SUBSAMPLES)
        };
        let eps = -1e-9;
        for sy in s_range(lo_y, hi_y, height) {
            let y = (sy as f64 + 0.5) / sub;
            for sx in s_range(lo_x, hi_x, width) {
                let x = (sx as f64 + 0.5) / sub;
                let w1 = ((x - xy[0].0) * (xy[2].1 - xy[0].1) - (xy[2].0 - xy[0].0) * (y - xy[0].1)) / area;
                let w2 = ((xy[1].0 - xy[0].0) * (y - xy[0].1) - (x - xy[0].0) * (xy[1].1 - xy[0].1)) / area;
                let w0 = 1.0 - w1 - w2;
                if w0 < eps || w1 < eps || w2 < eps {
                    continue;
                }
                let point = Point3::from(p[0].coords * w0 + p[1].coords * w1 + p[2].coords * w2);
                let depth = point.coords.dot(view_axis);
                let pixel = (sy / SUBSAMPLES) * width + sx / SUBSAMPLES;
                if best[pixel].is_some_and(|(d, _, _)| d >= depth) {
                    continue;
                }
                let mut n = normals[t[0]] * w0 + normals[t[1]] * w1 + normals[t[2]] * w2;
                if n.norm() < 1e-12 {
                    n = (p[1] - p[0]).cross(&(p[2] - p[0]));
                }
                best[pixel] = Some((depth, point, n.normalize()));
            }
        }
    }
    if best.iter().all(Option::is_none) {
        return Err(Error::ZeroArea);
    }
    let gray = best
        .iter()
        .map(|b| b.map_or(0, |(_, _, n)| gray_for_normal(&n, view_axis)))
        .collect();
    let lookup = best.iter().map(|b| b.map(|(_, p, _)| p)).collect();
    Ok(NormalAngleImage {
        width,
        height,
        gray,
        lookup,
        plane: Some(plane),
    })
}

/// Maps each landmark to the surface point stored under its pixel. A
/// landmark on an empty pixel takes the closest lit pixel center within
/// three pixels (ties to the lower row, then column) or is dropped.
pub fn backproject_landmarks(img: &NormalAngleImage, lm: &LandmarkSet) -> Result<LiftedLandmarks> {
    if lm.image_width() != img.width || lm.image_height() != img.height {
        return Err(Error::InvalidInput(format!(
            "landmarks are for a {}x{} image, rendered image is {}x{}",
            lm.image_width(),
            lm.image_height(),
            img.width,
            img.height
        )));
    }
    let r = BACKPROJECT_SEARCH_RADIUS_PX;
    let reach = r.ceil() as i64 + 1;
    let mut pts = Vec::new();
    let mut indices = Vec::new();
    for l in lm.landmarks() {
        let col = nearest_pixel(l.u, img.width);
        let row = nearest_pixel(l.v, img.height);
        let hit = img.lookup_at(col, row).or_else(|| {
            let mut found: Option<(f64, Point3)> = None;
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let (rr, cc) = (row as i64 + dr, col as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= img.height as i64 || cc >= img.width as i64 {
                        continue;
                    }
                    let Some(p) = img.lookup_at(cc as usize, rr as usize) else {
                        continue;
                    };
                    let d = ((cc as f64 - l.u).powi(2) + (rr as f64 - l.v).powi(2)).sqrt();
                    if d <= r && found.is_none_or(|(fd, _)| d < fd) {
                        found = Some((d, p));
                    }
                }
            }
            found.map(|(_, p)| p)
        });
        if let Some(p) = hit {
            pts.push(p);
            indices.push(l.index);
        }
    }
    if pts.is_empty() {
        return Err(Error::NoLandmarks("image back-projection"));
    }
    Ok(LiftedLandmarks {
        cloud: PointCloud::new(pts)?,
        indices,
    })
}
