use std::collections::HashMap;

use super::mesh::{face_weighted_normals, TriangleMesh};
use super::tables::{CORNERS, EDGE_CORNERS, TRIANGLES};
use super::volume::ScalarVolume;
use crate::error::{Error, Result};
use crate::geometry::{Point3, Vec3};

/// Extracts the `iso` level set as a triangle mesh.
///
/// Cells are visited in voxel-index order (x fastest) and each crossing
/// grid edge yields one shared vertex, placed by linear interpolation.
/// Vertex normals follow the negated, interpolated central-difference
/// gradient, so they point toward decreasing values. Triangles are wound
/// counter-clockwise around that normal.
pub fn marching_cubes(vol: &ScalarVolume, iso: f64) -> Result<TriangleMesh> {
    if !iso.is_finite() {
        return Err(Error::InvalidInput(format!("iso-value {iso} is not finite")));
    }
    let [nx, ny, nz] = vol.dims();
    let mut edge_vertex: HashMap<(usize, u8), usize> = HashMap::new();
    let mut vertices: Vec<Point3> = Vec::new();
    let mut gradients: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();

    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let mut case = 0usize;
                let mut corner_vals = [0.0; 8];
                for (c, off) in CORNERS.iter().enumerate() {
                    let v = vol.value(i + off[0], j + off[1], k + off[2]);
                    corner_vals[c] = v;
                    if v < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLES[case];
                for tri in row.chunks_exact(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0usize; 3];
                    for (slot, &edge) in ids.iter_mut().zip(tri) {
                        let [c0, c1] = EDGE_CORNERS[edge as usize];
                        let (a, b) = (CORNERS[c0], CORNERS[c1]);
                        // Key the edge by its lower node and axis.
                        let (lo, hi, lo_c, hi_c) = if a <= b { (a, b, c0, c1) } else { (b, a, c1, c0) };
                        let axis = (0..3).find(|&x| lo[x] != hi[x]).expect("edge spans one axis") as u8;
                        let node_lo = [i + lo[0], j + lo[1], k + lo[2]];
                        let key = (vol.linear_index(node_lo[0], node_lo[1], node_lo[2]), axis);
                        *slot = *edge_vertex.entry(key).or_insert_with(|| {
                            let node_hi = [i + hi[0], j + hi[1], k + hi[2]];
                            let (v0, v1) = (corner_vals[lo_c], corner_vals[hi_c]);
                            let t = ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0);
                            let p0 = vol.position(node_lo[0], node_lo[1], node_lo[2]);
                            let p1 = vol.position(node_hi[0], node_hi[1], node_hi[2]);
                            let g0 = vol.gradient(node_lo[0], node_lo[1], node_lo[2]);
                            let g1 = vol.gradient(node_hi[0], node_hi[1], node_hi[2]);
                            vertices.push(p0 + (p1 - p0) * t);
                            gradients.push(g0 + (g1 - g0) * t);
                            vertices.len() - 1
                        });
                    }
                    triangles.push(ids);
                }
            }
        }
    }

    if triangles.is_empty() {
        return Err(Error::EmptyIsosurface);
    }

    let fallback = face_weighted_normals(&vertices, &triangles);
    let normals: Vec<Vec3> = gradients
        .iter()
        .zip(&fallback)
        .map(|(g, f)| {
            let len = g.norm();
            if len > 1e-12 {
                -g / len
            } else {
                *f
            }
        })
        .collect();

    for t in &mut triangles {
        let face = (vertices[t[1]] - vertices[t[0]]).cross(&(vertices[t[2]] - vertices[t[0]]));
        let avg = normals[t[0]] + normals[t[1]] + normals[t[2]];
        if face.dot(&avg) < 0.0 {
            t.swap(1, 2);
        }
    }

    Ok(TriangleMesh::from_parts_unchecked(vertices, triangles, normals))
}
