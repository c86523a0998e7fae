//! Skin surface extraction from CT-like volumes and the normal-angle image
//! used to carry 2D landmarks back onto that surface.

use std::collections::HashMap;

pub mod marching_cubes;
pub mod mesh;
pub mod normals;
pub mod render;
mod tables;
pub mod volume;

pub use marching_cubes::marching_cubes;
pub use mesh::{mesh_to_cloud, TriangleMesh};
pub use normals::{estimate_normals, DEFAULT_NORMAL_NEIGHBORS};
pub use render::{backproject_landmarks, render_normal_angle_image, NormalAngleImage};
pub use volume::ScalarVolume;

/// Number of triangles using each undirected edge, keyed `(low, high)`.
/// A closed manifold surface maps every edge to 2.
pub fn edge_incidence(triangles: &[[usize; 3]]) -> HashMap<(usize, usize), usize> {
    let mut counts = HashMap::new();
    for t in triangles {
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    }
    counts
}
