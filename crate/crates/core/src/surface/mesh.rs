use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Vec3, UNIT_NORMAL_TOLERANCE};
use crate::ply::{self, Encoding};

/// Indexed triangle mesh with unit per-vertex normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    vertices: Vec<Point3>,
    triangles: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[usize; 3]>, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != vertices.len() {
            return Err(Error::InvalidInput(format!(
                "{} normals for {} vertices",
                normals.len(),
                vertices.len()
            )));
        }
        for t in &triangles {
            if t.iter().any(|&i| i >= vertices.len()) {
                return Err(Error::InvalidInput(format!("triangle {t:?} indexes past the vertex list")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::InvalidInput(format!("degenerate triangle {t:?}")));
            }
        }
        if let Some(i) = normals
            .iter()
            .position(|n| (n.norm() - 1.0).abs() > UNIT_NORMAL_TOLERANCE)
        {
            return Err(Error::InvalidInput(format!("vertex normal {i} is not unit length")));
        }
        if vertices.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("mesh has non-finite vertices".into()));
        }
        Ok(Self { vertices, triangles, normals })
    }

    /// Builds vertex normals from area-weighted face normals.
    pub fn with_face_normals(vertices: Vec<Point3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::InvalidInput(format!("triangle {t:?} indexes past the vertex list")));
        }
        let normals = face_weighted_normals(&vertices, &triangles);
        Self::new(vertices, triangles, normals)
    }

    pub(crate) fn from_parts_unchecked(vertices: Vec<Point3>, triangles: Vec<[usize; 3]>, normals: Vec<Vec3>) -> Self {
        Self { vertices, triangles, normals }
    }

    pub fn vertices(&self) -> &[Point3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Reads a PLY mesh; vertex normals are taken from the file when
    /// present, otherwise computed from the faces.
    pub fn load_ply(path: impl AsRef<Path>) -> Result<Self> {
        let data = ply::read_ply(path)?;
        let vertices = data.cloud.points().to_vec();
        let mesh = match data.cloud.normals() {
            Some(n) => Self::new(vertices, data.triangles, n.to_vec()),
            None => Self::with_face_normals(vertices, data.triangles),
        };
        mesh.map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save_ply(&self, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
        ply::write_ply(path, &mesh_to_cloud(self), &self.triangles, encoding)
    }
}

/// Unit vertex normals from area-weighted incident face normals; isolated
/// vertices get +z.
pub fn face_weighted_normals(vertices: &[Point3], triangles: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let n = (vertices[t[1]] - vertices[t[0]]).cross(&(vertices[t[2]] - vertices[t[0]]));
        for &i in t {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vec3::z()
            }
        })
        .collect()
}

/// The mesh vertices with their normals, in vertex order.
pub fn mesh_to_cloud(mesh: &TriangleMesh) -> PointCloud {
    PointCloud::from_parts_unchecked(mesh.vertices.clone(), Some(mesh.normals.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> TriangleMesh {
        TriangleMesh::with_face_normals(
            vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn one_triangle_to_cloud() {
        let m = tri();
        let c = mesh_to_cloud(&m);
        assert_eq!(c.len(), 3);
        assert_eq!(c.points(), m.vertices());
        assert_eq!(c.normals().unwrap(), m.normals());
        assert!(m.normals().iter().all(|n| (n - Vec3::z()).norm() < 1e-12));
    }

    #[test]
    fn rejects_bad_topology() {
        let v = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        assert!(TriangleMesh::with_face_normals(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriangleMesh::with_face_normals(v.clone(), vec![[0, 1, 1]]).is_err());
        assert!(TriangleMesh::new(v, vec![[0, 1, 2]], vec![Vec3::x() * 2.0; 3]).is_err());
    }

    #[test]
    fn ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        tri().save_ply(&path, Encoding::BinaryLittleEndian).unwrap();
        let back = TriangleMesh::load_ply(&path).unwrap();
        assert_eq!(back.triangles(), tri().triangles());
        assert_eq!(back.vertices(), tri().vertices());
    }
}
