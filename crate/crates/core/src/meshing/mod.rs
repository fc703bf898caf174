//! Triangle meshes of the category sub-densities: marching-tetrahedra
//! extraction, vertex normals, an interpenetration penalty between meshes
//! with a descent loop that pushes one mesh out of the others, and
//! OBJ/PLY export.

mod io;
mod separation;
mod tets;

pub use io::{export_obj, export_ply, obj_string, parse_obj, ply_bytes};
pub use separation::{interpenetration_loss, refine_separation, InterpenetrationConfig, NearestVertex, RefineOutcome};
pub use tets::{extract_isosurface, MeshConfig, TetGrid, CUBE_TETS};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::Vec3;

/// Faces whose area is at or below this are dropped during cleanup.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Indexed triangle mesh with counter-clockwise faces (seen from outside)
/// and unit per-vertex normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub normals: Vec<Vec3>,
}

impl TriMesh {
    /// Builds a mesh and computes its normals.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mut mesh = Self {
            vertices,
            faces,
            normals: Vec::new(),
        };
        mesh.validate_indices()?;
        if !mesh.vertices.is_empty() {
            mesh.normals = vertex_normals(&mesh)?;
        }
        Ok(mesh)
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    fn validate_indices(&self) -> Result<()> {
        let n = self.vertices.len();
        for f in &self.faces {
            if let Some(&bad) = f.iter().find(|&&i| i >= n) {
                return Err(Error::IndexOutOfRange {
                    what: "mesh vertex",
                    index: bad,
                    len: n,
                });
            }
        }
        Ok(())
    }

    fn corners(&self, f: &[usize; 3]) -> [Vec3; 3] {
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }

    /// `(b - a) × (c - a)`: twice the area times the unit face normal.
    fn face_cross(&self, f: &[usize; 3]) -> Vec3 {
        let [a, b, c] = self.corners(f);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        self.faces.iter().map(|f| 0.5 * self.face_cross(f).norm()).sum()
    }

    /// Signed enclosed volume (positive for outward-facing windings).
    pub fn volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = self.corners(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Number of faces using each undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for f in &self.faces {
            for i in 0..3 {
                let (a, b) = (f[i], f[(i + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_closed_manifold(&self) -> bool {
        !self.faces.is_empty() && self.edge_face_counts().values().all(|&c| c == 2)
    }

    /// Drops degenerate faces and unused vertices, keeping order.
    pub fn cleaned(&self) -> Result<TriMesh> {
        let faces: Vec<[usize; 3]> = self
            .faces
            .iter()
            .copied()
            .filter(|f| 0.5 * self.face_cross(f).norm() > DEGENERATE_AREA)
            .collect();
        let (vertices, faces) = compact(&self.vertices, &faces);
        TriMesh::new(vertices, faces)
    }

    /// Same geometry with every face winding reversed.
    pub fn flipped(&self) -> Result<TriMesh> {
        TriMesh::new(self.vertices.clone(), self.faces.iter().map(|f| [f[0], f[2], f[1]]).collect())
    }
}

/// Keeps only vertices referenced by `faces`, renumbered in first-seen
/// vertex order.
fn compact(vertices: &[Vec3], faces: &[[usize; 3]]) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut used = vec![false; vertices.len()];
    for f in faces {
        for &i in f {
            used[i] = true;
        }
    }
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut kept = Vec::new();
    for (i, v) in vertices.iter().enumerate() {
        if used[i] {
            remap[i] = kept.len();
            kept.push(*v);
        }
    }
    let faces = faces.iter().map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]]).collect();
    (kept, faces)
}

/// Area-weighted average of incident face normals, normalized. A vertex
/// without incident area takes the normal of the face whose centroid is
/// nearest to it.
pub fn vertex_normals(mesh: &TriMesh) -> Result<Vec<Vec3>> {
    if mesh.vertices.is_empty() {
        return Err(Error::InvalidConfig("normals of an empty mesh".into()));
    }
    let mut acc = vec![Vec3::zeros(); mesh.vertices.len()];
    for f in &mesh.faces {
        let n = mesh.face_cross(f);
        for &i in f {
            acc[i] += n;
        }
    }
    let face_data: Vec<(Vec3, Vec3)> = mesh
        .faces
        .iter()
        .filter_map(|f| {
            let [a, b, c] = mesh.corners(f);
            let n = mesh.face_cross(f);
            (n.norm() > 0.0).then(|| ((a + b + c) / 3.0, n.normalize()))
        })
        .collect();
    acc.iter()
        .zip(&mesh.vertices)
        .map(|(n, v)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                return Ok(n / len);
            }
            face_data
                .iter()
                .min_by(|a, b| (a.0 - v).norm_squared().total_cmp(&(b.0 - v).norm_squared()))
                .map(|(_, n)| *n)
                .ok_or_else(|| Error::InvalidConfig("mesh has no face with nonzero area".into()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Subdivided icosahedron projected to the unit sphere.
    pub(crate) fn icosphere(subdivisions: usize) -> TriMesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut v: Vec<Vec3> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|p| Vec3::from(*p).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mid = HashMap::new();
            let mut next = Vec::new();
            let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| {
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    v.push(((v[a] + v[b]) / 2.0).normalize());
                    v.len() - 1
                })
            };
            for f in &faces {
                let ab = midpoint(f[0], f[1], &mut v);
                let bc = midpoint(f[1], f[2], &mut v);
                let ca = midpoint(f[2], f[0], &mut v);
                next.extend([[f[0], ab, ca], [f[1], bc, ab], [f[2], ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        TriMesh::new(v, faces).unwrap()
    }

    #[test]
    fn planar_quad_normals() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let mesh = TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap();
        assert!(mesh.normals.iter().all(|n| (n - Vec3::z()).norm() < 1e-12));
        let flipped = mesh.flipped().unwrap();
        for (a, b) in mesh.normals.iter().zip(&flipped.normals) {
            assert!((a + b).norm() < 1e-12);
        }
    }

    #[test]
    fn icosphere_normals_are_radial() {
        let mesh = icosphere(3);
        assert!(mesh.is_closed_manifold());
        assert!(mesh.volume() > 0.0);
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!((n.norm() - 1.0).abs() < 1e-6);
            assert!(n.dot(&v.normalize()) > 5f64.to_radians().cos());
        }
        let flipped = mesh.flipped().unwrap();
        for (a, b) in mesh.normals.iter().zip(&flipped.normals) {
            assert!((a + b).norm() < 1e-12);
        }
    }

    #[test]
    fn isolated_vertex_takes_nearest_face_normal() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(5.0, 5.0, 5.0),
        ];
        let mesh = TriMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!((mesh.normals[3] - Vec3::z()).norm() < 1e-12);
        assert!(vertex_normals(&TriMesh::default()).is_err());
        assert!(TriMesh::new(vec![Vec3::zeros()], vec![[0, 1, 2]]).is_err());
    }

    #[test]
    fn cleanup_drops_degenerate_faces_and_unused_vertices() {
        let v = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(9.0, 9.0, 9.0),
        ];
        let mesh = TriMesh::new(v, vec![[0, 1, 2], [0, 1, 3]]).unwrap();
        let clean = mesh.cleaned().unwrap();
        assert_eq!(clean.faces, vec![[0, 1, 2]]);
        assert_eq!(clean.vertices.len(), 3);
    }
}
