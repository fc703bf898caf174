//! Marching tetrahedra over a regular grid of cubes.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compact, TriMesh};
use crate::error::{Error, Result};
use crate::fields::{tempered_softmax, Aabb, CategoryField, DensityField};
use crate::Vec3;

/// The six tetrahedra of a cube, as cube-corner indices with bit 0 = +x,
/// bit 1 = +y, bit 2 = +z. All share the diagonal from corner 0 to corner
/// 7 and are positively oriented, so neighboring cubes meet on matching
/// triangles.
pub const CUBE_TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

/// Scalar values on the `(n+1)³` corner nodes of an `n³` cube grid,
/// x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TetGrid {
    cubes: [usize; 3],
    bounds: Aabb,
    values: Vec<f64>,
}

impl TetGrid {
    pub fn new(cubes: [usize; 3], bounds: Aabb, values: Vec<f64>) -> Result<Self> {
        if cubes.contains(&0) {
            return Err(Error::InvalidGrid("tet grid needs at least one cube per axis".into()));
        }
        if (0..3).any(|a| !(bounds.min[a] < bounds.max[a])) {
            return Err(Error::InvalidGrid("empty tet grid bounds".into()));
        }
        let nodes = cubes.iter().map(|c| c + 1).product::<usize>();
        if values.len() != nodes {
            return Err(Error::InvalidGrid(format!("{} values for {nodes} nodes", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tet grid values"));
        }
        Ok(Self { cubes, bounds, values })
    }

    /// Evaluates `f` at every node.
    pub fn sample(cubes: [usize; 3], bounds: Aabb, f: impl Fn(&Vec3) -> f64 + Sync) -> Result<Self> {
        let [nx, ny, nz] = cubes.map(|c| c + 1);
        let step = |a: usize| (bounds.max[a] - bounds.min[a]) / cubes[a].max(1) as f64;
        let (sx, sy, sz) = (step(0), step(1), step(2));
        let values = (0..nx * ny * nz)
            .into_par_iter()
            .map(|i| {
                let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
                f(&Vec3::new(
                    bounds.min[0] + x as f64 * sx,
                    bounds.min[1] + y as f64 * sy,
                    bounds.min[2] + z as f64 * sz,
                ))
            })
            .collect();
        Self::new(cubes, bounds, values)
    }

    /// Node values `p^k σ` on the lattice shared by `density` and
    /// `category`; one cube per voxel cell.
    pub fn from_sub_density(density: &DensityField, category: &CategoryField, k: usize) -> Result<Self> {
        let (dg, cg) = (density.grid(), category.grid());
        if !dg.same_lattice(cg) {
            return Err(Error::ShapeMismatch("density and category lattices differ".into()));
        }
        let kcount = category.category_count();
        if k >= kcount {
            return Err(Error::IndexOutOfRange {
                what: "category",
                index: k,
                len: kcount,
            });
        }
        let mut probs = vec![0.0; kcount];
        let values = (0..dg.node_count())
            .map(|i| {
                tempered_softmax(cg.node_value(i), category.temperature(), &mut probs);
                probs[k] * dg.node_value(i)[0].max(0.0)
            })
            .collect();
        Self::new(dg.resolution().map(|n| n - 1), dg.bounds(), values)
    }

    pub fn cubes(&self) -> [usize; 3] {
        self.cubes
    }

    pub fn node_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        let (nx, ny) = (self.cubes[0] + 1, self.cubes[1] + 1);
        x + nx * (y + ny * z)
    }

    pub fn node_position(&self, node: usize) -> Vec3 {
        let (nx, ny) = (self.cubes[0] + 1, self.cubes[1] + 1);
        let c = [node % nx, (node / nx) % ny, node / (nx * ny)];
        Vec3::from_fn(|a, _| {
            self.bounds.min[a] + c[a] as f64 * (self.bounds.max[a] - self.bounds.min[a]) / self.cubes[a] as f64
        })
    }

    /// Global node indices of the eight corners of cube `(x, y, z)`.
    fn cube_corners(&self, x: usize, y: usize, z: usize) -> [usize; 8] {
        std::array::from_fn(|c| self.node_index(x + (c & 1), y + ((c >> 1) & 1), z + ((c >> 2) & 1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshConfig {
    /// Iso-level; nodes above it are inside.
    pub threshold: f64,
    /// Connected components with fewer triangles are discarded.
    pub min_component_triangles: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_component_triangles: 32,
        }
    }
}

/// Triangle as three crossing edges, each keyed by its ordered node pair.
type EdgeTri = [(usize, usize); 3];

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Triangles of one tetrahedron for level-set values `v` (inside: `v > 0`),
/// wound so the normal points from inside to outside.
fn tet_triangles(grid: &TetGrid, nodes: [usize; 4], v: [f64; 4], level: f64, out: &mut Vec<EdgeTri>) {
    let inside: Vec<usize> = (0..4).filter(|&i| v[i] > level).collect();
    let outside: Vec<usize> = (0..4).filter(|&i| v[i] <= level).collect();
    let tris: Vec<[(usize, usize); 3]> = match (inside.len(), outside.len()) {
        (1, 3) => vec![[(inside[0], outside[0]), (inside[0], outside[1]), (inside[0], outside[2])]],
        (3, 1) => vec![[(inside[0], outside[0]), (inside[1], outside[0]), (inside[2], outside[0])]],
        (2, 2) => {
            let (i1, i2, o1, o2) = (inside[0], inside[1], outside[0], outside[1]);
            vec![[(i1, o1), (i1, o2), (i2, o2)], [(i1, o1), (i2, o2), (i2, o1)]]
        }
        _ => return,
    };
    let centroid = |set: &[usize]| set.iter().map(|&i| grid.node_position(nodes[i])).sum::<Vec3>() / set.len() as f64;
    let outward = centroid(&outside) - centroid(&inside);
    for tri in tris {
        let keys = tri.map(|(a, b)| edge_key(nodes[a], nodes[b]));
        let p = keys.map(|k| crossing(grid, k, level));
        let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
        out.push(if n.dot(&outward) < 0.0 { [keys[0], keys[2], keys[1]] } else { keys });
    }
}

/// Linear zero crossing of `value - level` on the edge `(a, b)`, computed
/// from the lower node index so every cube produces the same point.
fn crossing(grid: &TetGrid, (a, b): (usize, usize), level: f64) -> Vec3 {
    let (va, vb) = (grid.values[a] - level, grid.values[b] - level);
    let t = va / (va - vb);
    let (pa, pb) = (grid.node_position(a), grid.node_position(b));
    pa + (pb - pa) * t
}

/// Marching tetrahedra on `grid.values - threshold`, followed by removal of
/// degenerate faces and of small connected components. All nodes on one
/// side give an empty mesh.
pub fn extract_isosurface(grid: &TetGrid, config: &MeshConfig) -> Result<TriMesh> {
    if !(config.threshold > 0.0 && config.threshold.is_finite()) {
        return Err(Error::InvalidConfig(format!("isosurface threshold {}", config.threshold)));
    }
    let level = config.threshold;
    let [cx, cy, cz] = grid.cubes;
    let slabs: Vec<Vec<EdgeTri>> = (0..cz)
        .into_par_iter()
        .map(|z| {
            let mut tris = Vec::new();
            for y in 0..cy {
                for x in 0..cx {
                    let corners = grid.cube_corners(x, y, z);
                    for tet in CUBE_TETS {
                        let nodes = tet.map(|c| corners[c]);
                        let v = nodes.map(|n| grid.values[n]);
                        tet_triangles(grid, nodes, v, level, &mut tris);
                    }
                }
            }
            tris
        })
        .collect();

    let mut ids: HashMap<(usize, usize), usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for tri in slabs.into_iter().flatten() {
        let f = tri.map(|key| {
            *ids.entry(key).or_insert_with(|| {
                vertices.push(crossing(grid, key, level));
                vertices.len() - 1
            })
        });
        faces.push(f);
    }
    let raw = TriMesh {
        vertices,
        faces,
        normals: Vec::new(),
    };
    let faces: Vec<[usize; 3]> = raw
        .faces
        .iter()
        .copied()
        .filter(|f| 0.5 * raw.face_cross(f).norm() > super::DEGENERATE_AREA)
        .collect();
    let faces = drop_small_components(raw.vertices.len(), faces, config.min_component_triangles);
    let (vertices, faces) = compact(&raw.vertices, &faces);
    TriMesh::new(vertices, faces)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Keeps faces whose vertex-connected component has at least `min` faces.
fn drop_small_components(vertex_count: usize, faces: Vec<[usize; 3]>, min: usize) -> Vec<[usize; 3]> {
    if min <= 1 {
        return faces;
    }
    let mut parent: Vec<usize> = (0..vertex_count).collect();
    for f in &faces {
        for i in 1..3 {
            let (a, b) = (find(&mut parent, f[0]), find(&mut parent, f[i]));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut size = vec![0usize; vertex_count];
    let roots: Vec<usize> = faces.iter().map(|f| find(&mut parent, f[0])).collect();
    for &r in &roots {
        size[r] += 1;
    }
    faces
        .into_iter()
        .zip(roots)
        .filter(|(_, r)| size[*r] >= min)
        .map(|(f, _)| f)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_grid(cubes: usize, radius: f64) -> TetGrid {
        // linear signed distance shifted so the surface sits at level 1
        TetGrid::sample([cubes; 3], Aabb::new([-0.5; 3], [0.5; 3]), |p| 1.0 + radius - p.norm()).unwrap()
    }

    fn config(threshold: f64) -> MeshConfig {
        MeshConfig {
            threshold,
            min_component_triangles: 1,
        }
    }

    #[test]
    fn tets_are_positive_and_conforming() {
        let corner = |c: usize| Vec3::new((c & 1) as f64, ((c >> 1) & 1) as f64, ((c >> 2) & 1) as f64);
        let mut volume = 0.0;
        for t in CUBE_TETS {
            let [a, b, c, d] = t.map(corner);
            let det = (b - a).dot(&(c - a).cross(&(d - a)));
            assert!(det > 0.0);
            volume += det / 6.0;
        }
        assert!((volume - 1.0).abs() < 1e-12);
        // every interior face appears twice within the cube and boundary
        // faces split each cube face along the same diagonal
        let mut faces = HashMap::new();
        for t in CUBE_TETS {
            for skip in 0..4 {
                let mut f: Vec<usize> = (0..4).filter(|&i| i != skip).map(|i| t[i]).collect();
                f.sort();
                *faces.entry(f).or_insert(0) += 1;
            }
        }
        let boundary: Vec<Vec<usize>> = faces.into_iter().filter(|(_, c)| *c == 1).map(|(f, _)| f).collect();
        assert_eq!(boundary.len(), 12);
        // the split of each high-side face, moved onto the low side, must
        // equal the split of the low-side face it meets in the next cube
        for axis in 0..3 {
            let bit = 1 << axis;
            let side = |high: bool| {
                let mut set: Vec<Vec<usize>> = boundary
                    .iter()
                    .filter(|f| f.iter().all(|&c| (c & bit != 0) == high))
                    .map(|f| {
                        let mut g: Vec<usize> = f.iter().map(|&c| c & !bit).collect();
                        g.sort();
                        g
                    })
                    .collect();
                set.sort();
                set
            };
            assert_eq!(side(false).len(), 2);
            assert_eq!(side(false), side(true));
        }
    }

    #[test]
    fn constant_field_gives_empty_mesh() {
        let grid = TetGrid::sample([4; 3], Aabb::new([0.0; 3], [1.0; 3]), |_| 0.2).unwrap();
        assert!(extract_isosurface(&grid, &config(0.5)).unwrap().is_empty());
        assert!(extract_isosurface(&grid, &config(0.0)).is_err());
    }

    #[test]
    fn single_tet_one_node_inside() {
        // one cube, only corner 7 inside: it belongs to all six tets, so
        // check a single tet directly
        let grid = TetGrid::new([1; 3], Aabb::new([0.0; 3], [1.0; 3]), vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let mut tris = Vec::new();
        let nodes = CUBE_TETS[0];
        tet_triangles(&grid, nodes, nodes.map(|n| grid.values[n]), 1.0, &mut tris);
        assert_eq!(tris.len(), 1);
        let p = tris[0].map(|k| crossing(&grid, k, 1.0));
        let expected = [Vec3::new(0.5, 0.5, 0.5), Vec3::new(1.0, 0.5, 0.5), Vec3::new(1.0, 1.0, 0.5)];
        for e in expected {
            assert!(p.iter().any(|q| (q - e).norm() < 1e-12), "{e:?} not in {p:?}");
        }
        let normal = (p[1] - p[0]).cross(&(p[2] - p[0]));
        assert!(normal.dot(&Vec3::new(-1.0, -1.0, -1.0)) > 0.0);
    }

    #[test]
    fn analytic_sphere_area_volume_and_manifold() {
        let mesh = extract_isosurface(&sphere_grid(64, 0.3), &config(1.0)).unwrap();
        let area = 4.0 * std::f64::consts::PI * 0.09;
        let volume = 4.0 / 3.0 * std::f64::consts::PI * 0.027;
        assert!((mesh.area() / area - 1.0).abs() < 0.05, "area {}", mesh.area());
        assert!((mesh.volume() / volume - 1.0).abs() < 0.05, "volume {}", mesh.volume());
        assert!(mesh.is_closed_manifold());
        for (v, n) in mesh.vertices.iter().zip(&mesh.normals) {
            assert!((n.norm() - 1.0).abs() < 1e-6);
            assert!(n.dot(&v.normalize()) > 0.9);
        }
    }

    #[test]
    fn volume_decreases_with_threshold() {
        let grid = sphere_grid(24, 0.3);
        let mut last = f64::INFINITY;
        for level in [0.8, 0.9, 1.0, 1.1, 1.2] {
            let v = extract_isosurface(&grid, &config(level)).unwrap().volume();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn small_components_are_removed() {
        let grid = TetGrid::sample([24; 3], Aabb::new([-0.5; 3], [0.5; 3]), |p| {
            let big = 0.25 - (p - Vec3::new(-0.15, 0.0, 0.0)).norm();
            let speck = 0.03 - (p - Vec3::new(0.35, 0.35, 0.35)).norm();
            1.0 + big.max(speck)
        })
        .unwrap();
        let all = extract_isosurface(&grid, &config(1.0)).unwrap();
        let filtered = extract_isosurface(
            &grid,
            &MeshConfig {
                threshold: 1.0,
                min_component_triangles: 100,
            },
        )
        .unwrap();
        assert!(filtered.faces.len() < all.faces.len());
        assert!(filtered.vertices.iter().all(|v| v.x < 0.2));
        assert!(filtered.is_closed_manifold());
    }

    #[test]
    fn extraction_is_deterministic() {
        let grid = sphere_grid(16, 0.3);
        assert_eq!(
            extract_isosurface(&grid, &config(1.0)).unwrap(),
            extract_isosurface(&grid, &config(1.0)).unwrap()
        );
    }
}
