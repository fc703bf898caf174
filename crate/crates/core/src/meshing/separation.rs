//! Interpenetration penalty `L = Σ_i max(ε - (v_i - v'_i)·n'_i, 0)`, where
//! `v'_i`, `n'_i` are the nearest vertex (and its normal) among the other
//! meshes, and the descent loop that moves one mesh out of the others.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TriMesh;
use crate::error::{Error, Result};
use crate::Vec3;

/// Above this many candidate vertices nearest-neighbor queries use a
/// uniform grid instead of a linear scan.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpenetrationConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
}

impl Default for InterpenetrationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.002,
            step_size: 0.002,
            iterations: 200,
        }
    }
}

/// Nearest-vertex lookup over the vertices of several meshes. Ties go to
/// the candidate listed first.
#[derive(Debug, Clone)]
pub struct NearestVertex {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
    grid: Option<HashGrid>,
}

/// Uniform grid over the candidate bounding box with cell contents stored
/// contiguously (`starts[c]..starts[c + 1]` indexes `ids`).
#[derive(Debug, Clone)]
struct HashGrid {
    origin: Vec3,
    cell: f64,
    dims: [i64; 3],
    starts: Vec<usize>,
    ids: Vec<usize>,
}

impl HashGrid {
    fn new(points: &[Vec3]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-9);
        let cell = extent / (points.len() as f64).cbrt().max(1.0);
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / cell).floor() as i64 + 1);
        let mut grid = Self {
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            ids: Vec::new(),
        };
        let total = (dims[0] * dims[1] * dims[2]) as usize;
        let slots: Vec<usize> = points.iter().map(|p| grid.slot(grid.key(p)).expect("point inside its own bounds")).collect();
        let mut counts = vec![0usize; total + 1];
        for &c in &slots {
            counts[c + 1] += 1;
        }
        for c in 0..total {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut ids = vec![0; points.len()];
        for (i, &c) in slots.iter().enumerate() {
            ids[fill[c]] = i;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.ids = ids;
        grid
    }

    fn key(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    fn slot(&self, key: [i64; 3]) -> Option<usize> {
        let inside = (0..3).all(|a| (0..self.dims[a]).contains(&key[a]));
        inside.then(|| ((key[2] * self.dims[1] + key[1]) * self.dims[0] + key[0]) as usize)
    }

    fn visit(&self, key: [i64; 3], points: &[Vec3], q: &Vec3, best: &mut Option<(f64, usize)>) {
        let Some(c) = self.slot(key) else {
            return;
        };
        for &i in &self.ids[self.starts[c]..self.starts[c + 1]] {
            let d2 = (points[i] - q).norm_squared();
            if best.is_none_or(|(bd, bi)| d2 < bd || (d2 == bd && i < bi)) {
                *best = Some((d2, i));
            }
        }
    }

    fn nearest(&self, points: &[Vec3], q: &Vec3) -> usize {
        let center = self.key(q);
        let mut best: Option<(f64, usize)> = None;
        // ring at which every grid cell has been visited
        let max_ring = (0..3)
            .map(|a| center[a].abs().max((center[a] - self.dims[a] + 1).abs()))
            .max()
            .unwrap_or(0);
        for ring in 0..=max_ring {
            if let Some((d2, _)) = best {
                // every unvisited cell is at least (ring - 1) cells away
                let reach = (ring - 1) as f64 * self.cell;
                if reach > 0.0 && reach * reach > d2 {
                    break;
                }
            }
            for dz in (-ring).max(-center[2])..=ring.min(self.dims[2] - 1 - center[2]) {
                for dy in (-ring).max(-center[1])..=ring.min(self.dims[1] - 1 - center[1]) {
                    let key = |dx: i64| [center[0] + dx, center[1] + dy, center[2] + dz];
                    if dz.abs() == ring || dy.abs() == ring {
                        let lo = (-ring).max(-center[0]);
                        let hi = ring.min(self.dims[0] - 1 - center[0]);
                        for dx in lo..=hi {
                            self.visit(key(dx), points, q, &mut best);
                        }
                    } else {
                        self.visit(key(-ring), points, q, &mut best);
                        self.visit(key(ring), points, q, &mut best);
                    }
                }
            }
        }
        best.expect("nonempty grid").1
    }
}

impl NearestVertex {
    pub fn new(meshes: &[&TriMesh]) -> Result<Self> {
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for m in meshes {
            if m.normals.len() != m.vertices.len() {
                return Err(Error::ShapeMismatch("mesh normals do not match its vertices".into()));
            }
            points.extend_from_slice(&m.vertices);
            normals.extend_from_slice(&m.normals);
        }
        let grid = (points.len() > BRUTE_FORCE_LIMIT).then(|| HashGrid::new(&points));
        Ok(Self { points, normals, grid })
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Position and normal of the nearest candidate, or `None` if there are
    /// no candidates.
    pub fn query(&self, q: &Vec3) -> Option<(Vec3, Vec3)> {
        if self.points.is_empty() {
            return None;
        }
        let i = match &self.grid {
            Some(g) => g.nearest(&self.points, q),
            None => {
                let mut best = (f64::INFINITY, 0);
                for (i, p) in self.points.iter().enumerate() {
                    let d2 = (p - q).norm_squared();
                    if d2 < best.0 {
                        best = (d2, i);
                    }
                }
                best.1
            }
        };
        Some((self.points[i], self.normals[i]))
    }
}

/// Loss and per-vertex gradient (`-n'` on active hinges, zero elsewhere;
/// the nearest-neighbor assignment is held constant).
pub fn interpenetration_loss(target: &TriMesh, others: &[&TriMesh], epsilon: f64) -> Result<(f64, Vec<Vec3>)> {
    let index = NearestVertex::new(others)?;
    loss_with_index(&target.vertices, &index, epsilon)
}

fn loss_with_index(vertices: &[Vec3], index: &NearestVertex, epsilon: f64) -> Result<(f64, Vec<Vec3>)> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidConfig(format!("interpenetration epsilon {epsilon}")));
    }
    let terms: Vec<Option<(f64, Vec3)>> = vertices
        .par_iter()
        .map(|v| {
            let (p, n) = index.query(v)?;
            let h = epsilon - (v - p).dot(&n);
            (h > 0.0).then_some((h, -n))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    for (term, g) in terms.into_iter().zip(&mut grad) {
        if let Some((h, d)) = term {
            loss += h;
            *g = d;
        }
    }
    Ok((loss, grad))
}

/// Result of [`refine_separation`]: the moved target mesh and the loss
/// before the first and after every accepted iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub mesh: TriMesh,
    pub losses: Vec<f64>,
}

/// Gradient descent on the vertices of `meshes[target]` against the other
/// meshes, which stay fixed. A step that raises the loss is retried with
/// half the step size, up to ten times, after which the loop stops.
pub fn refine_separation(meshes: &[TriMesh], target: usize, config: &InterpenetrationConfig) -> Result<RefineOutcome> {
    if meshes.len() < 2 {
        return Err(Error::InvalidConfig("separation needs at least two meshes".into()));
    }
    let mesh = meshes.get(target).ok_or(Error::IndexOutOfRange {
        what: "target mesh",
        index: target,
        len: meshes.len(),
    })?;
    if !(config.step_size > 0.0) {
        return Err(Error::InvalidConfig(format!("separation step size {}", config.step_size)));
    }
    let others: Vec<&TriMesh> = meshes.iter().enumerate().filter(|(i, _)| *i != target).map(|(_, m)| m).collect();
    let index = NearestVertex::new(&others)?;
    let mut vertices = mesh.vertices.clone();
    let (mut loss, mut grad) = loss_with_index(&vertices, &index, config.epsilon)?;
    let mut losses = vec![loss];
    let mut step = config.step_size;
    let mut moved = false;
    'outer: for _ in 0..config.iterations {
        if grad.iter().all(|g| *g == Vec3::zeros()) {
            break;
        }
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<Vec3> = vertices.iter().zip(&grad).map(|(v, g)| v - g * step).collect();
            let (trial_loss, trial_grad) = loss_with_index(&trial, &index, config.epsilon)?;
            if trial_loss <= loss {
                vertices = trial;
                loss = trial_loss;
                grad = trial_grad;
                losses.push(loss);
                moved = true;
                continue 'outer;
            }
            step *= 0.5;
        }
        break;
    }
    let mesh = if moved {
        TriMesh::new(vertices, mesh.faces.clone())?
    } else {
        mesh.clone()
    };
    Ok(RefineOutcome { mesh, losses })
}
