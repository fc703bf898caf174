//! Voxel-grid fields: the frozen density and color of the input radiance
//! field, and the trainable category field whose tempered softmax splits
//! density into per-category sub-densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Default softmax temperature of the category field.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    /// The canonical scene volume `[-0.5, 0.5]^3`.
    pub fn unit_cube() -> Self {
        Self::new([-0.5; 3], [0.5; 3])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    /// Ray parameter interval overlapping the box, if any.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (t0, t1) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            lo = lo.max(t0.min(t1));
            hi = hi.min(t0.max(t1));
        }
        (lo <= hi).then_some((lo, hi))
    }
}

/// Trilinear footprint of a query point: the 8 surrounding node indices
/// (corner bit 0 = x, bit 1 = y, bit 2 = z) and their weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

/// Regular lattice of nodes spanning `bounds` with a fixed number of
/// channels per node. Node `(x, y, z)` sits at
/// `min + (x, y, z) * (max - min) / (resolution - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    resolution: [usize; 3],
    bounds: Aabb,
    channels: usize,
    values: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(resolution: [usize; 3], bounds: Aabb, channels: usize, values: Vec<f64>) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGrid(format!(
                "resolution {resolution:?} must be at least 2 per axis"
            )));
        }
        if (0..3).any(|a| !(bounds.min[a] < bounds.max[a])) {
            return Err(Error::InvalidGrid(format!("degenerate bounds {bounds:?}")));
        }
        if channels == 0 {
            return Err(Error::InvalidGrid("channel count must be positive".into()));
        }
        let expected = resolution.iter().product::<usize>() * channels;
        if values.len() != expected {
            return Err(Error::InvalidGrid(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid values"));
        }
        Ok(Self {
            resolution,
            bounds,
            channels,
            values,
        })
    }

    pub fn zeros(resolution: [usize; 3], bounds: Aabb, channels: usize) -> Result<Self> {
        let n = resolution.iter().product::<usize>() * channels;
        Self::new(resolution, bounds, channels, vec![0.0; n])
    }

    /// Builds a grid by evaluating `f` at every node position.
    pub fn from_fn(
        resolution: [usize; 3],
        bounds: Aabb,
        channels: usize,
        mut f: impl FnMut(Vec3, &mut [f64]),
    ) -> Result<Self> {
        let mut grid = Self::zeros(resolution, bounds, channels)?;
        for node in 0..grid.node_count() {
            let p = grid.node_position(node);
            let start = node * channels;
            f(p, &mut grid.values[start..start + channels]);
        }
        if grid.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid values"));
        }
        Ok(grid)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution[1] + y) * self.resolution[0] + x
    }

    pub fn node_coords(&self, node: usize) -> [usize; 3] {
        let [nx, ny, _] = self.resolution;
        [node % nx, (node / nx) % ny, node / (nx * ny)]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.bounds.extent(axis) / (self.resolution[axis] - 1) as f64
    }

    pub fn node_position(&self, node: usize) -> Vec3 {
        let c = self.node_coords(node);
        Vec3::from_fn(|a, _| self.bounds.min[a] + c[a] as f64 * self.spacing(a))
    }

    pub fn node_value(&self, node: usize) -> &[f64] {
        &self.values[node * self.channels..(node + 1) * self.channels]
    }

    /// Same resolution and bounds, so stencils are interchangeable.
    pub fn same_lattice(&self, other: &VoxelGrid) -> bool {
        self.resolution == other.resolution && self.bounds == other.bounds
    }

    /// Trilinear stencil of `p`; `None` outside the bounds.
    pub fn stencil(&self, p: &Vec3) -> Result<Option<Stencil>> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::NonFinite("query point"));
        }
        if !self.bounds.contains(p) {
            return Ok(None);
        }
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let g = (p[a] - self.bounds.min[a]) / self.spacing(a);
            let cell = (g.floor() as usize).min(self.resolution[a] - 2);
            base[a] = cell;
            frac[a] = (g - cell as f64).clamp(0.0, 1.0);
        }
        let mut stencil = Stencil {
            nodes: [0; 8],
            weights: [0.0; 8],
        };
        for corner in 0..8 {
            let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
            stencil.nodes[corner] = self.node_index(base[0] + dx, base[1] + dy, base[2] + dz);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            stencil.weights[corner] = wx * wy * wz;
        }
        Ok(Some(stencil))
    }

    /// Interpolates all channels with a precomputed stencil into `out`.
    pub fn interpolate(&self, stencil: &Stencil, out: &mut [f64]) {
        out.fill(0.0);
        for (&node, &w) in stencil.nodes.iter().zip(&stencil.weights) {
            let vals = &self.values[node * self.channels..(node + 1) * self.channels];
            for (o, v) in out.iter_mut().zip(vals) {
                *o += w * v;
            }
        }
    }

    /// Trilinear interpolation at `p`; the zero vector outside the bounds.
    pub fn sample_trilinear(&self, p: &Vec3) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels];
        if let Some(s) = self.stencil(p)? {
            self.interpolate(&s, &mut out);
        }
        Ok(out)
    }
}

/// Frozen nonnegative density σ.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: VoxelGrid,
}

impl DensityField {
    pub fn new(grid: VoxelGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::InvalidGrid("density grid must have 1 channel".into()));
        }
        if grid.values().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidGrid("negative density".into()));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn sample(&self, p: &Vec3) -> Result<f64> {
        Ok(match self.grid.stencil(p)? {
            Some(s) => self.sample_stencil(&s),
            None => 0.0,
        })
    }

    pub fn sample_stencil(&self, s: &Stencil) -> f64 {
        let v = self.grid.values();
        let sigma: f64 = s.nodes.iter().zip(&s.weights).map(|(&n, &w)| w * v[n]).sum();
        sigma.max(0.0)
    }
}

/// Frozen RGB color with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorField {
    grid: VoxelGrid,
}

impl ColorField {
    pub fn new(grid: VoxelGrid) -> Result<Self> {
        if grid.channels() != 3 {
            return Err(Error::InvalidGrid("color grid must have 3 channels".into()));
        }
        if grid.values().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidGrid("color outside [0, 1]".into()));
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn sample(&self, p: &Vec3) -> Result<[f64; 3]> {
        let mut c = [0.0; 3];
        if let Some(s) = self.grid.stencil(p)? {
            self.grid.interpolate(&s, &mut c);
        }
        Ok(c.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Per-point probability over categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySimplex {
    probs: Vec<f64>,
}

impl CategorySimplex {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

/// `out = softmax(logits / temperature)` with the max logit subtracted
/// before exponentiation.
pub fn tempered_softmax(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &f) in out.iter_mut().zip(logits) {
        *o = ((f - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Trainable logits `f` over `K` categories with softmax temperature `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryField {
    grid: VoxelGrid,
    temperature: f64,
    names: Vec<String>,
}

impl CategoryField {
    pub fn new(grid: VoxelGrid, temperature: f64, names: Vec<String>) -> Result<Self> {
        if grid.channels() < 2 {
            return Err(Error::InvalidGrid("category field needs at least 2 categories".into()));
        }
        if names.len() != grid.channels() {
            return Err(Error::InvalidGrid(format!(
                "{} category names for {} channels",
                names.len(),
                grid.channels()
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidGrid(format!("temperature {temperature} must be > 0")));
        }
        Ok(Self {
            grid,
            temperature,
            names,
        })
    }

    /// All-zero logits: the uniform simplex everywhere.
    pub fn uniform(resolution: [usize; 3], bounds: Aabb, names: Vec<String>, temperature: f64) -> Result<Self> {
        let grid = VoxelGrid::zeros(resolution, bounds, names.len())?;
        Self::new(grid, temperature, names)
    }

    /// Single-category field (`p ≡ 1`); only meaningful as a degenerate
    /// case of volume rendering.
    pub fn single(resolution: [usize; 3], bounds: Aabb, name: &str) -> Result<Self> {
        Ok(Self {
            grid: VoxelGrid::zeros(resolution, bounds, 1)?,
            temperature: DEFAULT_TEMPERATURE,
            names: vec![name.to_string()],
        })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub(crate) fn grid_mut(&mut self) -> &mut VoxelGrid {
        &mut self.grid
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn category_count(&self) -> usize {
        self.names.len()
    }

    /// Probabilities from already-interpolated logits.
    pub fn probs_from_stencil(&self, s: &Stencil, logits: &mut [f64], probs: &mut [f64]) {
        self.grid.interpolate(s, logits);
        tempered_softmax(logits, self.temperature, probs);
    }

    /// Logits are interpolated first, then passed through the tempered
    /// softmax. Outside the bounds the logits are zero (uniform simplex).
    pub fn category_probs(&self, p: &Vec3) -> Result<CategorySimplex> {
        let logits = self.grid.sample_trilinear(p)?;
        let mut probs = vec![0.0; logits.len()];
        tempered_softmax(&logits, self.temperature, &mut probs);
        Ok(CategorySimplex { probs })
    }

    /// Sub-density `p^k(x) σ(x)` of category `k`.
    pub fn sub_density(&self, density: &DensityField, p: &Vec3, k: usize) -> Result<f64> {
        let count = self.category_count();
        if k >= count {
            return Err(Error::IndexOutOfRange {
                what: "category",
                index: k,
                len: count,
            });
        }
        let sigma = density.sample(p)?;
        if sigma == 0.0 {
            return Ok(0.0);
        }
        Ok(self.category_probs(p)?.probs[k] * sigma)
    }
}
