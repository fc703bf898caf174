//! Pinhole ray marching over the voxel fields.
//!
//! Composite pixels follow the usual emission-absorption quadrature
//! `C = Σ_i T_i (1 - exp(-σ_i δ_i)) c_i + T_r · background` with
//! `T_i = exp(-Σ_{j<i} σ_j δ_j)`. Category `k` uses the same samples with
//! every density scaled by that sample's probability `p_i^k`. A recorded
//! forward pass can be differentiated back to the category logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{CategoryField, ColorField, DensityField, Stencil};
use crate::image::Image;
use crate::Vec3;

/// Samples whose optical depth `σδ` is below this are treated as empty
/// space: they neither attenuate nor emit.
pub const EMPTY_OPTICAL_DEPTH: f64 = 1e-10;

pub const DEFAULT_SAMPLES_PER_RAY: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Radians.
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        position: Vec3,
        look_at: Vec3,
        up: Vec3,
        vertical_fov: f64,
        (width, height): (usize, usize),
        (near, far): (f64, f64),
    ) -> Result<Self> {
        let cam = Self {
            position: position.into(),
            look_at: look_at.into(),
            up: up.into(),
            vertical_fov,
            width,
            height,
            near,
            far,
        };
        cam.basis()?;
        Ok(cam)
    }

    /// Camera on a sphere around `target`, looking at it with +y up.
    /// Angles in degrees; near/far bracket a sphere of radius `extent`
    /// around the target.
    pub fn orbit(
        target: Vec3,
        radius: f64,
        azimuth_deg: f64,
        elevation_deg: f64,
        fov_deg: f64,
        size: (usize, usize),
        extent: f64,
    ) -> Result<Self> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let offset = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * radius;
        let near = (radius - extent).max(1e-3);
        Self::new(
            target + offset,
            target,
            Vec3::y(),
            fov_deg.to_radians(),
            size,
            (near, radius + extent),
        )
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Orthonormal (forward, right, up) frame.
    pub fn basis(&self) -> Result<(Vec3, Vec3, Vec3)> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("empty resolution".into()));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::InvalidCamera(format!(
                "need 0 < near < far, got {} / {}",
                self.near, self.far
            )));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return Err(Error::InvalidCamera(format!("fov {} outside (0, π)", self.vertical_fov)));
        }
        let view = Vec3::from(self.look_at) - Vec3::from(self.position);
        let forward = view
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("look_at equals position".into()))?;
        let right = forward
            .cross(&Vec3::from(self.up))
            .try_normalize(1e-9)
            .ok_or_else(|| Error::InvalidCamera("up parallel to view direction".into()))?;
        let up = right.cross(&forward);
        Ok((forward, right, up))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// One unit-length ray per pixel through the pixel center, row-major from
/// the top-left pixel.
pub fn generate_rays(camera: &Camera) -> Result<Vec<Ray>> {
    let (forward, right, up) = camera.basis()?;
    let half_h = (camera.vertical_fov * 0.5).tan();
    let half_w = half_h * camera.width as f64 / camera.height as f64;
    let origin = Vec3::from(camera.position);
    let mut rays = Vec::with_capacity(camera.pixel_count());
    for j in 0..camera.height {
        let v = (1.0 - 2.0 * (j as f64 + 0.5) / camera.height as f64) * half_h;
        for i in 0..camera.width {
            let u = (2.0 * (i as f64 + 0.5) / camera.width as f64 - 1.0) * half_w;
            let dir = (forward + right * u + up * v).normalize();
            rays.push(Ray { origin, dir });
        }
    }
    Ok(rays)
}

/// Ordered sample distances along one ray and their segment lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    t: Vec<f64>,
    delta: Vec<f64>,
}

impl RaySamples {
    /// Builds samples from strictly increasing distances inside
    /// `[near, far]`; the final segment runs to `far`.
    pub fn from_distances(t: Vec<f64>, far: f64) -> Result<Self> {
        if t.is_empty() {
            return Err(Error::InvalidConfig("a ray needs at least one sample".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) || !(far > *t.last().unwrap()) {
            return Err(Error::InvalidConfig("sample distances must strictly increase below far".into()));
        }
        let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        delta.push(far - t.last().unwrap());
        Ok(Self { t, delta })
    }

    /// Stratified uniform samples: one per equal bin, at the bin midpoint
    /// without an rng, uniformly jittered inside the bin otherwise.
    pub fn stratified(near: f64, far: f64, count: usize, rng: Option<&mut ChaCha8Rng>) -> Self {
        let bin = (far - near) / count as f64;
        let t: Vec<f64> = match rng {
            Some(rng) => (0..count)
                .map(|i| {
                    // keep samples strictly inside the bin so δ > 0
                    let u: f64 = rng.random::<f64>() * 0.998 + 0.001;
                    near + (i as f64 + u) * bin
                })
                .collect(),
            None => (0..count).map(|i| near + (i as f64 + 0.5) * bin).collect(),
        };
        let mut delta: Vec<f64> = t.windows(2).map(|w: &[f64]| w[1] - w[0]).collect();
        delta.push(far - t.last().copied().unwrap_or(near));
        Self { t, delta }
    }

    pub fn distances(&self) -> &[f64] {
        &self.t
    }

    pub fn deltas(&self) -> &[f64] {
        &self.delta
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Per-ray samples for every pixel of `camera`. `jitter_seed` selects
/// stratified jitter; each ray draws from its own stream of the seed.
pub fn camera_samples(camera: &Camera, count: usize, jitter_seed: Option<u64>) -> Vec<RaySamples> {
    (0..camera.pixel_count())
        .map(|ray| match jitter_seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(ray as u64);
                RaySamples::stratified(camera.near, camera.far, count, Some(&mut rng))
            }
            None => RaySamples::stratified(camera.near, camera.far, count, None),
        })
        .collect()
}

/// How the category transmittance accumulates along the ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransmittanceMode {
    /// `T_i^k = exp(-Σ_{j<i} p_j^k σ_j δ_j)`: each sample attenuates with
    /// its own probability.
    #[default]
    PerSample,
    /// `T_i^k = exp(-p_i^k Σ_{j<i} σ_j δ_j)`: the current sample's
    /// probability scales the whole prefix. Forward only.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    /// Seed for stratified jitter; `None` samples bin midpoints.
    pub jitter_seed: Option<u64>,
    pub background: [f64; 3],
    pub transmittance: TransmittanceMode,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: DEFAULT_SAMPLES_PER_RAY,
            jitter_seed: None,
            background: [1.0; 3],
            transmittance: TransmittanceMode::PerSample,
        }
    }
}

/// One non-empty sample along a ray.
#[derive(Debug, Clone)]
struct SamplePoint {
    position: Vec3,
    sigma_delta: f64,
    color: [f64; 3],
}

fn march(ray: &Ray, samples: &RaySamples, density: &DensityField, color: &ColorField) -> Result<Vec<SamplePoint>> {
    let mut points = Vec::new();
    let bounds = density.grid().bounds();
    let Some((lo, hi)) = bounds.ray_interval(&ray.origin, &ray.dir) else {
        return Ok(points);
    };
    let shared = density.grid().same_lattice(color.grid());
    for (&t, &delta) in samples.t.iter().zip(&samples.delta) {
        if t < lo || t > hi {
            continue;
        }
        let position = ray.origin + ray.dir * t;
        let Some(stencil) = density.grid().stencil(&position)? else {
            continue;
        };
        let sigma = density.sample_stencil(&stencil);
        let sigma_delta = sigma * delta;
        if sigma_delta < EMPTY_OPTICAL_DEPTH {
            continue;
        }
        let mut c = [0.0; 3];
        if shared {
            color.grid().interpolate(&stencil, &mut c);
            c = c.map(|v| v.clamp(0.0, 1.0));
        } else {
            c = color.sample(&position)?;
        }
        if !sigma_delta.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("density or color sample"));
        }
        points.push(SamplePoint {
            position,
            sigma_delta,
            color: c,
        });
    }
    Ok(points)
}

/// Compositing weights `T_i (1 - exp(-s_i))` for optical depths `s_i` and
/// the residual transmittance `exp(-Σ s_i)`.
pub fn transmittance_weights(optical_depths: &[f64]) -> (Vec<f64>, f64) {
    let mut acc = 0.0f64;
    let weights = optical_depths
        .iter()
        .map(|&s| {
            let w = (-acc).exp() * -(-s).exp_m1();
            acc += s;
            w
        })
        .collect();
    (weights, (-acc).exp())
}

/// Integrates one ray with densities scaled by `scale(i)` per sample.
/// Returns the pixel color and the residual transmittance.
fn integrate(points: &[SamplePoint], scale: impl Fn(usize) -> f64, background: &[f64; 3], mode: TransmittanceMode) -> ([f64; 3], f64) {
    let mut rgb = [0.0; 3];
    let mut scaled_prefix = 0.0f64;
    let mut raw_prefix = 0.0;
    for (i, pt) in points.iter().enumerate() {
        let p = scale(i);
        let s = p * pt.sigma_delta;
        let transmittance = match mode {
            TransmittanceMode::PerSample => (-scaled_prefix).exp(),
            TransmittanceMode::Literal => (-p * raw_prefix).exp(),
        };
        let w = transmittance * -(-s).exp_m1();
        for c in 0..3 {
            rgb[c] += w * pt.color[c];
        }
        scaled_prefix += s;
        raw_prefix += pt.sigma_delta;
    }
    let residual = (-scaled_prefix).exp();
    for c in 0..3 {
        rgb[c] += residual * background[c];
    }
    (rgb, residual)
}

fn check_rays(rays: &[Ray], samples: &[RaySamples]) -> Result<()> {
    if rays.len() != samples.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rays but {} sample sets",
            rays.len(),
            samples.len()
        )));
    }
    Ok(())
}

/// Composite render of `rays`, returned as an `n x 1` RGB strip in ray
/// order.
pub fn render_composite(
    rays: &[Ray],
    samples: &[RaySamples],
    density: &DensityField,
    color: &ColorField,
    background: [f64; 3],
) -> Result<Image> {
    check_rays(rays, samples)?;
    let pixels = rays
        .par_iter()
        .zip(samples)
        .map(|(ray, s)| {
            let pts = march(ray, s, density, color)?;
            Ok(integrate(&pts, |_| 1.0, &background, TransmittanceMode::PerSample).0)
        })
        .collect::<Result<Vec<_>>>()?;
    Image::from_vec(rays.len(), 1, 3, pixels.into_iter().flatten().collect())
}

/// Category `k` render of `rays`: an `n x 1` RGB strip and an `n x 1`
/// opacity strip `1 - exp(-Σ_j p_j^k σ_j δ_j)`.
#[allow(clippy::too_many_arguments)]
pub fn render_category(
    rays: &[Ray],
    samples: &[RaySamples],
    density: &DensityField,
    color: &ColorField,
    category: &CategoryField,
    k: usize,
    background: [f64; 3],
    mode: TransmittanceMode,
) -> Result<(Image, Image)> {
    check_rays(rays, samples)?;
    check_category(category, k)?;
    let kcount = category.category_count();
    let out = rays
        .par_iter()
        .zip(samples)
        .map(|(ray, s)| {
            let pts = march(ray, s, density, color)?;
            let probs = point_probs(&pts, category)?;
            let (rgb, residual) = integrate(&pts, |i| probs[i * kcount + k], &background, mode);
            Ok((rgb, 1.0 - residual))
        })
        .collect::<Result<Vec<_>>>()?;
    let rgb = out.iter().flat_map(|(c, _)| *c).collect();
    let opacity = out.iter().map(|(_, o)| *o).collect();
    Ok((
        Image::from_vec(rays.len(), 1, 3, rgb)?,
        Image::from_vec(rays.len(), 1, 1, opacity)?,
    ))
}

fn check_category(category: &CategoryField, k: usize) -> Result<()> {
    if k >= category.category_count() {
        return Err(Error::IndexOutOfRange {
            what: "category",
            index: k,
            len: category.category_count(),
        });
    }
    Ok(())
}

fn point_probs(points: &[SamplePoint], category: &CategoryField) -> Result<Vec<f64>> {
    let kcount = category.category_count();
    let mut probs = vec![0.0; points.len() * kcount];
    let mut logits = vec![0.0; kcount];
    for (pt, out) in points.iter().zip(probs.chunks_exact_mut(kcount)) {
        match category.grid().stencil(&pt.position)? {
            Some(s) => category.probs_from_stencil(&s, &mut logits, out),
            None => out.fill(1.0 / kcount as f64),
        }
    }
    Ok(probs)
}

/// Samples of one ray kept for the reverse pass.
#[derive(Debug, Clone)]
struct RayTape {
    points: Vec<SamplePoint>,
    probs: Vec<f64>,
}

/// Recorded forward pass of [`render_view`].
#[derive(Debug, Clone)]
pub struct RenderTape {
    rays: Vec<RayTape>,
    background: [f64; 3],
    mode: TransmittanceMode,
    category_count: usize,
}

/// Composite and per-category renders of one camera from shared samples.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub composite: Image,
    pub per_category_rgb: Vec<Image>,
    pub per_category_opacity: Vec<Image>,
    pub background: [f64; 3],
    pub(crate) tape: Option<RenderTape>,
}

impl RenderedView {
    pub fn category_count(&self) -> usize {
        self.per_category_rgb.len()
    }

    pub fn is_recorded(&self) -> bool {
        self.tape.is_some()
    }

    /// Opacity of category `k` thresholded at 0.5.
    pub fn category_mask(&self, k: usize) -> Image {
        let o = &self.per_category_opacity[k];
        let data = o.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        Image::from_vec(o.width(), o.height(), 1, data).expect("same shape")
    }
}

struct RayOutput {
    composite: [f64; 3],
    rgb: Vec<[f64; 3]>,
    opacity: Vec<f64>,
    tape: Option<RayTape>,
}

/// Renders the composite plus every category image for `camera`. With
/// `record`, the samples are kept so [`backward_category_render`] can run.
pub fn render_view(
    camera: &Camera,
    density: &DensityField,
    color: &ColorField,
    category: &CategoryField,
    config: &RenderConfig,
    record: bool,
) -> Result<RenderedView> {
    let rays = generate_rays(camera)?;
    let samples = camera_samples(camera, config.samples_per_ray, config.jitter_seed);
    let kcount = category.category_count();
    let outputs = rays
        .par_iter()
        .zip(&samples)
        .map(|(ray, s)| {
            let points = march(ray, s, density, color)?;
            let probs = point_probs(&points, category)?;
            let (composite, _) = integrate(&points, |_| 1.0, &config.background, TransmittanceMode::PerSample);
            let mut rgb = Vec::with_capacity(kcount);
            let mut opacity = Vec::with_capacity(kcount);
            for k in 0..kcount {
                let (c, residual) = integrate(&points, |i| probs[i * kcount + k], &config.background, config.transmittance);
                rgb.push(c);
                opacity.push(1.0 - residual);
            }
            let tape = record.then(|| RayTape { points, probs });
            Ok(RayOutput {
                composite,
                rgb,
                opacity,
                tape,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (w, h) = (camera.width, camera.height);
    let composite = Image::from_vec(w, h, 3, outputs.iter().flat_map(|o| o.composite).collect())?;
    let mut per_category_rgb = Vec::with_capacity(kcount);
    let mut per_category_opacity = Vec::with_capacity(kcount);
    for k in 0..kcount {
        per_category_rgb.push(Image::from_vec(w, h, 3, outputs.iter().flat_map(|o| o.rgb[k]).collect())?);
        per_category_opacity.push(Image::from_vec(w, h, 1, outputs.iter().map(|o| o.opacity[k]).collect())?);
    }
    let tape = record.then(|| RenderTape {
        rays: outputs.into_iter().map(|o| o.tape.expect("recorded")).collect(),
        background: config.background,
        mode: config.transmittance,
        category_count: kcount,
    });
    Ok(RenderedView {
        composite,
        per_category_rgb,
        per_category_opacity,
        background: config.background,
        tape,
    })
}

/// Renders with density `Σ_k p^k σ`, the recomposition of all sub-fields.
pub fn render_recomposed(
    camera: &Camera,
    density: &DensityField,
    color: &ColorField,
    category: &CategoryField,
    config: &RenderConfig,
) -> Result<Image> {
    let rays = generate_rays(camera)?;
    let samples = camera_samples(camera, config.samples_per_ray, config.jitter_seed);
    let kcount = category.category_count();
    let pixels = rays
        .par_iter()
        .zip(&samples)
        .map(|(ray, s)| {
            let points = march(ray, s, density, color)?;
            let probs = point_probs(&points, category)?;
            let recomposed = |i: usize| probs[i * kcount..(i + 1) * kcount].iter().sum::<f64>();
            Ok(integrate(&points, recomposed, &config.background, TransmittanceMode::PerSample).0)
        })
        .collect::<Result<Vec<_>>>()?;
    Image::from_vec(camera.width, camera.height, 3, pixels.into_iter().flatten().collect())
}

/// Upstream gradient for one category render. Missing parts are zero.
#[derive(Debug, Clone, Default)]
pub struct CategoryGrad {
    /// `∂L/∂rgb`, same shape as the category RGB image.
    pub rgb: Option<Image>,
    /// `∂L/∂opacity`, same shape as the opacity image.
    pub opacity: Option<Image>,
}

impl CategoryGrad {
    pub fn is_finite(&self) -> bool {
        self.rgb.as_ref().is_none_or(Image::is_finite) && self.opacity.as_ref().is_none_or(Image::is_finite)
    }
}

/// Reverse pass of [`render_view`]: accumulates `∂L/∂f` at every logit
/// node of `category` (same layout as the category grid values) given
/// per-category image gradients. Per-ray contributions are reduced in
/// pixel order, so the result does not depend on thread scheduling.
pub fn backward_category_render(view: &RenderedView, category: &CategoryField, grads: &[CategoryGrad]) -> Result<Vec<f64>> {
    let tape = view.tape.as_ref().ok_or(Error::NotRecorded)?;
    if tape.mode != TransmittanceMode::PerSample {
        return Err(Error::Unsupported("gradients of the literal transmittance variant".into()));
    }
    let kcount = tape.category_count;
    if category.category_count() != kcount {
        return Err(Error::ShapeMismatch("category count differs from the recorded pass".into()));
    }
    if grads.len() != kcount {
        return Err(Error::ShapeMismatch(format!("{} gradients for {kcount} categories", grads.len())));
    }
    let pixels = tape.rays.len();
    for g in grads {
        if let Some(img) = &g.rgb {
            if img.pixel_count() != pixels || img.channels() != 3 {
                return Err(Error::ShapeMismatch("rgb gradient shape".into()));
            }
        }
        if let Some(img) = &g.opacity {
            if img.pixel_count() != pixels || img.channels() != 1 {
                return Err(Error::ShapeMismatch("opacity gradient shape".into()));
            }
        }
    }

    let temperature = category.temperature();
    let bg = tape.background;
    let contributions = tape
        .rays
        .par_iter()
        .enumerate()
        .map(|(pix, ray)| -> Result<Vec<(Stencil, Vec<f64>)>> {
            let n = ray.points.len();
            if n == 0 {
                return Ok(Vec::new());
            }
            // ∂L/∂p_i^k for every sample and category
            let mut dprob = vec![0.0; n * kcount];
            let mut any = false;
            for (k, g) in grads.iter().enumerate() {
                let g_rgb = g.rgb.as_ref().map(|img| {
                    let d = &img.data()[pix * 3..pix * 3 + 3];
                    [d[0], d[1], d[2]]
                });
                let g_op = g.opacity.as_ref().map_or(0.0, |img| img.data()[pix]);
                let g_rgb = g_rgb.unwrap_or([0.0; 3]);
                if g_op == 0.0 && g_rgb == [0.0; 3] {
                    continue;
                }
                any = true;
                let dot = |c: &[f64; 3]| g_rgb[0] * c[0] + g_rgb[1] * c[1] + g_rgb[2] * c[2];
                let s: Vec<f64> = (0..n).map(|i| ray.probs[i * kcount + k] * ray.points[i].sigma_delta).collect();
                let (weights, residual) = transmittance_weights(&s);
                // suffix[i] = Σ_{m>i} w_m (g·c_m) + T_r (g·bg)
                let mut suffix = residual * dot(&bg);
                let mut prefix_t: Vec<f64> = Vec::with_capacity(n);
                let mut acc = 0.0f64;
                for &si in &s {
                    prefix_t.push((-acc).exp());
                    acc += si;
                }
                for i in (0..n).rev() {
                    let pt = &ray.points[i];
                    let ds = prefix_t[i] * (-s[i]).exp() * dot(&pt.color) - suffix + g_op * residual;
                    dprob[i * kcount + k] = ds * pt.sigma_delta;
                    suffix += weights[i] * dot(&pt.color);
                }
            }
            if !any {
                return Ok(Vec::new());
            }
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let Some(stencil) = category.grid().stencil(&ray.points[i].position)? else {
                    continue;
                };
                let p = &ray.probs[i * kcount..(i + 1) * kcount];
                let g = &dprob[i * kcount..(i + 1) * kcount];
                let mean: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                let dlogit: Vec<f64> = p.iter().zip(g).map(|(pl, gl)| pl * (gl - mean) / temperature).collect();
                if dlogit.iter().all(|&v| v == 0.0) {
                    continue;
                }
                out.push((stencil, dlogit));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grad = vec![0.0; category.grid().values().len()];
    for ray in contributions {
        for (stencil, dlogit) in ray {
            for (&node, &w) in stencil.nodes.iter().zip(&stencil.weights) {
                let base = node * kcount;
                for (l, d) in dlogit.iter().enumerate() {
                    grad[base + l] += w * d;
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Aabb, VoxelGrid};

    fn constant_fields(sigma: f64, rgb: [f64; 3]) -> (DensityField, ColorField) {
        let b = Aabb::unit_cube();
        let d = DensityField::new(VoxelGrid::new([3, 3, 3], b, 1, vec![sigma; 27]).unwrap()).unwrap();
        let c = ColorField::new(VoxelGrid::new([3, 3, 3], b, 3, rgb.repeat(27)).unwrap()).unwrap();
        (d, c)
    }

    fn axis_camera(size: (usize, usize)) -> Camera {
        Camera::new(
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::zeros(),
            Vec3::y(),
            40f64.to_radians(),
            size,
            (1.0, 3.0),
        )
        .unwrap()
    }

    #[test]
    fn center_ray_is_principal_axis() {
        let cam = Camera::new(
            Vec3::new(0.3, -0.2, 2.0),
            Vec3::new(0.1, 0.4, -0.5),
            Vec3::y(),
            0.8,
            (5, 3),
            (0.5, 4.0),
        )
        .unwrap();
        let rays = generate_rays(&cam).unwrap();
        let center = rays[1 * 5 + 2].dir;
        let axis = (Vec3::from(cam.look_at) - Vec3::from(cam.position)).normalize();
        assert!((center - axis).norm() < 1e-12);
        assert!(rays.iter().all(|r| (r.dir.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn corner_ray_matches_camera_matrix() {
        // Oracle: back-project the corner pixel center through an explicit
        // intrinsics matrix and camera-to-world rotation.
        let cam = Camera::new(
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(0.0, 0.5, 0.0),
            Vec3::new(0.0, 1.0, 0.1),
            1.1,
            (8, 6),
            (0.5, 10.0),
        )
        .unwrap();
        let f = (cam.height as f64 / 2.0) / (cam.vertical_fov / 2.0).tan();
        let (cx, cy) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
        let (px, py) = (0.5, 0.5);
        let cam_dir = Vec3::new((px - cx) / f, -(py - cy) / f, 1.0);
        let z = (Vec3::from(cam.look_at) - Vec3::from(cam.position)).normalize();
        let x = z.cross(&Vec3::from(cam.up)).normalize();
        let y = x.cross(&z);
        let rot = nalgebra::Matrix3::from_columns(&[x, y, z]);
        let want = (rot * cam_dir).normalize();
        let got = generate_rays(&cam).unwrap()[0].dir;
        assert!((got - want).norm() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn degenerate_cameras_are_rejected() {
        let p = Vec3::new(0.0, 0.0, 2.0);
        assert!(Camera::new(p, Vec3::zeros(), Vec3::z(), 0.8, (4, 4), (1.0, 3.0)).is_err());
        assert!(Camera::new(p, p, Vec3::y(), 0.8, (4, 4), (1.0, 3.0)).is_err());
        assert!(Camera::new(p, Vec3::zeros(), Vec3::y(), 0.8, (4, 4), (0.0, 3.0)).is_err());
        assert!(Camera::new(p, Vec3::zeros(), Vec3::y(), 3.2, (4, 4), (1.0, 3.0)).is_err());
    }

    #[test]
    fn zero_density_shows_background() {
        let (d, c) = constant_fields(0.0, [0.3, 0.2, 0.1]);
        let cam = axis_camera((4, 4));
        let rays = generate_rays(&cam).unwrap();
        let samples = camera_samples(&cam, 32, Some(3));
        let img = render_composite(&rays, &samples, &d, &c, [0.1, 0.5, 0.9]).unwrap();
        for px in img.data().chunks(3) {
            assert_eq!(px, [0.1, 0.5, 0.9]);
        }
    }

    #[test]
    fn single_sample_quadrature() {
        let (d, c) = constant_fields(1.0, [1.0, 0.0, 0.0]);
        let ray = Ray {
            origin: Vec3::new(0.0, 0.0, -1.0),
            dir: Vec3::z(),
        };
        // one sample at t = 1 (the origin of the field), δ = far - t = 1
        let samples = RaySamples::from_distances(vec![1.0], 2.0).unwrap();
        let img = render_composite(&[ray], &[samples], &d, &c, [0.0; 3]).unwrap();
        let want = 1.0 - (-1.0f64).exp();
        assert!((img.data()[0] - want).abs() < 1e-15);
        assert!((img.data()[0] - 0.63212).abs() < 1e-5);
        assert_eq!(&img.data()[1..], &[0.0, 0.0]);
    }

    #[test]
    fn opaque_slab_shows_its_color() {
        let (d, c) = constant_fields(500.0, [0.25, 0.5, 0.75]);
        let cam = axis_camera((3, 3));
        let view = render_view(&cam, &d, &c, &CategoryField::single([3, 3, 3], Aabb::unit_cube(), "all").unwrap(), &RenderConfig::default(), false).unwrap();
        let center = view.composite.pixel(1, 1);
        for (got, want) in center.iter().zip([0.25, 0.5, 0.75]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn transmittance_prefix_and_partition() {
        let s = [0.3, 0.0, 1.2, 5.0, 0.01];
        let (w, r) = transmittance_weights(&s);
        assert!((w[0] - (1.0 - (-0.3f64).exp())).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() + r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_recording() {
        let (d, c) = constant_fields(2.0, [0.5; 3]);
        let cat = CategoryField::uniform([3, 3, 3], Aabb::unit_cube(), vec!["a".into(), "b".into()], 0.05).unwrap();
        let view = render_view(&axis_camera((2, 2)), &d, &c, &cat, &RenderConfig::default(), false).unwrap();
        let grads = vec![CategoryGrad::default(), CategoryGrad::default()];
        assert!(matches!(backward_category_render(&view, &cat, &grads), Err(Error::NotRecorded)));
    }

    #[test]
    fn literal_mode_matches_per_sample_for_uniform_probabilities_of_one() {
        // With K = 1 both readings coincide.
        let (d, c) = constant_fields(3.0, [0.2, 0.9, 0.4]);
        let cat = CategoryField::single([3, 3, 3], Aabb::unit_cube(), "all").unwrap();
        let mut config = RenderConfig::default();
        let a = render_view(&axis_camera((3, 3)), &d, &c, &cat, &config, false).unwrap();
        config.transmittance = TransmittanceMode::Literal;
        let b = render_view(&axis_camera((3, 3)), &d, &c, &cat, &config, false).unwrap();
        assert_eq!(a.per_category_rgb[0], b.per_category_rgb[0]);
    }
}
