//! A toy concept-conditioned diffusion model and masked concept mining.
//!
//! The denoiser is a small per-pixel MLP. Each pixel sees its noisy RGB
//! value, Fourier features of its image coordinates, the concept
//! embedding and a timestep embedding, and predicts the velocity
//! `v = sqrt(ᾱ_t) ε - sqrt(1 - ᾱ_t) x0`. The predicted noise is
//! `ε̂ = sqrt(1 - ᾱ_t) x_t + sqrt(ᾱ_t) v̂`, which equals `ε` when `v̂ = v`.
//!
//! Mining fits concept embeddings (stage 1) and then embeddings plus the
//! network (stage 2) to rendered views under per-concept masks.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const DCM_MAGIC: &[u8; 4] = b"DCM\n";

/// Linear-beta noise schedule. Step `t` runs from 1 to `step_count`;
/// `ᾱ_0` is taken to be 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(step_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let valid = |b: f64| b > 0.0 && b < 1.0;
        if step_count == 0 || !valid(beta_start) || !valid(beta_end) || beta_end < beta_start {
            return Err(Error::InvalidConfig(format!(
                "noise schedule needs steps > 0 and 0 < beta_start <= beta_end < 1, got {step_count}, {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..step_count)
            .map(|i| {
                let f = if step_count == 1 { 0.0 } else { i as f64 / (step_count - 1) as f64 };
                beta_start + (beta_end - beta_start) * f
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    pub fn step_count(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    /// `ᾱ_t` for `0 <= t <= step_count`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.step_count() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::IndexOutOfRange {
                what: "diffusion step",
                index: t,
                len: self.step_count() + 1,
            }),
        }
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`.
pub fn forward_diffuse(x0: &Image, t: usize, noise: &Image, schedule: &NoiseSchedule) -> Result<Image> {
    x0.check_same_shape(noise, "forward diffusion")?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(x, e)| a * x + b * e).collect();
    Image::from_vec(x0.width(), x0.height(), x0.channels(), data)
}

/// Image of independent standard normal draws.
pub fn standard_normal_image(width: usize, height: usize, channels: usize, rng: &mut impl Rng) -> Image {
    let data = (0..width * height * channels).map(|_| rng.sample(StandardNormal)).collect();
    Image::from_vec(width, height, channels, data).expect("sized")
}

fn check_mask(image: &Image, mask: &Image) -> Result<()> {
    if mask.channels() != 1 || mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{}x{} for image {}x{}",
            mask.width(),
            mask.height(),
            mask.channels(),
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Masked noise-prediction loss `(1/HW) Σ_pixels ‖M ⊙ (ε̂ - ε)‖²` and its
/// gradient with respect to `ε̂`.
pub fn masked_loss_grad(predicted: &Image, noise: &Image, mask: &Image) -> Result<(f64, Image)> {
    predicted.check_same_shape(noise, "masked loss")?;
    check_mask(predicted, mask)?;
    let c = predicted.channels();
    let norm = 1.0 / predicted.pixel_count() as f64;
    let mut grad = Image::new(predicted.width(), predicted.height(), c);
    let mut loss = 0.0;
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for ch in 0..c {
            let j = i * c + ch;
            let r = m * (predicted.data()[j] - noise.data()[j]);
            loss += r * r * norm;
            grad.data_mut()[j] = 2.0 * m * r * norm;
        }
    }
    Ok((loss, grad))
}

pub fn masked_loss(predicted: &Image, noise: &Image, mask: &Image) -> Result<f64> {
    Ok(masked_loss_grad(predicted, noise, mask)?.0)
}

/// Learned conditioning vector for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbedding {
    pub concept: usize,
    pub name: String,
    pub vector: Vec<f64>,
}

/// Architecture and schedule of the toy denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub embedding_dim: usize,
    pub hidden: [usize; 2],
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub image_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            hidden: [32, 32],
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            image_size: 32,
        }
    }
}

/// Fourier frequencies (in multiples of π) applied to each image coordinate.
const COORD_FREQUENCIES: [f64; 3] = [1.0, 2.0, 4.0];
const COORD_FEATURES: usize = 2 + 4 * COORD_FREQUENCIES.len();
const TIME_FEATURES: usize = 2;

fn coord_features(x: usize, y: usize, width: usize, height: usize) -> [f64; COORD_FEATURES] {
    let u = 2.0 * (x as f64 + 0.5) / width as f64 - 1.0;
    let v = 2.0 * (y as f64 + 0.5) / height as f64 - 1.0;
    let mut f = [0.0; COORD_FEATURES];
    f[0] = u;
    f[1] = v;
    for (i, w) in COORD_FREQUENCIES.iter().enumerate() {
        let (su, cu) = (std::f64::consts::PI * w * u).sin_cos();
        let (sv, cv) = (std::f64::consts::PI * w * v).sin_cos();
        f[2 + 4 * i..6 + 4 * i].copy_from_slice(&[su, cu, sv, cv]);
    }
    f
}

/// Per-pixel MLP `v̂ = W3 tanh(W2 tanh(W1 φ + b1) + b2) + b3` with all
/// parameters in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    params: Vec<f64>,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    inputs: usize,
    h1: usize,
    h2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

impl Layout {
    fn new(config: &DenoiserConfig) -> Self {
        let inputs = 3 + COORD_FEATURES + config.embedding_dim + TIME_FEATURES;
        let [h1, h2] = config.hidden;
        let w1 = 0;
        let b1 = w1 + h1 * inputs;
        let w2 = b1 + h1;
        let b2 = w2 + h2 * h1;
        let w3 = b2 + h2;
        let b3 = w3 + 3 * h2;
        Self {
            inputs,
            h1,
            h2,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            total: b3 + 3,
        }
    }
}

/// Forward activations of one pixel, kept for backpropagation.
struct PixelTrace {
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl Denoiser {
    /// Randomly initialized network (normal weights with variance
    /// `1 / fan_in`, zero biases).
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        if config.embedding_dim == 0 || config.hidden.contains(&0) || config.image_size == 0 {
            return Err(Error::InvalidConfig("denoiser dimensions must be positive".into()));
        }
        let schedule = NoiseSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let mut fill = |start: usize, count: usize, fan_in: usize| {
            let scale = (1.0 / fan_in as f64).sqrt();
            for p in &mut params[start..start + count] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(layout.w1, layout.h1 * layout.inputs, layout.inputs);
        fill(layout.w2, layout.h2 * layout.h1, layout.h1);
        fill(layout.w3, 3 * layout.h2, layout.h2);
        Ok(Self {
            config,
            schedule,
            params,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        let schedule = NoiseSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let expected = Layout::new(&config).total;
        if params.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{} denoiser parameters, expected {expected}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("denoiser parameters"));
        }
        Ok(Self {
            config,
            schedule,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_inputs(&self, x_t: &Image, embedding: &[f64], t: usize) -> Result<(f64, f64)> {
        if x_t.channels() != 3 {
            return Err(Error::ShapeMismatch(format!("denoiser expects RGB, got {} channels", x_t.channels())));
        }
        if embedding.len() != self.config.embedding_dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding of length {}, expected {}",
                embedding.len(),
                self.config.embedding_dim
            )));
        }
        if t == 0 {
            return Err(Error::IndexOutOfRange {
                what: "denoiser step",
                index: 0,
                len: self.schedule.step_count() + 1,
            });
        }
        let ab = self.schedule.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    fn pixel_forward(&self, layout: &Layout, input: Vec<f64>, out: &mut [f64; 3]) -> PixelTrace {
        let p = &self.params;
        let h1: Vec<f64> = (0..layout.h1)
            .map(|j| {
                let row = &p[layout.w1 + j * layout.inputs..layout.w1 + (j + 1) * layout.inputs];
                (p[layout.b1 + j] + dot(row, &input)).tanh()
            })
            .collect();
        let h2: Vec<f64> = (0..layout.h2)
            .map(|j| {
                let row = &p[layout.w2 + j * layout.h1..layout.w2 + (j + 1) * layout.h1];
                (p[layout.b2 + j] + dot(row, &h1)).tanh()
            })
            .collect();
        for (c, o) in out.iter_mut().enumerate() {
            let row = &p[layout.w3 + c * layout.h2..layout.w3 + (c + 1) * layout.h2];
            *o = p[layout.b3 + c] + dot(row, &h2);
        }
        PixelTrace { input, h1, h2 }
    }

    fn pixel_input(&self, x_t: &Image, x: usize, y: usize, embedding: &[f64], t: usize) -> Vec<f64> {
        let tau = t as f64 / self.schedule.step_count() as f64;
        let (st, ct) = (std::f64::consts::PI * tau).sin_cos();
        let mut input = Vec::with_capacity(3 + COORD_FEATURES + embedding.len() + TIME_FEATURES);
        input.extend_from_slice(x_t.pixel(x, y));
        input.extend_from_slice(&coord_features(x, y, x_t.width(), x_t.height()));
        input.extend_from_slice(embedding);
        input.extend_from_slice(&[st, ct]);
        input
    }

    fn run(&self, x_t: &Image, embedding: &[f64], t: usize, keep: bool) -> Result<(Image, Vec<PixelTrace>)> {
        let (sa, sb) = self.check_inputs(x_t, embedding, t)?;
        let layout = Layout::new(&self.config);
        let mut eps = Image::new(x_t.width(), x_t.height(), 3);
        let mut traces = Vec::with_capacity(if keep { x_t.pixel_count() } else { 0 });
        for y in 0..x_t.height() {
            for x in 0..x_t.width() {
                let mut v = [0.0; 3];
                let trace = self.pixel_forward(&layout, self.pixel_input(x_t, x, y, embedding, t), &mut v);
                let xt = x_t.pixel(x, y).to_vec();
                for (c, e) in eps.pixel_mut(x, y).iter_mut().enumerate() {
                    *e = sb * xt[c] + sa * v[c];
                }
                if keep {
                    traces.push(trace);
                }
            }
        }
        Ok((eps, traces))
    }

    /// Predicted noise `ε̂(x_t, y, t)` for `1 <= t <= step_count`.
    pub fn predict_noise(&self, x_t: &Image, embedding: &[f64], t: usize) -> Result<Image> {
        Ok(self.run(x_t, embedding, t, false)?.0)
    }

    /// Gradients of a scalar loss with respect to the parameters and the
    /// embedding, given `grad_eps = ∂L/∂ε̂` at the same inputs.
    pub fn backward(&self, x_t: &Image, embedding: &[f64], t: usize, grad_eps: &Image) -> Result<(Vec<f64>, Vec<f64>)> {
        x_t.check_same_shape(grad_eps, "denoiser backward")?;
        let (sa, _) = self.check_inputs(x_t, embedding, t)?;
        let (_, traces) = self.run(x_t, embedding, t, true)?;
        let layout = Layout::new(&self.config);
        let p = &self.params;
        let mut gp = vec![0.0; layout.total];
        let mut ge = vec![0.0; embedding.len()];
        let emb_start = 3 + COORD_FEATURES;
        let mut g_h1 = vec![0.0; layout.h1];
        let mut g_h2 = vec![0.0; layout.h2];
        for (i, trace) in traces.iter().enumerate() {
            let g = &grad_eps.data()[i * 3..i * 3 + 3];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            // ε̂ = sb x_t + sa v̂
            let g_out: Vec<f64> = g.iter().map(|v| sa * v).collect();
            g_h2.fill(0.0);
            for (c, &go) in g_out.iter().enumerate() {
                gp[layout.b3 + c] += go;
                for j in 0..layout.h2 {
                    gp[layout.w3 + c * layout.h2 + j] += go * trace.h2[j];
                    g_h2[j] += go * p[layout.w3 + c * layout.h2 + j];
                }
            }
            g_h1.fill(0.0);
            for j in 0..layout.h2 {
                let ga = g_h2[j] * (1.0 - trace.h2[j] * trace.h2[j]);
                if ga == 0.0 {
                    continue;
                }
                gp[layout.b2 + j] += ga;
                let row = layout.w2 + j * layout.h1;
                for m in 0..layout.h1 {
                    gp[row + m] += ga * trace.h1[m];
                    g_h1[m] += ga * p[row + m];
                }
            }
            for j in 0..layout.h1 {
                let ga = g_h1[j] * (1.0 - trace.h1[j] * trace.h1[j]);
                if ga == 0.0 {
                    continue;
                }
                gp[layout.b1 + j] += ga;
                let row = layout.w1 + j * layout.inputs;
                for (m, &inp) in trace.input.iter().enumerate() {
                    gp[row + m] += ga * inp;
                }
                for (m, e) in ge.iter_mut().enumerate() {
                    *e += ga * p[row + emb_start + m];
                }
            }
        }
        Ok((gp, ge))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Frozen result of concept mining: the denoiser plus one embedding per
/// concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    pub denoiser: Denoiser,
    pub embeddings: Vec<ConceptEmbedding>,
}

impl ConceptModel {
    /// Fresh model: random network and `N(0, 1)` embeddings.
    pub fn init(config: DenoiserConfig, names: &[String], seed: u64) -> Result<Self> {
        let denoiser = Denoiser::new(config, crate::mix_seed(seed, 1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(seed, 2));
        let dim = denoiser.config().embedding_dim;
        let embeddings = names
            .iter()
            .enumerate()
            .map(|(concept, name)| ConceptEmbedding {
                concept,
                name: name.clone(),
                vector: (0..dim).map(|_| rng.sample(StandardNormal)).collect(),
            })
            .collect();
        Ok(Self { denoiser, embeddings })
    }

    pub fn concept_count(&self) -> usize {
        self.embeddings.len()
    }

    pub fn embedding(&self, k: usize) -> Result<&[f64]> {
        self.embeddings
            .get(k)
            .map(|e| e.vector.as_slice())
            .ok_or(Error::IndexOutOfRange {
                what: "concept",
                index: k,
                len: self.embeddings.len(),
            })
    }

    /// Predicted noise for concept `k`.
    pub fn predict_noise(&self, x_t: &Image, k: usize, t: usize) -> Result<Image> {
        self.denoiser.predict_noise(x_t, self.embedding(k)?, t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DcmHeader {
            denoiser: self.denoiser.config.clone(),
            schedule: "linear".into(),
            param_count: self.denoiser.param_count(),
            concepts: self.embeddings.iter().map(|e| e.name.clone()).collect(),
            dtype: "f32".into(),
            endianness: "little".into(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(DCM_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let values = self
            .denoiser
            .params
            .iter()
            .chain(self.embeddings.iter().flat_map(|e| &e.vector));
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(DCM_MAGIC.as_slice())
            .ok_or_else(|| Error::format("dcm", "bad magic"))?;
        let len = rest
            .get(..4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::format("dcm", "truncated header length"))?;
        let json = rest
            .get(4..4 + len)
            .ok_or_else(|| Error::format("dcm", "truncated header"))?;
        let header: DcmHeader = serde_json::from_slice(json)?;
        if header.dtype != "f32" || header.endianness != "little" || header.schedule != "linear" {
            return Err(Error::format("dcm", "unsupported dtype, endianness or schedule"));
        }
        let dim = header.denoiser.embedding_dim;
        let count = header.param_count + dim * header.concepts.len();
        let data = &rest[4 + len..];
        if data.len() != count * 4 {
            return Err(Error::format(
                "dcm",
                format!("expected {} data bytes, found {}", count * 4, data.len()),
            ));
        }
        let mut values = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let params: Vec<f64> = values.by_ref().take(header.param_count).collect();
        let denoiser = Denoiser::from_params(header.denoiser, params)?;
        let embeddings = header
            .concepts
            .into_iter()
            .enumerate()
            .map(|(concept, name)| ConceptEmbedding {
                concept,
                name,
                vector: values.by_ref().take(dim).collect(),
            })
            .collect();
        Ok(Self { denoiser, embeddings })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DcmHeader {
    denoiser: DenoiserConfig,
    schedule: String,
    param_count: usize,
    concepts: Vec<String>,
    dtype: String,
    endianness: String,
}

/// Two-stage mining schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 400,
            stage2_steps: 100,
            stage1_lr: 5e-4,
            stage2_lr: 2e-6,
            seed: 0,
        }
    }
}

/// Training views with one binary mask per concept per view.
#[derive(Debug, Clone)]
pub struct MiningData {
    pub views: Vec<Image>,
    /// `masks[k][v]` is the mask of concept `k` in view `v`.
    pub masks: Vec<Vec<Image>>,
}

impl MiningData {
    fn validate(&self, concepts: usize) -> Result<()> {
        if self.masks.len() != concepts {
            return Err(Error::InvalidConfig(format!(
                "{} mask sets for {concepts} concepts",
                self.masks.len()
            )));
        }
        for (k, set) in self.masks.iter().enumerate() {
            if set.len() != self.views.len() {
                return Err(Error::ShapeMismatch(format!(
                    "concept {k} has {} masks for {} views",
                    set.len(),
                    self.views.len()
                )));
            }
            for (mask, view) in set.iter().zip(&self.views) {
                check_mask(view, mask)?;
                if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
                    return Err(Error::InvalidConfig(format!("mask of concept {k} is not binary")));
                }
            }
            if set.iter().all(|m| m.data().iter().all(|&v| v == 0.0)) {
                return Err(Error::InvalidConfig(format!("concept {k} has no masked pixels in any view")));
            }
        }
        Ok(())
    }

    /// Views in which concept `k` is visible.
    fn views_of(&self, k: usize) -> Vec<usize> {
        (0..self.views.len())
            .filter(|&v| self.masks[k][v].data().iter().any(|&m| m != 0.0))
            .collect()
    }
}

/// Mining output: the frozen model and the per-step training loss.
#[derive(Debug, Clone)]
pub struct MiningResult {
    pub model: ConceptModel,
    pub loss_history: Vec<f64>,
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// One masked-loss draw: loss and gradients for concept `k` on view `v`.
fn draw_loss(
    model: &ConceptModel,
    data: &MiningData,
    k: usize,
    cond: usize,
    v: usize,
    rng: &mut ChaCha8Rng,
    want_grad: bool,
) -> Result<(f64, Option<(Vec<f64>, Vec<f64>)>)> {
    let schedule = model.denoiser.schedule();
    let t = rng.random_range(1..=schedule.step_count());
    let x0 = &data.views[v];
    let noise = standard_normal_image(x0.width(), x0.height(), x0.channels(), rng);
    let x_t = forward_diffuse(x0, t, &noise, schedule)?;
    let emb = model.embedding(cond)?;
    let pred = model.denoiser.predict_noise(&x_t, emb, t)?;
    let (loss, g) = masked_loss_grad(&pred, &noise, &data.masks[k][v])?;
    let grads = if want_grad {
        Some(model.denoiser.backward(&x_t, emb, t, &g)?)
    } else {
        None
    };
    Ok((loss, grads))
}

/// Mean masked loss of concept `k`'s region while conditioning on concept
/// `cond`, over `draws` seeded (view, t, ε) samples per visible view.
pub fn evaluate_masked_loss(
    model: &ConceptModel,
    data: &MiningData,
    k: usize,
    cond: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    data.validate(model.concept_count())?;
    let views = data.views_of(k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for &v in &views {
        for _ in 0..draws {
            total += draw_loss(model, data, k, cond, v, &mut rng, false)?.0;
        }
    }
    Ok(total / (views.len() * draws).max(1) as f64)
}

/// Two-stage masked concept mining. Stage 1 updates only the embeddings;
/// stage 2 updates embeddings and network jointly. Each step cycles to the
/// next concept, picks one of its visible views and draws `(t, ε)`.
pub fn mine_concepts(
    data: &MiningData,
    names: &[String],
    denoiser: DenoiserConfig,
    config: &MiningConfig,
) -> Result<MiningResult> {
    if !(config.stage1_lr > 0.0 && config.stage2_lr > 0.0) {
        return Err(Error::InvalidConfig("mining learning rates must be positive".into()));
    }
    let mut model = ConceptModel::init(denoiser, names, config.seed)?;
    data.validate(model.concept_count())?;
    for view in &data.views {
        if view.width() != model.denoiser.config().image_size || view.height() != model.denoiser.config().image_size {
            return Err(Error::ShapeMismatch(format!(
                "mining view {}x{}, denoiser expects {}",
                view.width(),
                view.height(),
                model.denoiser.config().image_size
            )));
        }
    }
    let visible: Vec<Vec<usize>> = (0..names.len()).map(|k| data.views_of(k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::mix_seed(config.seed, 3));
    let dim = model.denoiser.config().embedding_dim;
    let kcount = names.len();
    let mut history = Vec::with_capacity(config.stage1_steps + config.stage2_steps);

    let mut emb_opt: Vec<Adam> = (0..kcount).map(|_| Adam::new(config.stage1_lr, dim)).collect();
    for step in 0..config.stage1_steps {
        let k = step % kcount;
        let v = visible[k][rng.random_range(0..visible[k].len())];
        let (loss, grads) = draw_loss(&model, data, k, k, v, &mut rng, true)?;
        let (_, ge) = grads.expect("requested");
        emb_opt[k].update(model.embeddings[k].vector.iter_mut(), &ge);
        history.push(loss);
    }

    let mut emb_opt: Vec<Adam> = (0..kcount).map(|_| Adam::new(config.stage2_lr, dim)).collect();
    let mut net_opt = Adam::new(config.stage2_lr, model.denoiser.param_count());
    for step in 0..config.stage2_steps {
        let k = step % kcount;
        let v = visible[k][rng.random_range(0..visible[k].len())];
        let (loss, grads) = draw_loss(&model, data, k, k, v, &mut rng, true)?;
        let (gp, ge) = grads.expect("requested");
        emb_opt[k].update(model.embeddings[k].vector.iter_mut(), &ge);
        net_opt.update(model.denoiser.params_mut().iter_mut(), &gp);
        history.push(loss);
    }
    if model.denoiser.params().iter().any(|p| !p.is_finite())
        || model.embeddings.iter().any(|e| e.vector.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("mined concept model"));
    }
    Ok(MiningResult {
        model,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            embedding_dim: 4,
            hidden: [6, 5],
            diffusion_steps: 10,
            image_size: 4,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn schedule_sanity() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        for t in 1..=100 {
            let ab = s.alpha_bar(t).unwrap();
            assert!(ab < s.alpha_bar(t - 1).unwrap());
            assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-12);
        }
        assert!(s.alpha_bar(101).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = Image::filled(2, 2, 3, 0.7);
        let eps = Image::filled(2, 2, 3, 0.3);
        assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap(), x0);
        assert!(forward_diffuse(&x0, 101, &eps, &s).is_err());

        // ᾱ = 0.25 with a single step of beta 0.75
        let quarter = NoiseSchedule::linear(1, 0.75, 0.75).unwrap();
        let ones = Image::filled(3, 2, 1, 1.0);
        let xt = forward_diffuse(&ones, 1, &Image::new(3, 2, 1), &quarter).unwrap();
        assert!(xt.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn forward_diffuse_variance() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let t = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = standard_normal_image(100, 100, 1, &mut rng);
        let xt = forward_diffuse(&Image::new(100, 100, 1), t, &noise, &s).unwrap();
        let n = xt.data().len() as f64;
        let mean = xt.data().iter().sum::<f64>() / n;
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 1.0 - s.alpha_bar(t).unwrap();
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn masked_loss_examples() {
        let pred = Image::from_vec(2, 1, 1, vec![1.0, 1.0]).unwrap();
        let eps = Image::new(2, 1, 1);
        let mask = Image::from_vec(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let (loss, grad) = masked_loss_grad(&pred, &eps, &mask).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grad.data()[1], 0.0);

        let (zero, g0) = masked_loss_grad(&pred, &eps, &Image::new(2, 1, 1)).unwrap();
        assert_eq!(zero, 0.0);
        assert_eq!(g0.max_abs(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = standard_normal_image(3, 3, 3, &mut rng);
        let b = standard_normal_image(3, 3, 3, &mut rng);
        let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 9.0;
        let full = masked_loss(&a, &b, &Image::filled(3, 3, 1, 1.0)).unwrap();
        assert!((full - mse).abs() < 1e-12);
        assert!(masked_loss(&a, &Image::new(2, 3, 3), &Image::new(3, 3, 1)).is_err());
    }

    #[test]
    fn predict_noise_is_deterministic_and_shaped() {
        for size in [4, 8, 32] {
            let cfg = DenoiserConfig {
                image_size: size,
                ..DenoiserConfig::default()
            };
            let model = ConceptModel::init(cfg, &["a".into(), "b".into()], 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = standard_normal_image(size, size, 3, &mut rng);
            let e1 = model.predict_noise(&x, 1, 17).unwrap();
            let e2 = model.predict_noise(&x, 1, 17).unwrap();
            assert_eq!(e1, e2);
            assert!(e1.same_shape(&x));
            assert!(e1.is_finite());
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let cfg = small_config();
        let mut den = Denoiser::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x_t = standard_normal_image(4, 4, 3, &mut rng);
        let eps = standard_normal_image(4, 4, 3, &mut rng);
        let mut mask = Image::new(4, 4, 1);
        for (i, m) in mask.data_mut().iter_mut().enumerate() {
            *m = (i % 3 != 0) as u8 as f64;
        }
        let emb: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let t = 4;
        let loss_at = |d: &Denoiser, e: &[f64]| {
            masked_loss(&d.predict_noise(&x_t, e, t).unwrap(), &eps, &mask).unwrap()
        };
        let (_, g) = masked_loss_grad(&den.predict_noise(&x_t, &emb, t).unwrap(), &eps, &mask).unwrap();
        let (gp, ge) = den.backward(&x_t, &emb, t, &g).unwrap();
        let h = 1e-6;
        for i in (0..den.param_count()).step_by(7) {
            let orig = den.params[i];
            den.params[i] = orig + h;
            let up = loss_at(&den, &emb);
            den.params[i] = orig - h;
            let down = loss_at(&den, &emb);
            den.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - gp[i]).abs() <= 1e-3 * fd.abs().max(1e-4), "param {i}: {fd} vs {}", gp[i]);
        }
        for i in 0..emb.len() {
            let mut e = emb.clone();
            e[i] += h;
            let up = loss_at(&den, &e);
            e[i] -= 2.0 * h;
            let down = loss_at(&den, &e);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - ge[i]).abs() <= 1e-3 * fd.abs().max(1e-4));
        }
    }

    fn toy_data() -> MiningData {
        // left half red (concept 0), right half blue (concept 1)
        let mut view = Image::filled(4, 4, 3, 1.0);
        let mut m0 = Image::new(4, 4, 1);
        let mut m1 = Image::new(4, 4, 1);
        for y in 0..4 {
            for x in 0..4 {
                let (px, m) = if x < 2 { ([0.9, 0.1, 0.1], &mut m0) } else { ([0.1, 0.1, 0.9], &mut m1) };
                view.pixel_mut(x, y).copy_from_slice(&px);
                m.pixel_mut(x, y)[0] = 1.0;
            }
        }
        MiningData {
            views: vec![view],
            masks: vec![vec![m0], vec![m1]],
        }
    }

    #[test]
    fn zero_steps_and_stage_one_freeze() {
        let names = vec!["a".to_string(), "b".to_string()];
        let data = toy_data();
        let init = ConceptModel::init(small_config(), &names, 7).unwrap();
        let zero = MiningConfig {
            stage1_steps: 0,
            stage2_steps: 0,
            seed: 7,
            ..MiningConfig::default()
        };
        assert_eq!(mine_concepts(&data, &names, small_config(), &zero).unwrap().model, init);

        let stage1 = MiningConfig {
            stage1_steps: 20,
            ..zero.clone()
        };
        let mined = mine_concepts(&data, &names, small_config(), &stage1).unwrap().model;
        assert_eq!(mined.denoiser.params(), init.denoiser.params());
        assert_ne!(mined.embeddings, init.embeddings);
    }

    #[test]
    fn missing_mask_is_an_error() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut data = toy_data();
        data.masks.pop();
        assert!(mine_concepts(&data, &names, small_config(), &MiningConfig::default()).is_err());
        let mut data = toy_data();
        data.masks[1][0] = Image::new(4, 4, 1);
        assert!(mine_concepts(&data, &names, small_config(), &MiningConfig::default()).is_err());
    }

    #[test]
    fn dcm_roundtrip() {
        let model = ConceptModel::init(small_config(), &["a".into(), "b".into()], 1).unwrap();
        let back = ConceptModel::from_bytes(&model.to_bytes().unwrap()).unwrap();
        assert_eq!(back.embeddings.len(), 2);
        assert_eq!(back.denoiser.config(), model.denoiser.config());
        for (a, b) in back.denoiser.params().iter().zip(model.denoiser.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = model.to_bytes().unwrap();
        assert!(ConceptModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ConceptModel::from_bytes(b"XXXX").is_err());
    }
}
