//! Training of the category field with frozen density and color, and
//! evaluation of how well the resulting sub-fields separate.
//!
//! Each step renders every category from one camera of a fixed orbit,
//! asks the per-category providers for image gradients, carries them back
//! to the logits and takes a plain gradient-descent step.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{CategoryField, ColorField, DensityField, DEFAULT_TEMPERATURE};
use crate::guidance::{csds_grads, GuidanceContext, GuidanceProvider};
use crate::image::{mask_iou, Image};
use crate::renderer::{backward_category_render, render_recomposed, render_view, Camera, RenderConfig};
use crate::Vec3;

/// Which gradient source drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceKind {
    Photometric,
    Mask,
    Dcm,
}

/// Ring of cameras around the scene center looking inward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitSpec {
    pub count: usize,
    pub radius: f64,
    pub azimuth_offset_deg: f64,
    /// Elevations cycled over the cameras in order.
    pub elevations_deg: Vec<f64>,
    pub fov_deg: f64,
    pub image_size: usize,
    /// Half-depth of the near/far interval around the target distance.
    pub depth_extent: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self::training()
    }
}

impl OrbitSpec {
    /// 24 cameras at a fixed 25° elevation.
    pub fn training() -> Self {
        Self {
            count: 24,
            radius: 2.2,
            azimuth_offset_deg: 0.0,
            elevations_deg: vec![25.0],
            fov_deg: 30.0,
            image_size: 64,
            depth_extent: 0.9,
        }
    }

    /// 8 cameras between the training azimuths at alternating 15° and 35°
    /// elevations.
    pub fn held_out() -> Self {
        Self {
            count: 8,
            azimuth_offset_deg: 7.5,
            elevations_deg: vec![15.0, 35.0],
            ..Self::training()
        }
    }

    pub fn cameras(&self, target: Vec3) -> Result<Vec<Camera>> {
        if self.count == 0 || self.elevations_deg.is_empty() || self.image_size == 0 {
            return Err(Error::InvalidConfig("orbit needs cameras, elevations and a size".into()));
        }
        (0..self.count)
            .map(|i| {
                let az = self.azimuth_offset_deg + 360.0 * i as f64 / self.count as f64;
                let el = self.elevations_deg[i % self.elevations_deg.len()];
                Camera::orbit(
                    target,
                    self.radius,
                    az,
                    el,
                    self.fov_deg,
                    (self.image_size, self.image_size),
                    self.depth_extent,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DissectConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub guidance: GuidanceKind,
    pub cameras: OrbitSpec,
    pub eval_cameras: OrbitSpec,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Weight of a squared-difference smoothness penalty on neighboring
    /// logits; 0 disables it.
    pub tv_weight: f64,
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for DissectConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            learning_rate: 0.1,
            temperature: DEFAULT_TEMPERATURE,
            guidance: GuidanceKind::Mask,
            cameras: OrbitSpec::training(),
            eval_cameras: OrbitSpec::held_out(),
            eval_every: 0,
            tv_weight: 0.0,
            render: RenderConfig::default(),
            seed: 0,
        }
    }
}

impl DissectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature {}", self.temperature)));
        }
        if !(self.tv_weight >= 0.0) {
            return Err(Error::InvalidConfig(format!("tv weight {}", self.tv_weight)));
        }
        Ok(())
    }
}

/// One training step: camera used and norm of the logit gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub camera: usize,
    pub grad_norm: f64,
}

/// Quality of a category field on a camera set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub step: usize,
    /// `iou[k][c]`: category `k` on camera `c`.
    pub iou: Vec<Vec<f64>>,
    pub mean_iou: Vec<f64>,
    pub min_iou: Vec<f64>,
    /// Largest per-channel gap between the composite render and the
    /// render of the recomposed density `Σ_k p^k σ`.
    pub composition_max_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DissectReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalEntry>,
    /// Excluded from serialization so reports of identical runs are
    /// byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Evaluation cameras with their reference masks (`masks[c][k]`).
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub cameras: Vec<Camera>,
    pub masks: Vec<Vec<Image>>,
}

/// Per-category IoU of thresholded opacity against `set` plus the
/// composition error.
pub fn evaluate(
    category: &CategoryField,
    density: &DensityField,
    color: &ColorField,
    set: &EvalSet,
    render: &RenderConfig,
    step: usize,
) -> Result<EvalEntry> {
    if set.cameras.len() != set.masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} evaluation cameras with {} mask sets",
            set.cameras.len(),
            set.masks.len()
        )));
    }
    let kcount = category.category_count();
    let per_camera = set
        .cameras
        .iter()
        .zip(&set.masks)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(camera, masks)| {
            if masks.len() != kcount {
                return Err(Error::ShapeMismatch(format!("{} masks for {kcount} categories", masks.len())));
            }
            let view = render_view(camera, density, color, category, render, false)?;
            let recomposed = render_recomposed(camera, density, color, category, render)?;
            let ious = (0..kcount)
                .map(|k| mask_iou(&view.category_mask(k), &masks[k]))
                .collect::<Result<Vec<_>>>()?;
            Ok((ious, view.composite.max_abs_diff(&recomposed)))
        })
        .collect::<Result<Vec<_>>>()?;
    let iou: Vec<Vec<f64>> = (0..kcount)
        .map(|k| per_camera.iter().map(|(ious, _)| ious[k]).collect())
        .collect();
    let mean_iou = iou
        .iter()
        .map(|v| if v.is_empty() { 1.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
        .collect();
    let min_iou = iou.iter().map(|v| v.iter().copied().fold(1.0, f64::min)).collect();
    let composition_max_error = per_camera.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(EvalEntry {
        step,
        iou,
        mean_iou,
        min_iou,
        composition_max_error,
    })
}

/// Adds the gradient of `w Σ (f_a - f_b)²` over axis-neighbor node pairs.
fn add_smoothness_grad(category: &CategoryField, weight: f64, grad: &mut [f64]) {
    let grid = category.grid();
    let [nx, ny, nz] = grid.resolution();
    let k = grid.channels();
    let values = grid.values();
    let strides = [1, nx, nx * ny];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let a = grid.node_index(x, y, z);
                let coords = [x, y, z];
                let dims = [nx, ny, nz];
                for axis in 0..3 {
                    if coords[axis] + 1 == dims[axis] {
                        continue;
                    }
                    let b = a + strides[axis];
                    for c in 0..k {
                        let d = 2.0 * weight * (values[a * k + c] - values[b * k + c]);
                        grad[a * k + c] += d;
                        grad[b * k + c] -= d;
                    }
                }
            }
        }
    }
}

/// Trains `category` against `providers` (one per category). Density and
/// color are only read. Evaluates on `eval` every `eval_every` steps and
/// always after the last step.
pub fn train_necf(
    density: &DensityField,
    color: &ColorField,
    mut category: CategoryField,
    providers: &[Arc<dyn GuidanceProvider>],
    cameras: &[Camera],
    config: &DissectConfig,
    eval: Option<&EvalSet>,
) -> Result<(CategoryField, DissectReport)> {
    config.validate()?;
    let start = Instant::now();
    let kcount = category.category_count();
    if providers.len() != kcount {
        return Err(Error::InvalidConfig(format!(
            "{} guidance providers for {kcount} categories",
            providers.len()
        )));
    }
    if cameras.is_empty() && config.steps > 0 {
        return Err(Error::InvalidConfig("training needs at least one camera".into()));
    }
    let mut report = DissectReport::default();
    for step in 0..config.steps {
        let camera = step % cameras.len();
        let view = render_view(&cameras[camera], density, color, &category, &config.render, true)?;
        let ctx = GuidanceContext {
            camera,
            seed: crate::mix_seed(config.seed, step as u64),
        };
        let grads = csds_grads(providers, &view, &ctx)?;
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step,
                camera,
                detail: format!("image gradient of category {k}"),
            });
        }
        let mut g = backward_category_render(&view, &category, &grads)?;
        if config.tv_weight > 0.0 {
            add_smoothness_grad(&category, config.tv_weight, &mut g);
        }
        if let Some(node) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step,
                camera,
                detail: format!("logit gradient at value index {node}"),
            });
        }
        let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (f, d) in category.grid_mut().values_mut().iter_mut().zip(&g) {
            *f -= config.learning_rate * d;
        }
        report.steps.push(StepRecord { step, camera, grad_norm });
        if let Some(set) = eval {
            let last = step + 1 == config.steps;
            if config.eval_every > 0 && (step + 1) % config.eval_every == 0 && !last {
                report.evals.push(evaluate(&category, density, color, set, &config.render, step + 1)?);
            }
        }
    }
    if let Some(set) = eval {
        report.evals.push(evaluate(&category, density, color, set, &config.render, config.steps)?);
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((category, report))
}
