//! Per-category image-space gradients.
//!
//! Every category gets its own provider. A provider looks only at its own
//! category's render and returns `∂L/∂image`, which the renderer then
//! carries back to the category logits. The score-distillation provider
//! returns `w(t) (ε̂(x_t; y_k, t) - ε)` from the mined toy denoiser; the
//! photometric and mask providers are ground-truth oracles.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::renderer::{CategoryGrad, RenderedView};
use crate::toydiffusion::{forward_diffuse, standard_normal_image, ConceptModel, NoiseSchedule};

/// Weighting `w(t)` of the score-distillation residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSchedule {
    Constant(f64),
    OneMinusAlphaBar,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self::Constant(1.0)
    }
}

impl WeightSchedule {
    pub fn weight(&self, t: usize, schedule: &NoiseSchedule) -> Result<f64> {
        let w = match *self {
            Self::Constant(w) => w,
            Self::OneMinusAlphaBar => 1.0 - schedule.alpha_bar(t)?,
        };
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidConfig(format!("weight {w} at step {t}")));
        }
        Ok(w)
    }
}

/// Timestep range (as fractions of the step count) and weighting used by
/// score distillation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdsConfig {
    pub t_range: [f64; 2],
    pub weight: WeightSchedule,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            t_range: [0.02, 0.98],
            weight: WeightSchedule::default(),
        }
    }
}

impl SdsConfig {
    /// Inclusive integer step bounds.
    pub fn step_bounds(&self, step_count: usize) -> Result<(usize, usize)> {
        let [lo, hi] = self.t_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!("timestep range [{lo}, {hi}]")));
        }
        let n = step_count as f64;
        let lo = ((lo * n).round() as usize).max(1);
        let hi = ((hi * n).round() as usize).min(step_count);
        if lo > hi {
            return Err(Error::InvalidConfig(format!("empty timestep range {lo}..={hi}")));
        }
        Ok((lo, hi))
    }
}

/// `rendered - target`, the gradient of `½‖rendered - target‖²`.
pub fn photometric_grad(rendered: &Image, target: &Image) -> Result<Image> {
    rendered.check_same_shape(target, "photometric gradient")?;
    let data = rendered.data().iter().zip(target.data()).map(|(r, t)| r - t).collect();
    Image::from_vec(rendered.width(), rendered.height(), rendered.channels(), data)
}

/// One score-distillation gradient for `image` under concept `k`. The
/// denoiser is treated as a constant, so no Jacobian of it is taken.
pub fn sds_grad(model: &ConceptModel, k: usize, image: &Image, config: &SdsConfig, seed: u64) -> Result<Image> {
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidConfig("score distillation input outside [0, 1]".into()));
    }
    let schedule = model.denoiser.schedule();
    let (lo, hi) = config.step_bounds(schedule.step_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(lo..=hi);
    let w = config.weight.weight(t, schedule)?;
    let noise = standard_normal_image(image.width(), image.height(), image.channels(), &mut rng);
    let x_t = forward_diffuse(image, t, &noise, schedule)?;
    let predicted = model.predict_noise(&x_t, k, t)?;
    let data = predicted.data().iter().zip(noise.data()).map(|(p, e)| w * (p - e)).collect();
    Image::from_vec(image.width(), image.height(), image.channels(), data)
}

/// Per-call inputs shared by all categories of one training step.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceContext {
    /// Index into the training camera list.
    pub camera: usize,
    pub seed: u64,
}

/// Gradient source for one category.
pub trait GuidanceProvider: Send + Sync {
    /// `∂L/∂(rgb, opacity)` for this category's render.
    fn grad(&self, rgb: &Image, opacity: &Image, ctx: &GuidanceContext) -> Result<CategoryGrad>;
}

fn target_for<'a>(targets: &'a [Image], ctx: &GuidanceContext) -> Result<&'a Image> {
    targets.get(ctx.camera).ok_or(Error::IndexOutOfRange {
        what: "guidance camera",
        index: ctx.camera,
        len: targets.len(),
    })
}

/// Oracle pulling the category RGB render toward a per-camera target.
#[derive(Debug, Clone)]
pub struct PhotometricProvider {
    pub targets: Vec<Image>,
}

impl GuidanceProvider for PhotometricProvider {
    fn grad(&self, rgb: &Image, _opacity: &Image, ctx: &GuidanceContext) -> Result<CategoryGrad> {
        Ok(CategoryGrad {
            rgb: Some(photometric_grad(rgb, target_for(&self.targets, ctx)?)?),
            opacity: None,
        })
    }
}

/// Oracle pulling the category opacity toward a per-camera silhouette,
/// the gradient of `½‖opacity - silhouette‖²`.
#[derive(Debug, Clone)]
pub struct MaskProvider {
    pub silhouettes: Vec<Image>,
}

impl GuidanceProvider for MaskProvider {
    fn grad(&self, _rgb: &Image, opacity: &Image, ctx: &GuidanceContext) -> Result<CategoryGrad> {
        Ok(CategoryGrad {
            rgb: None,
            opacity: Some(photometric_grad(opacity, target_for(&self.silhouettes, ctx)?)?),
        })
    }
}

/// Score distillation through the mined toy denoiser. Renders are area
/// downsampled to the denoiser resolution and the gradient is carried
/// back with the downsampling adjoint.
#[derive(Debug, Clone)]
pub struct DcmProvider {
    pub model: Arc<ConceptModel>,
    pub concept: usize,
    pub sds: SdsConfig,
}

impl GuidanceProvider for DcmProvider {
    fn grad(&self, rgb: &Image, _opacity: &Image, ctx: &GuidanceContext) -> Result<CategoryGrad> {
        let size = self.model.denoiser.config().image_size;
        if rgb.width() != rgb.height() || rgb.width() % size != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} render is not a multiple of the {size}x{size} denoiser input",
                rgb.width(),
                rgb.height()
            )));
        }
        let factor = rgb.width() / size;
        let small = rgb.downsample_area(factor)?;
        // keyed by concept, not by position, so reordering categories
        // reorders the draws with them
        let seed = crate::mix_seed(ctx.seed, self.concept as u64 + 1);
        let g = sds_grad(&self.model, self.concept, &small, &self.sds, seed)?;
        Ok(CategoryGrad {
            rgb: Some(g.downsample_adjoint(factor)),
            opacity: None,
        })
    }
}

/// One gradient per category, category `k` computed from category `k`'s
/// render only.
pub fn csds_grads(
    providers: &[Arc<dyn GuidanceProvider>],
    view: &RenderedView,
    ctx: &GuidanceContext,
) -> Result<Vec<CategoryGrad>> {
    let kcount = view.category_count();
    if providers.len() != kcount {
        return Err(Error::InvalidConfig(format!(
            "{} guidance providers for {kcount} categories",
            providers.len()
        )));
    }
    providers
        .iter()
        .enumerate()
        .map(|(k, p)| p.grad(&view.per_category_rgb[k], &view.per_category_opacity[k], ctx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydiffusion::DenoiserConfig;

    fn rand_image(seed: u64, w: usize, h: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn view_from(rgb: Vec<Image>, opacity: Vec<Image>) -> RenderedView {
        RenderedView {
            composite: rgb[0].clone(),
            per_category_rgb: rgb,
            per_category_opacity: opacity,
            background: [1.0; 3],
            tape: None,
        }
    }

    fn model() -> Arc<ConceptModel> {
        let cfg = DenoiserConfig {
            image_size: 8,
            ..DenoiserConfig::default()
        };
        Arc::new(ConceptModel::init(cfg, &["a".into(), "b".into()], 4).unwrap())
    }

    #[test]
    fn photometric_examples() {
        let t = rand_image(1, 3, 2, 3);
        assert_eq!(photometric_grad(&t, &t).unwrap().max_abs(), 0.0);
        let shifted = Image::from_vec(3, 2, 3, t.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let g = photometric_grad(&shifted, &t).unwrap();
        assert!(g.data().iter().all(|v| (v - 0.1).abs() < 1e-12));
        assert!(photometric_grad(&t, &Image::new(2, 2, 3)).is_err());
    }

    #[test]
    fn photometric_matches_finite_differences() {
        let r = rand_image(2, 4, 3, 3);
        let t = rand_image(3, 4, 3, 3);
        let loss = |x: &Image| 0.5 * x.data().iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let g = photometric_grad(&r, &t).unwrap();
        let h = 1e-6;
        for i in 0..r.data().len() {
            let mut up = r.clone();
            up.data_mut()[i] += h;
            let mut down = r.clone();
            down.data_mut()[i] -= h;
            let fd = (loss(&up) - loss(&down)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn sds_is_deterministic_and_bounded() {
        let m = model();
        let x = rand_image(5, 8, 8, 3);
        let cfg = SdsConfig::default();
        let a = sds_grad(&m, 0, &x, &cfg, 17).unwrap();
        assert_eq!(a, sds_grad(&m, 0, &x, &cfg, 17).unwrap());
        assert_ne!(a, sds_grad(&m, 0, &x, &cfg, 18).unwrap());

        // reproduce the draw to check the infinity-norm bound
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (lo, hi) = cfg.step_bounds(100).unwrap();
        let t = rng.random_range(lo..=hi);
        let noise = standard_normal_image(8, 8, 3, &mut rng);
        let x_t = forward_diffuse(&x, t, &noise, m.denoiser.schedule()).unwrap();
        let pred = m.predict_noise(&x_t, 0, t).unwrap();
        assert!(a.max_abs() <= pred.max_abs() + noise.max_abs() + 1e-12);
    }

    #[test]
    fn sds_zero_weight_and_bad_bounds() {
        let m = model();
        let x = rand_image(6, 8, 8, 3);
        let zero = SdsConfig {
            weight: WeightSchedule::Constant(0.0),
            ..SdsConfig::default()
        };
        assert_eq!(sds_grad(&m, 1, &x, &zero, 3).unwrap().max_abs(), 0.0);
        for range in [[0.5, 0.2], [0.0, 0.5], [0.2, 1.5]] {
            let bad = SdsConfig {
                t_range: range,
                ..SdsConfig::default()
            };
            assert!(sds_grad(&m, 1, &x, &bad, 3).is_err());
        }
    }

    #[test]
    fn sds_equals_weighted_residual_of_the_seeded_draw() {
        let m = model();
        let x = rand_image(7, 8, 8, 3);
        let cfg = SdsConfig {
            weight: WeightSchedule::OneMinusAlphaBar,
            ..SdsConfig::default()
        };
        let g = sds_grad(&m, 1, &x, &cfg, 9).unwrap();
        let schedule = m.denoiser.schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (lo, hi) = cfg.step_bounds(schedule.step_count()).unwrap();
        let t = rng.random_range(lo..=hi);
        let noise = standard_normal_image(8, 8, 3, &mut rng);
        let x_t = forward_diffuse(&x, t, &noise, schedule).unwrap();
        let pred = m.predict_noise(&x_t, 1, t).unwrap();
        let w = 1.0 - schedule.alpha_bar(t).unwrap();
        for ((gi, p), e) in g.data().iter().zip(pred.data()).zip(noise.data()) {
            assert_eq!(*gi, w * (p - e));
        }
    }

    #[test]
    fn csds_composition_independence_and_permutation() {
        let targets: Vec<Image> = (0..2).map(|k| rand_image(10 + k, 8, 8, 3)).collect();
        let rgb: Vec<Image> = (0..2).map(|k| rand_image(20 + k, 8, 8, 3)).collect();
        let opacity = vec![Image::new(8, 8, 1); 2];
        let ctx = GuidanceContext { camera: 0, seed: 5 };
        let photo: Vec<Arc<dyn GuidanceProvider>> = targets
            .iter()
            .map(|t| Arc::new(PhotometricProvider { targets: vec![t.clone()] }) as Arc<dyn GuidanceProvider>)
            .collect();
        let out = csds_grads(&photo, &view_from(rgb.clone(), opacity.clone()), &ctx).unwrap();
        for k in 0..2 {
            assert_eq!(out[k].rgb.as_ref().unwrap(), &photometric_grad(&rgb[k], &targets[k]).unwrap());
        }
        assert!(csds_grads(&photo[..1], &view_from(rgb.clone(), opacity.clone()), &ctx).is_err());

        let m = model();
        let dcm: Vec<Arc<dyn GuidanceProvider>> = (0..2)
            .map(|k| {
                Arc::new(DcmProvider {
                    model: m.clone(),
                    concept: k,
                    sds: SdsConfig::default(),
                }) as Arc<dyn GuidanceProvider>
            })
            .collect();
        let base = csds_grads(&dcm, &view_from(rgb.clone(), opacity.clone()), &ctx).unwrap();
        let mut perturbed = rgb.clone();
        perturbed[1] = rand_image(99, 8, 8, 3);
        let after = csds_grads(&dcm, &view_from(perturbed, opacity.clone()), &ctx).unwrap();
        assert_eq!(base[0].rgb, after[0].rgb);
        assert_ne!(base[1].rgb, after[1].rgb);

        let swapped: Vec<Arc<dyn GuidanceProvider>> = vec![dcm[1].clone(), dcm[0].clone()];
        let rgb_swapped = vec![rgb[1].clone(), rgb[0].clone()];
        let permuted = csds_grads(&swapped, &view_from(rgb_swapped, opacity.clone()), &ctx).unwrap();
        assert_eq!(permuted[0].rgb, base[1].rgb);
        assert_eq!(permuted[1].rgb, base[0].rgb);

        let zeros = vec![Image::new(8, 8, 3); 2];
        let zero_photo: Vec<Arc<dyn GuidanceProvider>> = (0..2)
            .map(|_| Arc::new(PhotometricProvider { targets: vec![Image::new(8, 8, 3)] }) as Arc<dyn GuidanceProvider>)
            .collect();
        let z = csds_grads(&zero_photo, &view_from(zeros, opacity), &ctx).unwrap();
        assert!(z.iter().all(|g| g.rgb.as_ref().unwrap().max_abs() == 0.0));
    }

    #[test]
    fn dcm_provider_upsamples_with_the_adjoint() {
        let m = model();
        let p = DcmProvider {
            model: m.clone(),
            concept: 0,
            sds: SdsConfig::default(),
        };
        let rgb = rand_image(7, 16, 16, 3);
        let ctx = GuidanceContext { camera: 3, seed: 2 };
        let g = p.grad(&rgb, &Image::new(16, 16, 1), &ctx).unwrap().rgb.unwrap();
        assert_eq!((g.width(), g.height()), (16, 16));
        let small = sds_grad(&m, 0, &rgb.downsample_area(2).unwrap(), &p.sds, crate::mix_seed(2, 1)).unwrap();
        assert_eq!(g, small.downsample_adjoint(2));
        assert!(p.grad(&rand_image(7, 12, 12, 3), &Image::new(12, 12, 1), &ctx).is_err());
    }
}
