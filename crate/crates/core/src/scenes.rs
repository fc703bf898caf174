//! Analytic multi-object scenes built from signed-distance primitives.
//!
//! A scene provides the frozen density/color fields to be dissected, the
//! ground-truth per-category sub-densities, and exact first-hit masks for
//! evaluation.

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Aabb, CategoryField, ColorField, DensityField, VoxelGrid};
use crate::image::Image;
use crate::renderer::{generate_rays, Camera};
use crate::Vec3;

/// Names of the scenes shipped with the crate.
pub const CANONICAL_SCENES: [&str; 3] = ["sphere_on_box", "torus_through_sphere", "three_stack"];

pub const DEFAULT_FALLOFF: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    /// Ring in the local xz-plane around the local y axis.
    Torus { major_radius: f64, minor_radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    /// Euler angles in degrees, applied about the fixed x, then y, then z axes.
    #[serde(default)]
    pub rotation_deg: [f64; 3],
    pub color: [f64; 3],
    pub category: usize,
}

impl Primitive {
    fn rotation(&self) -> Rotation3<f64> {
        let [rx, ry, rz] = self.rotation_deg.map(f64::to_radians);
        Rotation3::from_euler_angles(rx, ry, rz)
    }

    /// Exact signed distance (negative inside).
    pub fn sdf(&self, p: &Vec3) -> f64 {
        let q = self.rotation().inverse() * (p - Vec3::from(self.center));
        match self.shape {
            Shape::Sphere { radius } => q.norm() - radius,
            Shape::Box { half_extents } => {
                let d = q.abs() - Vec3::from(half_extents);
                let outside = d.map(|v| v.max(0.0)).norm();
                outside + d.max().min(0.0)
            }
            Shape::Torus {
                major_radius,
                minor_radius,
            } => {
                let ring = (q.x * q.x + q.z * q.z).sqrt() - major_radius;
                (ring * ring + q.y * q.y).sqrt() - minor_radius
            }
        }
    }

    fn validate(&self, categories: usize) -> Result<()> {
        let sizes: Vec<f64> = match self.shape {
            Shape::Sphere { radius } => vec![radius],
            Shape::Box { half_extents } => half_extents.to_vec(),
            Shape::Torus {
                major_radius,
                minor_radius,
            } => vec![major_radius, minor_radius],
        };
        if sizes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidScene(format!("non-positive size in {:?}", self.shape)));
        }
        if self.category >= categories {
            return Err(Error::InvalidScene(format!(
                "category {} out of range for {categories} categories",
                self.category
            )));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidScene("primitive color outside [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    /// Category names; `K` is their count.
    pub categories: Vec<String>,
    pub primitives: Vec<Primitive>,
    pub density_scale: f64,
    #[serde(default = "default_falloff")]
    pub falloff: f64,
    pub resolution: [usize; 3],
    pub bounds: Aabb,
}

fn default_falloff() -> f64 {
    DEFAULT_FALLOFF
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// One of [`CANONICAL_SCENES`].
    pub fn canonical(name: &str) -> Result<Self> {
        let text = match name {
            "sphere_on_box" => include_str!("../scenes/sphere_on_box.json"),
            "torus_through_sphere" => include_str!("../scenes/torus_through_sphere.json"),
            "three_stack" => include_str!("../scenes/three_stack.json"),
            other => return Err(Error::InvalidScene(format!("unknown canonical scene {other:?}"))),
        };
        Self::from_json(text)
    }

    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidScene("scene has no primitives".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::InvalidScene("scene has no categories".into()));
        }
        if !(self.density_scale > 0.0 && self.falloff > 0.0) {
            return Err(Error::InvalidScene("density_scale and falloff must be positive".into()));
        }
        for prim in &self.primitives {
            prim.validate(self.categories.len())?;
        }
        for k in 0..self.categories.len() {
            if !self.primitives.iter().any(|p| p.category == k) {
                return Err(Error::InvalidScene(format!(
                    "category {:?} has no primitive",
                    self.categories[k]
                )));
            }
        }
        // surfaces the grid validation early
        VoxelGrid::zeros(self.resolution, self.bounds, 1).map(|_| ())
    }

    /// Index and signed distance of the nearest primitive.
    pub fn nearest(&self, p: &Vec3) -> (usize, f64) {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, prim)| (i, prim.sdf(p)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    }

    /// Max-union density `scale · sigmoid(-sdf_min / falloff)`.
    pub fn density_at(&self, p: &Vec3) -> f64 {
        let (_, d) = self.nearest(p);
        self.density_scale * sigmoid(-d / self.falloff)
    }

    /// Category owning `p`: the category of the nearest primitive.
    pub fn category_at(&self, p: &Vec3) -> usize {
        self.primitives[self.nearest(p).0].category
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fields produced by [`build_scene`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFields {
    pub density: DensityField,
    pub color: ColorField,
    /// Ground-truth sub-density per category. Each node belongs wholly to
    /// the category of its nearest primitive (smallest signed distance),
    /// so the sub-densities sum to the total density at every node.
    pub ground_truth: Vec<DensityField>,
}

pub fn build_scene(spec: &SceneSpec) -> Result<SceneFields> {
    spec.validate()?;
    let kcount = spec.category_count();
    let mut owners = Vec::new();
    let density = VoxelGrid::from_fn(spec.resolution, spec.bounds, 1, |p, out| {
        out[0] = spec.density_at(&p);
    })?;
    let color = VoxelGrid::from_fn(spec.resolution, spec.bounds, 3, |p, out| {
        let (idx, _) = spec.nearest(&p);
        out.copy_from_slice(&spec.primitives[idx].color);
        owners.push(spec.primitives[idx].category);
    })?;
    let mut ground_truth = Vec::with_capacity(kcount);
    for k in 0..kcount {
        let values = density
            .values()
            .iter()
            .zip(&owners)
            .map(|(&sigma, &owner)| if owner == k { sigma } else { 0.0 })
            .collect();
        ground_truth.push(DensityField::new(VoxelGrid::new(
            spec.resolution,
            spec.bounds,
            1,
            values,
        )?)?);
    }
    Ok(SceneFields {
        density: DensityField::new(density)?,
        color: ColorField::new(color)?,
        ground_truth,
    })
}

/// Category field whose logits are `gap` for the owning category and 0
/// elsewhere at every node.
pub fn one_hot_category_field(spec: &SceneSpec, temperature: f64, gap: f64) -> Result<CategoryField> {
    let kcount = spec.category_count();
    let grid = VoxelGrid::from_fn(spec.resolution, spec.bounds, kcount, |p, out| {
        out.fill(0.0);
        out[spec.category_at(&p)] = gap;
    })?;
    CategoryField::new(grid, temperature, spec.categories.clone())
}

const TRACE_HIT: f64 = 1e-7;
const TRACE_MAX_STEPS: usize = 2000;

/// Exact first-hit category masks: pixel `(x, y)` of mask `k` is 1 when
/// the pixel's ray first meets a category-`k` primitive between near and
/// far. Found by sphere tracing the exact union distance.
pub fn render_gt_masks(spec: &SceneSpec, camera: &Camera) -> Result<Vec<Image>> {
    let rays = generate_rays(camera)?;
    let mut masks = vec![Image::new(camera.width, camera.height, 1); spec.category_count()];
    for (i, ray) in rays.iter().enumerate() {
        let mut t = camera.near;
        for _ in 0..TRACE_MAX_STEPS {
            if t > camera.far {
                break;
            }
            let p = ray.origin + ray.dir * t;
            let (idx, d) = spec.nearest(&p);
            if d < TRACE_HIT {
                let k = spec.primitives[idx].category;
                masks[k].data_mut()[i] = 1.0;
                break;
            }
            t += d;
        }
    }
    Ok(masks)
}

/// Step used to walk through the interior of a category's primitives while
/// looking for a point that the category owns.
const OWNERSHIP_STEP: f64 = 1e-3;

/// Per-category silhouettes: pixel `(x, y)` of mask `k` is 1 when the
/// pixel's ray passes through the region owned by category `k` (inside the
/// union and closest to a category-`k` primitive), regardless of what lies
/// in front. This is the mask of each category's ground-truth sub-density
/// rendered alone, the counterpart of a sub-field's opacity.
pub fn render_gt_silhouettes(spec: &SceneSpec, camera: &Camera) -> Result<Vec<Image>> {
    let rays = generate_rays(camera)?;
    let mut masks = Vec::with_capacity(spec.category_count());
    for k in 0..spec.category_count() {
        let prims: Vec<&Primitive> = spec.primitives.iter().filter(|p| p.category == k).collect();
        let mut mask = Image::new(camera.width, camera.height, 1);
        for (i, ray) in rays.iter().enumerate() {
            let mut t = camera.near;
            for _ in 0..TRACE_MAX_STEPS * 4 {
                if t > camera.far {
                    break;
                }
                let p = ray.origin + ray.dir * t;
                let d = prims.iter().map(|prim| prim.sdf(&p)).fold(f64::INFINITY, f64::min);
                if d < TRACE_HIT {
                    if spec.category_at(&p) == k {
                        mask.data_mut()[i] = 1.0;
                        break;
                    }
                    t += OWNERSHIP_STEP;
                } else {
                    t += d;
                }
            }
        }
        masks.push(mask);
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_sphere(radius: f64) -> SceneSpec {
        SceneSpec {
            name: "ball".into(),
            categories: vec!["ball".into()],
            primitives: vec![Primitive {
                shape: Shape::Sphere { radius },
                center: [0.0; 3],
                rotation_deg: [0.0; 3],
                color: [0.8, 0.1, 0.1],
                category: 0,
            }],
            density_scale: 20.0,
            falloff: DEFAULT_FALLOFF,
            resolution: [16, 16, 16],
            bounds: Aabb::unit_cube(),
        }
    }

    #[test]
    fn canonical_scenes_parse() {
        for name in CANONICAL_SCENES {
            let spec = SceneSpec::canonical(name).unwrap();
            assert_eq!(spec.name, name);
            assert!(spec.category_count() >= 2);
        }
        assert!(SceneSpec::canonical("nope").is_err());
    }

    #[test]
    fn validation_errors() {
        let mut spec = single_sphere(0.2);
        spec.primitives.clear();
        assert!(spec.validate().is_err());
        let mut spec = single_sphere(0.2);
        spec.categories.push("unused".into());
        assert!(spec.validate().is_err());
        let mut spec = single_sphere(0.2);
        spec.primitives[0].shape = Shape::Sphere { radius: -1.0 };
        assert!(spec.validate().is_err());
        let mut spec = single_sphere(0.2);
        spec.primitives[0].category = 3;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn sdf_values() {
        let mut prim = single_sphere(0.3).primitives.remove(0);
        assert!((prim.sdf(&Vec3::zeros()) + 0.3).abs() < 1e-15);
        prim.shape = Shape::Box {
            half_extents: [0.1, 0.2, 0.3],
        };
        assert!((prim.sdf(&Vec3::new(0.5, 0.0, 0.0)) - 0.4).abs() < 1e-15);
        assert!((prim.sdf(&Vec3::new(0.2, 0.3, 0.3)) - (0.02f64).sqrt()).abs() < 1e-15);
        assert!((prim.sdf(&Vec3::zeros()) + 0.1).abs() < 1e-15);
        prim.shape = Shape::Torus {
            major_radius: 0.3,
            minor_radius: 0.05,
        };
        assert!((prim.sdf(&Vec3::new(0.3, 0.0, 0.0)) + 0.05).abs() < 1e-15);
        assert!((prim.sdf(&Vec3::zeros()) - 0.25).abs() < 1e-15);
        // rotating the ring into the xy-plane moves the tube onto the y axis
        prim.rotation_deg = [90.0, 0.0, 0.0];
        assert!((prim.sdf(&Vec3::new(0.0, 0.3, 0.0)) + 0.05).abs() < 1e-12);
    }

    #[test]
    fn density_saturates_inside_and_decays_outside() {
        let spec = single_sphere(0.2);
        assert!((spec.density_at(&Vec3::zeros()) - spec.density_scale).abs() < 1e-6 * spec.density_scale);
        let far = Vec3::new(0.45, 0.45, 0.45);
        assert!(spec.density_at(&far) < spec.density_scale * 1e-10);
    }

    #[test]
    fn deterministic_build() {
        let spec = SceneSpec::canonical("torus_through_sphere").unwrap();
        let mut small = spec.clone();
        small.resolution = [12, 12, 12];
        assert_eq!(build_scene(&small).unwrap(), build_scene(&small).unwrap());
    }

    #[test]
    fn gt_masks_empty_view_and_disc_area() {
        let spec = single_sphere(0.2);
        let away = Camera::new(
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(0.0, 0.0, 4.0),
            Vec3::y(),
            0.5,
            (16, 16),
            (0.1, 3.0),
        )
        .unwrap();
        assert!(render_gt_masks(&spec, &away).unwrap()[0].data().iter().all(|&v| v == 0.0));

        let (w, h, fov, dist) = (200usize, 200usize, 30f64.to_radians(), 2.0);
        let cam = Camera::new(Vec3::new(0.0, 0.0, dist), Vec3::zeros(), Vec3::y(), fov, (w, h), (0.5, 4.0)).unwrap();
        let mask = &render_gt_masks(&spec, &cam).unwrap()[0];
        let area: f64 = mask.data().iter().sum();
        // projected disc radius in pixels: focal · tan(asin(r / D))
        let focal = (h as f64 / 2.0) / (fov / 2.0).tan();
        let rho = focal * 0.2 / (dist * dist - 0.04f64).sqrt();
        let want = std::f64::consts::PI * rho * rho;
        assert!((area - want).abs() / want < 0.02, "{area} vs {want}");
    }
}
