//! End-to-end orchestration behind the command-line tool.
//!
//! Every stage reads only artifacts written by earlier stages under
//! `<out>/<run-id>/` and writes its own:
//!
//! | stage     | reads                          | writes                         |
//! |-----------|--------------------------------|--------------------------------|
//! | `scene`   | scene spec                     | `scene.json`, `fields/`, `masks/` |
//! | `mine`    | `fields/`, `masks/mining/`     | `dcm/`, `metrics/mining.json`  |
//! | `dissect` | `fields/`, `masks/`, `dcm/`    | `necf/`, `metrics/dissect.json`|
//! | `mesh`    | `fields/`, `necf/`             | `meshes/<scene>_<category>.obj`|
//! | `refine`  | `meshes/`                      | `meshes/*_refined.obj`, `metrics/refine.json` |
//! | `render`  | `fields/`, `necf/`             | `renders/*.ppm`                |
//! | `eval`    | `fields/`, `necf/`, `masks/eval/`, `meshes/` | `metrics/metrics.json` |
//!
//! Randomness derives from the global seed: mining uses
//! `mix_seed(seed, 1)` and training uses `mix_seed(seed, 2)`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dissect::{evaluate, train_necf, DissectConfig, EvalEntry, EvalSet, GuidanceKind, OrbitSpec};
use crate::error::{Error, Result};
use crate::fields::{CategoryField, ColorField, DensityField};
use crate::guidance::{DcmProvider, GuidanceProvider, MaskProvider, PhotometricProvider, SdsConfig};
use crate::image::Image;
use crate::meshing::{
    export_obj, export_ply, extract_isosurface, parse_obj, refine_separation, InterpenetrationConfig, MeshConfig,
    TetGrid, TriMesh,
};
use crate::renderer::{render_view, Camera};
use crate::scenes::{build_scene, render_gt_masks, render_gt_silhouettes, SceneSpec};
use crate::toydiffusion::{mine_concepts, ConceptModel, DenoiserConfig, MiningConfig, MiningData};
use crate::{mix_seed, vgrid, Vec3};

/// Mining settings: views, network shape and optimizer schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineStageConfig {
    /// Views rendered for mining; their size must be a multiple of the
    /// denoiser resolution.
    pub views: OrbitSpec,
    pub denoiser: DenoiserConfig,
    pub schedule: MiningConfig,
}

impl Default for MineStageConfig {
    fn default() -> Self {
        Self {
            views: OrbitSpec {
                count: 6,
                ..OrbitSpec::training()
            },
            denoiser: DenoiserConfig::default(),
            // learning rates scaled up for a randomly initialized toy
            // network; step counts keep the two-stage 400/100 split
            schedule: MiningConfig {
                stage1_lr: 2e-2,
                stage2_lr: 2e-3,
                ..MiningConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshStageConfig {
    /// Iso-level as a fraction of the scene's density scale.
    pub threshold_fraction: f64,
    pub min_component_triangles: usize,
    /// Also write a binary PLY with per-vertex colors.
    pub export_ply: bool,
}

impl Default for MeshStageConfig {
    fn default() -> Self {
        Self {
            threshold_fraction: 0.5,
            min_component_triangles: MeshConfig::default().min_component_triangles,
            export_ply: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStageConfig {
    pub turntable: OrbitSpec,
}

impl Default for RenderStageConfig {
    fn default() -> Self {
        Self {
            turntable: OrbitSpec {
                count: 8,
                ..OrbitSpec::training()
            },
        }
    }
}

/// Stages run by `all`, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub mine: bool,
    pub dissect: bool,
    pub mesh: bool,
    pub refine: bool,
    pub render: bool,
    pub eval: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            mine: true,
            dissect: true,
            mesh: true,
            refine: true,
            render: true,
            eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// A canonical scene name or a path to a scene JSON file.
    pub scene: String,
    /// Output root; each run writes to `<out>/<run_id>/`.
    pub out: PathBuf,
    /// Run directory name under the output root; defaults to the scene
    /// name.
    pub run_id: Option<String>,
    pub seed: u64,
    pub stages: StageToggles,
    pub mine: MineStageConfig,
    pub dissect: DissectConfig,
    pub sds: SdsConfig,
    pub mesh: MeshStageConfig,
    pub refine: InterpenetrationConfig,
    pub render: RenderStageConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: "sphere_on_box".into(),
            out: PathBuf::from("out"),
            run_id: None,
            seed: 0,
            stages: StageToggles::default(),
            mine: MineStageConfig::default(),
            dissect: DissectConfig::default(),
            sds: SdsConfig::default(),
            mesh: MeshStageConfig::default(),
            refine: InterpenetrationConfig::default(),
            render: RenderStageConfig::default(),
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(e.to_string())
}

impl PipelineConfig {
    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when
    /// possible and as strings otherwise; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| config_error(format!("override {item:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut tree;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| config_error(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(tree).map_err(config_error)
    }

    pub fn validate(&self) -> Result<()> {
        self.dissect.validate()?;
        if !(self.mesh.threshold_fraction > 0.0) {
            return Err(config_error(format!("mesh threshold fraction {}", self.mesh.threshold_fraction)));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(config_error(format!("run id {id:?}")));
            }
        }
        self.sds.step_bounds(self.mine.denoiser.diffusion_steps)?;
        Ok(())
    }

    pub fn load_scene(&self) -> Result<SceneSpec> {
        if crate::scenes::CANONICAL_SCENES.contains(&self.scene.as_str()) {
            return SceneSpec::canonical(&self.scene);
        }
        let path = Path::new(&self.scene);
        let text = fs::read_to_string(path).map_err(|e| config_error(format!("scene {}: {e}", path.display())))?;
        SceneSpec::from_json(&text).map_err(|e| config_error(format!("scene {}: {e}", path.display())))
    }
}

/// Pipeline stage names accepted by [`Pipeline::run`].
pub const STAGES: [&str; 8] = ["scene", "mine", "dissect", "mesh", "refine", "render", "eval", "all"];

/// Paths of one run.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(out: &Path, run_id: &str) -> Self {
        Self { root: out.join(run_id) }
    }

    pub fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn ensure(&self, name: &str) -> Result<PathBuf> {
        let dir = self.dir(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.json")
    }

    pub fn density(&self) -> PathBuf {
        self.dir("fields").join("density.vgrid")
    }

    pub fn color(&self) -> PathBuf {
        self.dir("fields").join("color.vgrid")
    }

    pub fn ground_truth(&self, category: &str) -> PathBuf {
        self.dir("fields").join(format!("gt_{}.vgrid", file_token(category)))
    }

    pub fn mask(&self, set: &str, camera: usize, category: &str) -> PathBuf {
        self.dir("masks")
            .join(set)
            .join(format!("{camera:02}_{}.pgm", file_token(category)))
    }

    pub fn concepts(&self) -> PathBuf {
        self.dir("dcm").join("concepts.dcm")
    }

    pub fn initial_category(&self) -> PathBuf {
        self.dir("necf").join("initial.vgrid")
    }

    pub fn category(&self) -> PathBuf {
        self.dir("necf").join("category.vgrid")
    }

    pub fn mesh(&self, scene: &str, category: &str, refined: bool) -> PathBuf {
        let suffix = if refined { "_refined" } else { "" };
        self.dir("meshes")
            .join(format!("{}_{}{suffix}.obj", file_token(scene), file_token(category)))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.dir("metrics").join(format!("{name}.json"))
    }
}

/// Keeps names safe as file-name components.
fn file_token(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Shared state of a run: configuration, layout and the recorded scene.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub layout: RunLayout,
}

struct Fields {
    spec: SceneSpec,
    density: DensityField,
    color: ColorField,
}

/// Names of the camera sets whose reference masks the scene stage writes.
const TRAIN_MASKS: &str = "train";
const EVAL_MASKS: &str = "eval";
const MINING_MASKS: &str = "mining";

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let run_id = match &config.run_id {
            Some(id) => id.clone(),
            None => file_token(&config.load_scene()?.name),
        };
        Ok(Self {
            layout: RunLayout::new(&config.out, &run_id),
            config,
        })
    }

    pub fn run(&self, stage: &str) -> Result<()> {
        match stage {
            "scene" => self.scene(),
            "mine" => self.mine(),
            "dissect" => self.dissect(),
            "mesh" => self.mesh(),
            "refine" => self.refine(),
            "render" => self.render(),
            "eval" => self.eval(),
            "all" => self.all(),
            other => Err(config_error(format!("unknown stage {other:?}"))),
        }
    }

    fn all(&self) -> Result<()> {
        let t = &self.config.stages;
        self.scene()?;
        let mut steps: Vec<fn(&Self) -> Result<()>> = Vec::new();
        if t.mine {
            steps.push(Self::mine);
        }
        if t.dissect {
            steps.push(Self::dissect);
        }
        if t.mesh {
            steps.push(Self::mesh);
        }
        if t.refine {
            steps.push(Self::refine);
        }
        if t.render {
            steps.push(Self::render);
        }
        if t.eval {
            steps.push(Self::eval);
        }
        steps.into_iter().try_for_each(|s| s(self))
    }

    fn center(spec: &SceneSpec) -> Vec3 {
        Vec3::from_fn(|a, _| 0.5 * (spec.bounds.min[a] + spec.bounds.max[a]))
    }

    fn cameras(&self, spec: &SceneSpec, orbit: &OrbitSpec) -> Result<Vec<Camera>> {
        orbit.cameras(Self::center(spec))
    }

    /// Builds the fields and writes reference masks for training,
    /// evaluation and mining cameras.
    pub fn scene(&self) -> Result<()> {
        let spec = self.config.load_scene()?;
        let fields = build_scene(&spec)?;
        fs::create_dir_all(&self.layout.root).map_err(|e| Error::io(&self.layout.root, e))?;
        write_json(&self.layout.scene(), &spec)?;
        self.layout.ensure("fields")?;
        vgrid::write_density(&self.layout.density(), &fields.density)?;
        vgrid::write_color(&self.layout.color(), &fields.color)?;
        for (name, gt) in spec.categories.iter().zip(&fields.ground_truth) {
            vgrid::write_density(&self.layout.ground_truth(name), gt)?;
        }
        let sets = [
            (TRAIN_MASKS, &self.config.dissect.cameras, true),
            (EVAL_MASKS, &self.config.dissect.eval_cameras, true),
            (MINING_MASKS, &self.config.mine.views, false),
        ];
        for (set, orbit, amodal) in sets {
            self.layout.ensure(&format!("masks/{set}"))?;
            for (c, camera) in self.cameras(&spec, orbit)?.iter().enumerate() {
                let masks = if amodal {
                    render_gt_silhouettes(&spec, camera)?
                } else {
                    render_gt_masks(&spec, camera)?
                };
                for (name, mask) in spec.categories.iter().zip(masks) {
                    mask.write_netpbm(&self.layout.mask(set, c, name))?;
                }
            }
        }
        Ok(())
    }

    fn load_fields(&self) -> Result<Fields> {
        let spec: SceneSpec = read_json(&self.layout.scene())?;
        Ok(Fields {
            spec,
            density: vgrid::read_density(&self.layout.density())?,
            color: vgrid::read_color(&self.layout.color())?,
        })
    }

    fn load_masks(&self, spec: &SceneSpec, set: &str, count: usize) -> Result<Vec<Vec<Image>>> {
        (0..count)
            .map(|c| {
                spec.categories
                    .iter()
                    .map(|name| Image::read_netpbm(&self.layout.mask(set, c, name)))
                    .collect()
            })
            .collect()
    }

    fn initial_category(&self, fields: &Fields) -> Result<CategoryField> {
        CategoryField::uniform(
            fields.spec.resolution,
            fields.spec.bounds,
            fields.spec.categories.clone(),
            self.config.dissect.temperature,
        )
    }

    /// Mines concept embeddings and the toy denoiser from composite views
    /// and first-hit masks, both area-downsampled to the denoiser size.
    pub fn mine(&self) -> Result<()> {
        let fields = self.load_fields()?;
        let cfg = &self.config.mine;
        let cameras = self.cameras(&fields.spec, &cfg.views)?;
        let render = &self.config.dissect.render;
        let init = self.initial_category(&fields)?;
        let views = cameras
            .iter()
            .map(|camera| Ok(render_view(camera, &fields.density, &fields.color, &init, render, false)?.composite))
            .collect::<Result<Vec<_>>>()?;
        let masks = self.load_masks(&fields.spec, MINING_MASKS, cameras.len())?;
        let data = mining_data(&views, &masks, cfg.denoiser.image_size)?;
        let schedule = MiningConfig {
            seed: mix_seed(self.config.seed, 1),
            ..cfg.schedule.clone()
        };
        let result = mine_concepts(&data, &fields.spec.categories, cfg.denoiser.clone(), &schedule)?;
        self.layout.ensure("dcm")?;
        result.model.write(&self.layout.concepts())?;
        self.layout.ensure("metrics")?;
        write_json(
            &self.layout.metrics("mining"),
            &serde_json::json!({ "loss_history": result.loss_history }),
        )
    }

    fn providers(&self, fields: &Fields, cameras: &[Camera]) -> Result<Vec<Arc<dyn GuidanceProvider>>> {
        let spec = &fields.spec;
        let kcount = spec.category_count();
        Ok(match self.config.dissect.guidance {
            GuidanceKind::Mask => {
                let masks = self.load_masks(spec, TRAIN_MASKS, cameras.len())?;
                (0..kcount)
                    .map(|k| {
                        Arc::new(MaskProvider {
                            silhouettes: masks.iter().map(|m| m[k].clone()).collect(),
                        }) as Arc<dyn GuidanceProvider>
                    })
                    .collect()
            }
            GuidanceKind::Photometric => {
                let mut providers: Vec<Arc<dyn GuidanceProvider>> = Vec::with_capacity(kcount);
                for name in &spec.categories {
                    let gt = vgrid::read_density(&self.layout.ground_truth(name))?;
                    let alone = CategoryField::single(spec.resolution, spec.bounds, name)?;
                    let targets = cameras
                        .iter()
                        .map(|c| {
                            Ok(render_view(c, &gt, &fields.color, &alone, &self.config.dissect.render, false)?
                                .per_category_rgb
                                .remove(0))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    providers.push(Arc::new(PhotometricProvider { targets }));
                }
                providers
            }
            GuidanceKind::Dcm => {
                let model = Arc::new(ConceptModel::read(&self.layout.concepts())?);
                if model.concept_count() != kcount {
                    return Err(Error::ShapeMismatch(format!(
                        "{} mined concepts for {kcount} categories",
                        model.concept_count()
                    )));
                }
                (0..kcount)
                    .map(|k| {
                        Arc::new(DcmProvider {
                            model: model.clone(),
                            concept: k,
                            sds: self.config.sds,
                        }) as Arc<dyn GuidanceProvider>
                    })
                    .collect()
            }
        })
    }

    fn eval_set(&self, spec: &SceneSpec) -> Result<EvalSet> {
        let cameras = self.cameras(spec, &self.config.dissect.eval_cameras)?;
        let masks = self.load_masks(spec, EVAL_MASKS, cameras.len())?;
        Ok(EvalSet { cameras, masks })
    }

    /// Trains the category field with density and color frozen.
    pub fn dissect(&self) -> Result<()> {
        let fields = self.load_fields()?;
        let cameras = self.cameras(&fields.spec, &self.config.dissect.cameras)?;
        let providers = self.providers(&fields, &cameras)?;
        let init = self.initial_category(&fields)?;
        let eval = self.eval_set(&fields.spec)?;
        let config = DissectConfig {
            seed: mix_seed(self.config.seed, 2),
            ..self.config.dissect.clone()
        };
        let (trained, report) = train_necf(
            &fields.density,
            &fields.color,
            init.clone(),
            &providers,
            &cameras,
            &config,
            Some(&eval),
        )?;
        self.layout.ensure("necf")?;
        vgrid::write_category(&self.layout.initial_category(), &init)?;
        vgrid::write_category(&self.layout.category(), &trained)?;
        self.layout.ensure("metrics")?;
        write_json(&self.layout.metrics("dissect"), &report)
    }

    fn mesh_config(&self, spec: &SceneSpec) -> MeshConfig {
        MeshConfig {
            threshold: self.config.mesh.threshold_fraction * spec.density_scale,
            min_component_triangles: self.config.mesh.min_component_triangles,
        }
    }

    /// Extracts one mesh per category from its sub-density.
    pub fn mesh(&self) -> Result<()> {
        let fields = self.load_fields()?;
        let category = vgrid::read_category(&self.layout.category())?;
        let config = self.mesh_config(&fields.spec);
        self.layout.ensure("meshes")?;
        for (k, name) in fields.spec.categories.iter().enumerate() {
            let grid = TetGrid::from_sub_density(&fields.density, &category, k)?;
            let mesh = extract_isosurface(&grid, &config)?;
            let path = self.layout.mesh(&fields.spec.name, name, false);
            export_obj(&mesh, name, &path)?;
            if self.config.mesh.export_ply {
                let colors = mesh
                    .vertices
                    .iter()
                    .map(|v| {
                        let b = fields.spec.bounds;
                        let p = Vec3::from_fn(|a, _| v[a].clamp(b.min[a], b.max[a]));
                        fields.color.sample(&p)
                    })
                    .collect::<Result<Vec<_>>>()?;
                export_ply(&mesh, &colors, &path.with_extension("ply"))?;
            }
        }
        Ok(())
    }

    fn read_meshes(&self, spec: &SceneSpec, refined: bool) -> Result<Vec<TriMesh>> {
        spec.categories
            .iter()
            .map(|name| {
                let path = self.layout.mesh(&spec.name, name, refined);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                parse_obj(&text)
            })
            .collect()
    }

    /// Pushes each category mesh in turn out of the others.
    pub fn refine(&self) -> Result<()> {
        let spec: SceneSpec = read_json(&self.layout.scene())?;
        let mut meshes = self.read_meshes(&spec, false)?;
        let mut report = Vec::new();
        if meshes.len() >= 2 {
            for k in 0..meshes.len() {
                let outcome = refine_separation(&meshes, k, &self.config.refine)?;
                report.push(serde_json::json!({
                    "category": spec.categories[k],
                    "initial_loss": outcome.losses[0],
                    "final_loss": outcome.losses.last(),
                    "iterations": outcome.losses.len() - 1,
                }));
                meshes[k] = outcome.mesh;
            }
        }
        for (name, mesh) in spec.categories.iter().zip(&meshes) {
            export_obj(mesh, name, &self.layout.mesh(&spec.name, name, true))?;
        }
        self.layout.ensure("metrics")?;
        write_json(&self.layout.metrics("refine"), &report)
    }

    /// Turntable PPMs of the composite and every category.
    pub fn render(&self) -> Result<()> {
        let fields = self.load_fields()?;
        let category = vgrid::read_category(&self.layout.category())?;
        let dir = self.layout.ensure("renders")?;
        for (i, camera) in self.cameras(&fields.spec, &self.config.render.turntable)?.iter().enumerate() {
            let view = render_view(camera, &fields.density, &fields.color, &category, &self.config.dissect.render, false)?;
            view.composite.write_netpbm(&dir.join(format!("frame_{i:02}_composite.ppm")))?;
            for (name, rgb) in fields.spec.categories.iter().zip(&view.per_category_rgb) {
                rgb.write_netpbm(&dir.join(format!("frame_{i:02}_{}.ppm", file_token(name))))?;
            }
        }
        Ok(())
    }

    /// Held-out IoU, composition error and mesh statistics.
    pub fn eval(&self) -> Result<()> {
        let fields = self.load_fields()?;
        let category = vgrid::read_category(&self.layout.category())?;
        let set = self.eval_set(&fields.spec)?;
        let entry: EvalEntry = evaluate(&category, &fields.density, &fields.color, &set, &self.config.dissect.render, 0)?;
        let mut meshes = Vec::new();
        for refined in [false, true] {
            if fields
                .spec
                .categories
                .iter()
                .all(|n| self.layout.mesh(&fields.spec.name, n, refined).exists())
            {
                for (name, m) in fields.spec.categories.iter().zip(self.read_meshes(&fields.spec, refined)?) {
                    meshes.push(serde_json::json!({
                        "category": name,
                        "refined": refined,
                        "vertices": m.vertices.len(),
                        "faces": m.faces.len(),
                        "area": m.area(),
                        "volume": m.volume(),
                        "closed_manifold": m.is_closed_manifold(),
                    }));
                }
            }
        }
        let metrics = serde_json::json!({
            "scene": fields.spec.name,
            "seed": self.config.seed,
            "categories": fields.spec.categories,
            "guidance": self.config.dissect.guidance,
            "iou_mean": entry.mean_iou,
            "iou_min": entry.min_iou,
            "iou_per_camera": entry.iou,
            "composition_max_error": entry.composition_max_error,
            "meshes": meshes,
        });
        self.layout.ensure("metrics")?;
        write_json(&self.layout.metrics("metrics"), &metrics)
    }
}

/// Area-downsamples full-size composite views and per-camera masks
/// (`masks[c][k]`) to the denoiser resolution; downsampled masks are
/// rebinarized at 0.5.
pub fn mining_data(views: &[Image], masks: &[Vec<Image>], size: usize) -> Result<MiningData> {
    if views.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!("{} views with {} mask sets", views.len(), masks.len())));
    }
    let full = views.first().map_or(size, Image::width);
    if size == 0 || full % size != 0 {
        return Err(config_error(format!("mining view size {full} is not a multiple of {size}")));
    }
    let factor = full / size;
    let small_views = views.iter().map(|v| v.downsample_area(factor)).collect::<Result<Vec<_>>>()?;
    let kcount = masks.first().map_or(0, Vec::len);
    let small_masks = (0..kcount)
        .map(|k| {
            masks
                .iter()
                .map(|per_cam| {
                    let small = per_cam.get(k).ok_or_else(|| Error::ShapeMismatch("ragged mask sets".into()))?.downsample_area(factor)?;
                    let data = small.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
                    Image::from_vec(small.width(), small.height(), 1, data)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MiningData {
        views: small_views,
        masks: small_masks,
    })
}
