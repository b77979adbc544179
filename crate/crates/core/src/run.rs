//! Run configuration and the end-to-end steps built on it: dataset
//! synthesis, training from a dataset, and evaluation of held-out views.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, GeometryError, Intrinsics, RgbaImage};
use crate::network::{ModelConfig, NetworkError};
use crate::psv::{DepthSampling, DepthScheme, PosedImage, PsvError, Region};
use crate::render::{image_metrics, quantized, render_region, tensor_to_image, Metrics, Rendering};
use crate::synthdata::{make_dataset, random_scene, DepthMap, Manifest, RigSpec, SceneData, SceneEntry, SceneGenConfig, SynthError};
use crate::training::{choose_sources, initial_checkpoint, train, Checkpoint, TrainConfig, TrainOutcome, TrainingError, TrainingScene};

pub const RUN_CONFIG_NAME: &str = "run_config.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    NotFound(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Psv(#[from] PsvError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, RunError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

/// Synthetic dataset settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scenes: usize,
    /// Views per scene; `None` means one more than the model's source count.
    pub views: Option<usize>,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Distance between neighbouring cameras on the track.
    pub spacing: f64,
    pub jitter: f64,
    pub generator: SceneGenConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 24,
            views: None,
            width: 32,
            height: 32,
            focal: 32.0,
            spacing: 0.4,
            jitter: 0.02,
            generator: SceneGenConfig { depth_range: (2.0, 8.0), layers: 3, coverage: 1.5, octaves: 2, cell: 8.0, texel_density: 24.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Output patch size used when tiling a view.
    pub tile: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { tile: crate::network::PATCH_OUTPUT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub tolerance: f64,
    /// Evaluation points per op.
    pub points: usize,
    pub step: f64,
    /// Evaluation points for the whole-network check.
    pub network_points: usize,
    pub network_step: f64,
    /// Points whose relu/L1 inputs come closer than this to a kink are redrawn.
    pub min_kink_margin: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { tolerance: 1e-4, points: 5, step: 1e-4, network_points: 3, network_step: 1e-5, min_kink_margin: 1e-3 }
    }
}

/// Everything a run depends on. Written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed: scene generation, initialization and the sample stream.
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub sampling: DepthSampling,
    pub training: TrainConfig,
    pub synth: SynthConfig,
    pub render: RenderConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk(5, 16);
        let sampling = DepthSampling { d_min: 2.0, d_max: 8.0, count: 16, scheme: DepthScheme::InverseDepthUniform };
        Self {
            seed: 0,
            dataset: None,
            out: None,
            model,
            sampling,
            training: TrainConfig::default(),
            synth: SynthConfig::default(),
            render: RenderConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Copies the master seed into the training section and checks consistency.
    pub fn resolve(mut self) -> Result<Self> {
        self.training.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampling.validate()?;
        self.training.validate()?;
        if self.sampling.count != self.model.depth_planes {
            return Err(RunError::Config(format!(
                "sampling has {} planes but the model expects {}",
                self.sampling.count, self.model.depth_planes
            )));
        }
        if self.render.tile == 0 {
            return Err(RunError::Config("render tile must be at least 1".into()));
        }
        if self.synth.views == Some(0) || self.synth.width == 0 || self.synth.height == 0 {
            return Err(RunError::Config("synthetic views and image size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn views_per_scene(&self) -> usize {
        self.synth.views.unwrap_or(self.model.sources + 1)
    }

    /// Writes `run_config.json` into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(RUN_CONFIG_NAME);
        fs::write(&path, self.to_json() + "\n").map_err(io_err(&path))?;
        Ok(path)
    }
}

/// Deterministic per-scene seeds derived from a master seed.
fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.gen()
}

/// Random scenes on linear camera tracks, as described by `cfg.synth`.
pub fn synth_entries(cfg: &RunConfig) -> Result<Vec<SceneEntry>> {
    let s = &cfg.synth;
    let k = Intrinsics::new(s.focal, s.focal, (s.width as f64 - 1.0) / 2.0, (s.height as f64 - 1.0) / 2.0, s.width, s.height)?;
    (0..s.scenes)
        .map(|i| {
            let seed = scene_seed(cfg.seed, i);
            Ok(SceneEntry {
                scene: random_scene(&s.generator, seed)?,
                rig: RigSpec::linear_track(k, cfg.views_per_scene(), s.spacing, s.jitter, seed),
            })
        })
        .collect()
}

/// Renders the configured dataset into `out` and records the run config there.
pub fn synthesize(cfg: &RunConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    let manifest = make_dataset(&synth_entries(cfg)?, out)?;
    cfg.write_to(out)?;
    Ok(manifest)
}

/// Trains from scratch, or continues `resume`, on `scenes`.
pub fn train_run(cfg: &RunConfig, scenes: &[TrainingScene], resume: Option<Checkpoint>, out: impl AsRef<Path>) -> Result<TrainOutcome> {
    let out = out.as_ref();
    let mut ckpt = match resume {
        Some(mut c) => {
            if c.meta.model != cfg.model || c.meta.sampling != cfg.sampling {
                return Err(RunError::Config("checkpoint architecture or depth sampling differs from the configuration".into()));
            }
            let (a, b) = (&c.meta.training, &cfg.training);
            if (a.batch_size, a.learning_rate, a.epsilon, a.seed, &a.policy) != (b.batch_size, b.learning_rate, b.epsilon, b.seed, &b.policy) {
                return Err(RunError::Config("batch size, learning rate, epsilon, seed and view policy cannot change on resume".into()));
            }
            c.meta.training = cfg.training.clone();
            c
        }
        None => initial_checkpoint(&cfg.model, &cfg.sampling, &cfg.training)?,
    };
    // The output location is not part of what determines the weights.
    let embedded = RunConfig { out: None, ..cfg.clone() };
    ckpt.meta.run = Some(serde_json::to_value(&embedded).expect("run config serializes"));
    cfg.write_to(out)?;
    Ok(train(scenes, ckpt, out)?)
}

/// The `k` views nearest `target` in `scene`, nearest first.
pub fn sources_for(scene: &SceneData, target: usize, k: usize) -> Result<Vec<usize>> {
    if target >= scene.views.len() {
        return Err(RunError::NotFound(format!("view {target} not in scene {} ({} views)", scene.id, scene.views.len())));
    }
    let cams: Vec<Camera> = scene.views.iter().map(|v| v.camera).collect();
    choose_sources(&cams, target, k, None).ok_or_else(|| {
        RunError::Config(format!("scene {} has {} views; {k} sources plus the target are needed", scene.id, scene.views.len()))
    })
}

/// Outcome of rendering a withheld view and comparing it with the stored image.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scene: String,
    pub view: usize,
    pub sources: Vec<usize>,
    /// Metrics of the 8-bit prediction against the stored image.
    pub metrics: Metrics,
    pub prediction: RgbaImage,
    pub rendering: Rendering,
    /// Fraction of unoccluded pixels whose selection argmax is the plane nearest
    /// the true depth, and how many pixels were counted.
    pub argmax_agreement: Option<(f64, usize)>,
}

/// Renders view `target` of `scene` from its nearest other views.
pub fn evaluate_view(ckpt: &Checkpoint, scene: &SceneData, target: usize, tile: usize) -> Result<Evaluation> {
    let model = &ckpt.meta.model;
    let sampling = &ckpt.meta.sampling;
    let sources = sources_for(scene, target, model.sources)?;
    let posed: Vec<PosedImage> =
        sources.iter().map(|&i| PosedImage { image: scene.views[i].image.clone(), camera: scene.views[i].camera }).collect();
    let cam = &scene.views[target].camera;
    let rendering = render_region(&posed, cam, sampling, &ckpt.params, model, Region::full(cam), tile)?;
    let prediction = quantized(&tensor_to_image(&rendering.image));
    let metrics = image_metrics(&prediction, &scene.views[target].image)?;
    let mask = unoccluded_mask(scene, target, &sources, 0.02);
    let argmax_agreement = argmax_agreement(&rendering.selection, &scene.views[target].depth, &mask, sampling);
    Ok(Evaluation { scene: scene.id.clone(), view: target, sources, metrics, prediction, rendering, argmax_agreement })
}

/// Target pixels with finite depth that every source sees directly: the
/// reprojected point lands inside the source and agrees with the source's
/// own depth there within relative tolerance `tol`.
pub fn unoccluded_mask(scene: &SceneData, target: usize, sources: &[usize], tol: f64) -> Vec<bool> {
    let view = &scene.views[target];
    let (w, h) = (view.camera.width(), view.camera.height());
    let mut mask = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let d = view.depth.get(x, y);
            if !d.is_finite() {
                continue;
            }
            let Ok(p) = view.camera.unproject(&Vector2::new(x as f64, y as f64), d as f64) else { continue };
            mask[(y * w + x) as usize] = sources.iter().all(|&s| {
                let src = &scene.views[s];
                let Ok((uv, z)) = src.camera.project(&p) else { return false };
                let (u, v) = (uv.x.round(), uv.y.round());
                if u < 0.0 || v < 0.0 || u >= src.camera.width() as f64 || v >= src.camera.height() as f64 {
                    return false;
                }
                let ds = src.depth.get(u as u32, v as u32) as f64;
                (ds - z).abs() <= tol * z
            });
        }
    }
    mask
}

/// Agreement of the selection argmax (`[D, H, W]`) with the plane nearest the
/// true depth over masked pixels; `None` when the mask is empty.
pub fn argmax_agreement(
    selection: &crate::autodiff::Tensor<f32>,
    depth: &DepthMap,
    mask: &[bool],
    sampling: &DepthSampling,
) -> Option<(f64, usize)> {
    let d = selection.shape()[0];
    let hw = selection.shape()[1] * selection.shape()[2];
    let sel = selection.data();
    let (mut hits, mut total) = (0usize, 0usize);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let best = (0..d).fold(0, |b, z| if sel[z * hw + p] > sel[b * hw + p] { z } else { b });
        total += 1;
        if best == sampling.nearest_plane(depth.data[p] as f64) {
            hits += 1;
        }
    }
    (total > 0).then(|| (hits as f64 / total as f64, total))
}
