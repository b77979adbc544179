//! Online sample generation, mini-batching, Adagrad and checkpointing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Element, Graph, Tensor, TensorError};
use crate::geometry::Camera;
use crate::network::{build_forward, multires_preprocess, ModelConfig, ModelParams, NetworkError, NetworkInput, SweepInputs, PATCH_OUTPUT};
use crate::psv::{DepthSampling, PosedImage, Region};
use crate::synthdata::Dataset;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("shape mismatch for parameter {name}: {message}")]
    ShapeMismatch { name: String, message: String },
    #[error("no scene has enough views for {needed} (target plus sources)")]
    NoEligibleScenes { needed: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainingError>;

/// Which views of a scene may serve as training targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TargetViews {
    #[default]
    All,
    Indices(Vec<usize>),
}

/// How a target view and its sources are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SelectionPolicy {
    #[serde(default)]
    pub targets: TargetViews,
    /// Largest camera-center distance from the target for a view to be a source.
    #[serde(default)]
    pub max_baseline: Option<f64>,
}

/// The `k` views nearest to `target` (by camera center), nearest first, ties by index.
pub fn choose_sources(cameras: &[Camera], target: usize, k: usize, max_baseline: Option<f64>) -> Option<Vec<usize>> {
    let c = cameras[target].pose.center();
    let mut cands: Vec<(f64, usize)> = cameras
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(i, cam)| ((cam.pose.center() - c).norm(), i))
        .filter(|&(d, _)| max_baseline.is_none_or(|m| d <= m))
        .collect();
    if cands.len() < k {
        return None;
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Some(cands.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Posed views of one scene, ready for reprojection.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub id: String,
    pub views: Vec<PosedImage>,
}

impl TrainingScene {
    pub fn from_dataset(dataset: &Dataset) -> Vec<TrainingScene> {
        dataset
            .scenes
            .iter()
            .map(|s| TrainingScene {
                id: s.id.clone(),
                views: s.views.iter().map(|v| PosedImage { image: v.image.clone(), camera: v.camera }).collect(),
            })
            .collect()
    }
}

/// One training example: multi-resolution inputs for an 8x8 output and its ground truth.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub input: NetworkInput<f32>,
    /// `[3, 8, 8]`
    pub target: Tensor<f32>,
    pub scene: usize,
    pub target_view: usize,
    pub sources: Vec<usize>,
    /// Top-left output pixel in the target view.
    pub origin: (i64, i64),
}

/// Deterministic, indexable, unbounded stream of samples: sample `i` depends
/// only on the seed and `i`.
pub struct SampleStream<'a> {
    scenes: &'a [TrainingScene],
    model: &'a ModelConfig,
    sampling: &'a DepthSampling,
    seed: u64,
    /// `(scene, target, sources)` combinations that satisfy the policy.
    choices: Vec<(usize, usize, Vec<usize>)>,
}

impl<'a> SampleStream<'a> {
    pub fn new(
        scenes: &'a [TrainingScene],
        policy: &SelectionPolicy,
        model: &'a ModelConfig,
        sampling: &'a DepthSampling,
        seed: u64,
    ) -> Result<Self> {
        model.check_patch_contract()?;
        let k = model.sources;
        let mut choices = Vec::new();
        for (s, scene) in scenes.iter().enumerate() {
            if scene.views.len() < k + 1 {
                log::warn!("scene {} has {} views, needs {}; skipped", scene.id, scene.views.len(), k + 1);
                continue;
            }
            let cameras: Vec<Camera> = scene.views.iter().map(|v| v.camera).collect();
            let targets: Vec<usize> = match &policy.targets {
                TargetViews::All => (0..cameras.len()).collect(),
                TargetViews::Indices(ix) => ix.iter().copied().filter(|&i| i < cameras.len()).collect(),
            };
            let before = choices.len();
            for t in targets {
                if cameras[t].width() < PATCH_OUTPUT as u32 || cameras[t].height() < PATCH_OUTPUT as u32 {
                    continue;
                }
                if let Some(src) = choose_sources(&cameras, t, k, policy.max_baseline) {
                    choices.push((s, t, src));
                }
            }
            if choices.len() == before {
                log::warn!("scene {} has no target with {k} sources under the selection policy; skipped", scene.id);
            }
        }
        if choices.is_empty() {
            return Err(TrainingError::NoEligibleScenes { needed: k + 1 });
        }
        Ok(Self { scenes, model, sampling, seed, choices })
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    pub fn sample(&self, index: u64) -> Result<TrainingSample> {
        let mut rng = self.rng(index);
        let (s, t, ref src) = self.choices[rng.gen_range(0..self.choices.len())];
        let scene = &self.scenes[s];
        let target = &scene.views[t];
        let p = PATCH_OUTPUT as u32;
        let x0 = rng.gen_range(0..=target.image.width() - p) as i64;
        let y0 = rng.gen_range(0..=target.image.height() - p) as i64;
        let sources: Vec<PosedImage> = src.iter().map(|&i| scene.views[i].clone()).collect();
        let sweep = SweepInputs { sources: &sources, target: &target.camera, sampling: self.sampling };
        let input = multires_preprocess(Region::new(x0, y0, p, p), &sweep, self.model)?;
        Ok(TrainingSample {
            input,
            target: image_patch(&target.image, x0, y0, PATCH_OUTPUT, PATCH_OUTPUT),
            scene: s,
            target_view: t,
            sources: src.clone(),
            origin: (x0, y0),
        })
    }

    /// Samples `[start, start + size)`, built in parallel.
    pub fn batch(&self, start: u64, size: usize) -> Result<Vec<TrainingSample>> {
        (0..size as u64).into_par_iter().map(|i| self.sample(start + i)).collect()
    }

    pub fn iter_from(&self, start: u64) -> impl Iterator<Item = Result<TrainingSample>> + '_ {
        (start..).map(move |i| self.sample(i))
    }
}

/// RGB channels of an image crop as `[3, h, w]`.
pub fn image_patch<T: Element>(img: &crate::geometry::RgbaImage, x0: i64, y0: i64, w: usize, h: usize) -> Tensor<T> {
    let crop = img.crop(x0, y0, w as u32, h as u32);
    let raw = crop.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::of_f64(raw[4 * p + c] as f64)
    })
}

/// Collects `size` consecutive samples from a stream.
pub fn make_minibatch(stream: &mut impl Iterator<Item = Result<TrainingSample>>, size: usize) -> Result<Vec<TrainingSample>> {
    if size == 0 {
        return Err(TrainingError::InvalidConfig("batch size must be at least 1".into()));
    }
    stream.take(size).collect()
}

/// L1 loss of one sample and its parameter gradients.
pub fn sample_loss_and_grads<T: Element>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    input: &NetworkInput<T>,
    target: &Tensor<T>,
) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
    let mut g = Graph::new();
    let pv = params.register(&mut g)?;
    let out = build_forward(&mut g, input, &pv, config)?;
    let t = g.input(target.clone())?;
    let loss = g.l1_loss(out.image, t)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), grads.into_map()))
}

/// Summed L1 loss over a batch and summed gradients, reduced in sample order.
pub fn batch_loss_and_grads(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    batch: &[TrainingSample],
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let per_sample: Vec<(f32, BTreeMap<String, Tensor<f32>>)> = batch
        .par_iter()
        .map(|s| sample_loss_and_grads(params, config, &s.input, &s.target))
        .collect::<Result<_>>()?;
    let mut loss = 0.0f64;
    let mut total: Option<BTreeMap<String, Tensor<f32>>> = None;
    for (l, grads) in per_sample {
        loss += l as f64;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (name, g) in grads {
                    acc.get_mut(&name).expect("same parameter set").add_assign(&g)?;
                }
            }
        }
    }
    Ok((loss, total.unwrap_or_default()))
}

/// Summed L1 loss of a batch without gradients.
pub fn batch_loss(params: &ModelParams<f32>, config: &ModelConfig, batch: &[TrainingSample]) -> Result<f64> {
    let losses: Vec<f32> = batch
        .par_iter()
        .map(|s| {
            let pred = crate::network::forward(&s.input, params, config)?;
            Ok(pred.image.data().iter().zip(s.target.data()).map(|(a, b)| (a - b).abs()).sum())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().map(|&l| l as f64).sum())
}

/// Per-parameter squared-gradient accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState<T> {
    pub learning_rate: f64,
    pub epsilon: f64,
    pub accumulators: BTreeMap<String, Tensor<T>>,
}

pub const DEFAULT_EPSILON: f64 = 1e-8;

impl<T: Element> AdagradState<T> {
    pub fn new(params: &ModelParams<T>, learning_rate: f64, epsilon: f64) -> Self {
        Self {
            learning_rate,
            epsilon,
            accumulators: params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect(),
        }
    }
}

/// `acc += g^2; p -= lr * g / (sqrt(acc) + eps)` for every element. Nothing
/// is modified when any gradient is non-finite or mis-shaped.
pub fn adagrad_step<T: Element>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdagradState<T>,
) -> Result<()> {
    for (name, p) in params.iter() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(TrainingError::ShapeMismatch {
                name: name.clone(),
                message: format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
            });
        }
        if !g.is_finite() {
            return Err(TrainingError::NonFiniteGradient { name: name.clone() });
        }
        match state.accumulators.get(name) {
            Some(a) if a.shape() == p.shape() => {}
            _ => {
                return Err(TrainingError::ShapeMismatch { name: name.clone(), message: "missing or mis-shaped accumulator".into() })
            }
        }
    }
    if let Some(extra) = grads.keys().find(|n| params.get(n).is_none()) {
        return Err(TrainingError::ShapeMismatch { name: extra.clone(), message: "gradient for unknown parameter".into() });
    }
    let lr = T::of_f64(state.learning_rate);
    let eps = T::of_f64(state.epsilon);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let acc = state.accumulators.get_mut(name).expect("checked above");
        for ((pv, av), &gv) in p.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
            *av = *av + gv * gv;
            *pv = *pv - lr * gv / (av.sqrt() + eps);
        }
    }
    Ok(())
}

/// Training hyperparameters and bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    /// Total number of optimizer steps (including those before a resume).
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Bounded queue length between sample producer and optimizer, in batches.
    pub queue_batches: usize,
    pub policy: SelectionPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.0005,
            epsilon: DEFAULT_EPSILON,
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            queue_batches: 2,
            policy: SelectionPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainingError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainingError::InvalidConfig(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(TrainingError::InvalidConfig(format!("bad epsilon {}", self.epsilon)));
        }
        if self.queue_batches == 0 {
            return Err(TrainingError::InvalidConfig("queue_batches must be at least 1".into()));
        }
        Ok(())
    }
}

/// Self-describing header of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub sampling: DepthSampling,
    pub training: TrainConfig,
    pub step: u64,
    /// Seed of the sample stream; sample `i` is fully determined by it.
    pub seed: u64,
    pub samples_consumed: u64,
    pub learning_rate: f64,
    pub epsilon: f64,
    /// The fully resolved run configuration that produced this checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams<f32>,
    pub optimizer: AdagradState<f32>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSWT";
pub const CHECKPOINT_VERSION: u16 = 1;
const ADAGRAD_PREFIX: &str = "adagrad/";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.meta).expect("checkpoint header serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let arrays: Vec<(String, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .chain(self.optimizer.accumulators.iter().map(|(n, t)| (format!("{ADAGRAD_PREFIX}{n}"), t)))
            .collect();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = r.u32("header length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        let count = r.u32("array count")?;
        let mut params = BTreeMap::new();
        let mut accumulators = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("array name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "array name")?.to_vec())
                .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
            let rank = r.u32("array rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("array dims").map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or(CheckpointError::Truncated { what: "array data" })?, "array data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).expect("length matches shape");
            let dup = match name.strip_prefix(ADAGRAD_PREFIX) {
                Some(p) => accumulators.insert(p.to_string(), t).is_some(),
                None => params.insert(name.clone(), t).is_some(),
            };
            if dup {
                return Err(CheckpointError::Malformed(format!("duplicate array {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let params = ModelParams::from_tensors(&meta.model, params).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        for (name, p) in params.iter() {
            if accumulators.get(name).map(|a| a.shape()) != Some(p.shape()) {
                return Err(CheckpointError::Malformed(format!("missing or mis-shaped accumulator for {name}")));
            }
        }
        if accumulators.len() != params.len() {
            return Err(CheckpointError::Malformed("accumulators for unknown parameters".into()));
        }
        let optimizer = AdagradState { learning_rate: meta.learning_rate, epsilon: meta.epsilon, accumulators };
        Ok(Self { meta, params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::result::Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Fresh parameters for a run seeded with `seed`.
pub fn initial_params(model: &ModelConfig, seed: u64) -> Result<ModelParams<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Sample streams use indices from 0; initialization takes the last stream.
    rng.set_stream(u64::MAX);
    Ok(ModelParams::init(model, &mut rng)?)
}

/// A fresh checkpoint at step 0.
pub fn initial_checkpoint(model: &ModelConfig, sampling: &DepthSampling, training: &TrainConfig) -> Result<Checkpoint> {
    model.check_patch_contract()?;
    training.validate()?;
    if sampling.count != model.depth_planes {
        return Err(TrainingError::InvalidConfig(format!(
            "depth sampling has {} planes, model expects {}",
            sampling.count, model.depth_planes
        )));
    }
    let params = initial_params(model, training.seed)?;
    let optimizer = AdagradState::new(&params, training.learning_rate, training.epsilon);
    Ok(Checkpoint {
        meta: CheckpointMeta {
            model: model.clone(),
            sampling: *sampling,
            training: training.clone(),
            step: 0,
            seed: training.seed,
            samples_consumed: 0,
            learning_rate: training.learning_rate,
            epsilon: training.epsilon,
            run: None,
        },
        params,
        optimizer,
    })
}

/// One optimizer step on a prepared batch; returns the batch loss before the update.
pub fn train_step(ckpt: &mut Checkpoint, batch: &[TrainingSample]) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(&ckpt.params, &ckpt.meta.model, batch)?;
    adagrad_step(&mut ckpt.params, &grads, &mut ckpt.optimizer)?;
    ckpt.meta.step += 1;
    ckpt.meta.samples_consumed += batch.len() as u64;
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub final_path: PathBuf,
    /// `(step, loss)` for the steps run by this call.
    pub losses: Vec<(u64, f64)>,
}

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.dswt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.dswt")
}

/// Runs `ckpt.meta.training.steps - ckpt.meta.step` steps, writing periodic
/// checkpoints, `final.dswt` and `loss.csv` (appended to when resuming) to `out_dir`.
pub fn train(scenes: &[TrainingScene], mut ckpt: Checkpoint, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    let out_dir = out_dir.as_ref();
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| TrainingError::Io { path: p, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let cfg = ckpt.meta.training.clone();
    cfg.validate()?;
    let model = ckpt.meta.model.clone();
    let sampling = ckpt.meta.sampling;
    let stream = SampleStream::new(scenes, &cfg.policy, &model, &sampling, ckpt.meta.seed)?;

    let log_path = out_dir.join(LOSS_LOG);
    let fresh_log = ckpt.meta.step == 0 || !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(io(&log_path))?;
    if fresh_log {
        writeln!(log, "step,loss,wall_ms").map_err(io(&log_path))?;
    }

    let first = ckpt.meta.step;
    let remaining = cfg.steps.saturating_sub(first);
    let batch = cfg.batch_size;
    let start_sample = ckpt.meta.samples_consumed;
    let mut losses = Vec::with_capacity(remaining as usize);
    let started = Instant::now();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Vec<TrainingSample>>>(cfg.queue_batches);
        let stream = &stream;
        scope.spawn(move || {
            for i in 0..remaining {
                let b = stream.batch(start_sample + i * batch as u64, batch);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        for _ in 0..remaining {
            let samples = rx.recv().expect("producer sends one batch per step")?;
            let loss = train_step(&mut ckpt, &samples)?;
            let step = ckpt.meta.step;
            losses.push((step, loss));
            writeln!(log, "{step},{loss},{}", started.elapsed().as_millis()).map_err(io(&log_path))?;
            log::debug!("step {step}: loss {loss:.4}");
            if step.is_multiple_of(cfg.checkpoint_every) {
                ckpt.save(out_dir.join(checkpoint_name(step)))?;
            }
        }
        Ok(())
    })?;
    log.flush().map_err(io(&log_path))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    ckpt.save(&final_path)?;
    Ok(TrainOutcome { checkpoint: ckpt, final_path, losses })
}
