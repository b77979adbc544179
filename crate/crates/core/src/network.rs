//! Selection and color towers over plane-sweep volumes.
//!
//! Both towers share one structure (but not parameters): every plane of the
//! sweep goes through the same per-plane convolution stack, one stack per
//! resolution pathway, after which pathways are upsampled, cropped to a
//! common window and concatenated for a few merged layers. The selection
//! tower then connects planes through per-pixel dense layers and a softmax
//! over depth; the color tower maps each plane to RGB with a linear layer.
//! The output pixel is the selection-weighted sum of plane colors.
//!
//! Tensor layouts: pathway inputs are `[D, 4K, h, w]` (source-major RGBA
//! channels), selection maps `[D, 1, H, W]`, color volumes `[D, 3, H, W]`,
//! images `[3, H, W]`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_check, Element, GradCheckReport, Graph, Tensor, TensorError, Var};
use crate::geometry::{Camera, RgbaImage};
use crate::psv::{build_psv, DepthSampling, PosedImage, PsvError, Region};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Psv(#[from] PsvError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Output patch size the receptive-field contract is stated for.
pub const PATCH_OUTPUT: usize = 8;
/// Input patch size that yields a [`PATCH_OUTPUT`] patch at full resolution.
pub const PATCH_INPUT: usize = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: usize,
    pub channels: usize,
}

impl ConvLayer {
    pub const fn new(kernel: usize, channels: usize) -> Self {
        Self { kernel, channels }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathwayConfig {
    /// Downsampling factor of this pathway relative to full resolution.
    pub factor: usize,
    pub layers: Vec<ConvLayer>,
}

/// How source views are assigned to input channel slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SourceOrder {
    /// Sorted by camera-center distance to the target, nearest first; ties by view index.
    #[default]
    NearestFirst,
}

/// Architecture shared by both towers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of source views `K`.
    pub sources: usize,
    /// Number of depth planes `D`.
    pub depth_planes: usize,
    pub pathways: Vec<PathwayConfig>,
    /// Per-plane layers applied after the pathways are merged.
    pub merged: Vec<ConvLayer>,
    /// Widths of the selection tower's cross-depth layers. The last must be
    /// `depth_planes` (the softmax logits) and the one before it uses tanh.
    pub cross_depth: Vec<usize>,
    #[serde(default)]
    pub source_order: SourceOrder,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::standard(5, 16)
    }
}

impl ModelConfig {
    /// Four pathways of 3x3 convs (32, 32, 48, 48), merged by five 3x3x48
    /// convs, for a total shrink of 18 at full resolution.
    pub fn standard(sources: usize, depth_planes: usize) -> Self {
        let stack = vec![ConvLayer::new(3, 32), ConvLayer::new(3, 32), ConvLayer::new(3, 48), ConvLayer::new(3, 48)];
        Self {
            sources,
            depth_planes,
            pathways: [1, 2, 4, 8].iter().map(|&factor| PathwayConfig { factor, layers: stack.clone() }).collect(),
            merged: vec![ConvLayer::new(3, 48); 5],
            cross_depth: vec![96, depth_planes],
            source_order: SourceOrder::NearestFirst,
        }
    }

    /// The default for desk-scale runs: a narrow full-resolution stack plus a
    /// cheap quarter-resolution pathway, then a wide per-pixel tail. Most of
    /// the capacity sits in the 1x1 layers, which cost little on an 8x8 output.
    pub fn desk(sources: usize, depth_planes: usize) -> Self {
        Self {
            sources,
            depth_planes,
            pathways: vec![
                PathwayConfig {
                    factor: 1,
                    layers: vec![ConvLayer::new(1, 8), ConvLayer::new(3, 8), ConvLayer::new(5, 8), ConvLayer::new(5, 8)],
                },
                PathwayConfig { factor: 4, layers: vec![ConvLayer::new(1, 4), ConvLayer::new(3, 4)] },
            ],
            merged: vec![
                ConvLayer::new(5, 8),
                ConvLayer::new(3, 8),
                ConvLayer::new(3, 8),
                ConvLayer::new(1, 64),
                ConvLayer::new(1, 64),
            ],
            cross_depth: vec![128, depth_planes],
            source_order: SourceOrder::NearestFirst,
        }
    }

    /// Small single-core-friendly variant that keeps the 26 -> 8 contract.
    pub fn compact(sources: usize, depth_planes: usize) -> Self {
        Self {
            sources,
            depth_planes,
            pathways: vec![
                PathwayConfig { factor: 1, layers: vec![ConvLayer::new(1, 12), ConvLayer::new(5, 12), ConvLayer::new(5, 12)] },
                PathwayConfig { factor: 4, layers: vec![ConvLayer::new(1, 6), ConvLayer::new(3, 6)] },
            ],
            merged: vec![ConvLayer::new(5, 12), ConvLayer::new(5, 12), ConvLayer::new(3, 12)],
            cross_depth: vec![32, depth_planes],
            source_order: SourceOrder::NearestFirst,
        }
    }

    pub fn input_channels(&self) -> usize {
        4 * self.sources
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        if self.sources == 0 {
            return bad("at least one source view is required".into());
        }
        if self.depth_planes < 2 {
            return bad(format!("need at least 2 depth planes, got {}", self.depth_planes));
        }
        if self.pathways.is_empty() {
            return bad("at least one resolution pathway is required".into());
        }
        if self.pathways[0].factor != 1 {
            return bad("the first pathway must be at full resolution (factor 1)".into());
        }
        for (r, p) in self.pathways.iter().enumerate() {
            if p.factor == 0 {
                return bad(format!("pathway {r} has factor 0"));
            }
            if r > 0 && p.factor <= self.pathways[r - 1].factor {
                return bad("pathway factors must be strictly increasing".into());
            }
        }
        for layer in self.pathways.iter().flat_map(|p| &p.layers).chain(&self.merged) {
            if layer.kernel % 2 == 0 || layer.channels == 0 {
                return bad(format!("conv layers need an odd kernel and at least one channel, got {layer:?}"));
            }
        }
        if self.merged.is_empty() && self.pathways.iter().any(|p| p.layers.is_empty()) && self.pathways.len() > 1 {
            return bad("multi-pathway models need per-pathway layers or merged layers".into());
        }
        if self.cross_depth.len() < 2 {
            return bad("the cross-depth stage needs a tanh layer followed by the logits layer".into());
        }
        if *self.cross_depth.last().unwrap() != self.depth_planes {
            return bad(format!(
                "the last cross-depth width must equal depth_planes ({}), got {}",
                self.depth_planes,
                self.cross_depth.last().unwrap()
            ));
        }
        if self.cross_depth.contains(&0) {
            return bad("cross-depth widths must be positive".into());
        }
        Ok(())
    }

    fn shrink(layers: &[ConvLayer]) -> usize {
        layers.iter().map(|l| l.kernel - 1).sum()
    }

    /// Total spatial shrink of the full-resolution path.
    pub fn receptive_shrink(&self) -> usize {
        Self::shrink(&self.pathways[0].layers) + self.merged_shrink()
    }

    pub fn merged_shrink(&self) -> usize {
        Self::shrink(&self.merged)
    }

    /// Checks that an 8x8 output needs exactly a 26x26 full-resolution input.
    pub fn check_patch_contract(&self) -> Result<()> {
        self.validate()?;
        if PATCH_OUTPUT + self.receptive_shrink() != PATCH_INPUT {
            return Err(NetworkError::InvalidConfig(format!(
                "full-resolution shrink is {}, an {PATCH_OUTPUT}x{PATCH_OUTPUT} patch needs {}",
                self.receptive_shrink(),
                PATCH_INPUT - PATCH_OUTPUT
            )));
        }
        Ok(())
    }

    /// Channels entering the merged stage.
    fn merge_channels(&self) -> usize {
        self.pathways
            .iter()
            .map(|p| p.layers.last().map_or(self.input_channels(), |l| l.channels))
            .sum()
    }

    /// Per-plane feature channels at the end of the shared stage.
    pub fn feature_channels(&self) -> usize {
        self.merged.last().map_or(self.merge_channels(), |l| l.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Selection,
    Color,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Selection => "select",
            Tower::Color => "color",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zero,
}

/// Every parameter of the model: name, shape and initializer.
fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<_>, name: String, cin: usize, cout: usize, k: usize, init_zero: bool| {
        let init = if init_zero { Init::Zero } else { Init::Glorot { fan_in: cin * k * k, fan_out: cout * k * k } };
        specs.push((format!("{name}/weight"), vec![cout, cin, k, k], init));
        specs.push((format!("{name}/bias"), vec![cout], Init::Zero));
    };
    for tower in [Tower::Selection, Tower::Color] {
        let t = tower.prefix();
        for (r, p) in config.pathways.iter().enumerate() {
            let mut cin = config.input_channels();
            for (i, l) in p.layers.iter().enumerate() {
                conv(&mut specs, format!("{t}/path{r}/conv{i}"), cin, l.channels, l.kernel, false);
                cin = l.channels;
            }
        }
        let mut cin = config.merge_channels();
        for (i, l) in config.merged.iter().enumerate() {
            conv(&mut specs, format!("{t}/merge/conv{i}"), cin, l.channels, l.kernel, false);
            cin = l.channels;
        }
        match tower {
            Tower::Selection => {
                let mut cin = config.depth_planes * cin;
                let last = config.cross_depth.len() - 1;
                for (i, &w) in config.cross_depth.iter().enumerate() {
                    conv(&mut specs, format!("{t}/depth{i}"), cin, w, 1, i == last);
                    cin = w;
                }
            }
            Tower::Color => conv(&mut specs, format!("{t}/out"), cin, 3, 1, false),
        }
    }
    specs
}

/// Named weights of both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ModelParams<T> {
    /// Glorot-uniform weights, zero biases, zero logits layer.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let tensors = param_specs(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Zero => Tensor::zeros(&shape),
                    Init::Glorot { fan_in, fan_out } => {
                        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        Tensor::from_fn(&shape, |_| T::of_f64(rng.gen_range(-limit..=limit)))
                    }
                };
                (name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { tensors: param_specs(config).into_iter().map(|(n, s, _)| (n, Tensor::zeros(&s))).collect() })
    }

    /// Builds from named tensors, checking names and shapes against `config`.
    pub fn from_tensors(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(config);
        let mut out = BTreeMap::new();
        for (name, shape, _) in specs {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| NetworkError::InvalidArgument(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(NetworkError::InvalidArgument(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(NetworkError::InvalidArgument(format!("unexpected parameter {extra}")));
        }
        Ok(Self { tensors: out })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Registers every tensor as a named graph parameter.
    pub fn register(&self, g: &mut Graph<T>) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), g.param(name, t.clone())?);
        }
        Ok(ParamVars(vars))
    }
}

/// Graph handles of registered parameters.
#[derive(Debug, Clone)]
pub struct ParamVars(BTreeMap<String, Var>);

impl ParamVars {
    /// Pairs parameter names with graph handles created elsewhere.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| NetworkError::InvalidArgument(format!("missing parameter {name}")))
    }

    fn conv(&self, name: &str) -> Result<(Var, Var)> {
        Ok((self.get(&format!("{name}/weight"))?, self.get(&format!("{name}/bias"))?))
    }
}

/// One resolution pathway's input stack and where its upsampled features
/// sit relative to the merged window.
#[derive(Debug, Clone, PartialEq)]
pub struct PathwayInput<T> {
    pub factor: usize,
    /// `[D, 4K, h, w]`
    pub data: Tensor<T>,
    pub crop_top: usize,
    pub crop_left: usize,
}

/// Everything one forward pass needs for an `out_height x out_width` output.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput<T> {
    pub pathways: Vec<PathwayInput<T>>,
    pub out_height: usize,
    pub out_width: usize,
}

impl<T: Element> NetworkInput<T> {
    pub fn cast<U: Element>(&self) -> NetworkInput<U> {
        NetworkInput {
            pathways: self
                .pathways
                .iter()
                .map(|p| PathwayInput { factor: p.factor, data: p.data.cast(), crop_top: p.crop_top, crop_left: p.crop_left })
                .collect(),
            out_height: self.out_height,
            out_width: self.out_width,
        }
    }

    /// Single full-resolution pathway built directly from per-source volumes.
    pub fn from_planes(planes: &[Vec<RgbaImage>], config: &ModelConfig) -> Result<Self> {
        let shrink = config.receptive_shrink();
        let data = stack_planes(planes)?;
        let (h, w) = (data.shape()[2], data.shape()[3]);
        if h <= shrink || w <= shrink {
            return Err(NetworkError::InvalidArgument(format!("input {h}x{w} smaller than the receptive field")));
        }
        Ok(Self {
            pathways: vec![PathwayInput { factor: 1, data, crop_top: 0, crop_left: 0 }],
            out_height: h - shrink,
            out_width: w - shrink,
        })
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[3, H, W]`
    pub image: Var,
    /// `[D, 1, H, W]`
    pub selection: Var,
    /// `[D, 3, H, W]`
    pub colors: Var,
}

fn check_input<T: Element>(input: &NetworkInput<T>, config: &ModelConfig) -> Result<()> {
    if input.pathways.len() != config.pathways.len() {
        return Err(NetworkError::InvalidArgument(format!(
            "model has {} pathways, input has {}",
            config.pathways.len(),
            input.pathways.len()
        )));
    }
    let (mh, mw) = (input.out_height + config.merged_shrink(), input.out_width + config.merged_shrink());
    for (r, (p, pc)) in input.pathways.iter().zip(&config.pathways).enumerate() {
        let s = p.data.shape();
        if s.len() != 4 || s[0] != config.depth_planes || s[1] != config.input_channels() {
            return Err(NetworkError::InvalidArgument(format!(
                "pathway {r} input {s:?} does not match [D={}, 4K={}, h, w]",
                config.depth_planes,
                config.input_channels()
            )));
        }
        let shrink = ModelConfig::shrink(&pc.layers);
        let need = |crop: usize, merged: usize| (crop + merged).div_ceil(pc.factor) + shrink;
        if s[2] < need(p.crop_top, mh) || s[3] < need(p.crop_left, mw) || p.factor != pc.factor {
            return Err(NetworkError::InvalidArgument(format!(
                "pathway {r} input {}x{} is below the receptive field for a {}x{} output",
                s[2], s[3], input.out_height, input.out_width
            )));
        }
    }
    Ok(())
}

/// Builds both towers and their combination on `g`.
pub fn build_forward<T: Element>(
    g: &mut Graph<T>,
    input: &NetworkInput<T>,
    params: &ParamVars,
    config: &ModelConfig,
) -> Result<ForwardVars> {
    check_input(input, config)?;
    let mut vars = Vec::with_capacity(input.pathways.len());
    for p in &input.pathways {
        vars.push(g.input(p.data.clone())?);
    }
    let selection = selection_tower_graph(g, &vars, input, params, config)?;
    let colors = color_tower_graph(g, &vars, input, params, config)?;
    let image = combine_graph(g, selection, colors)?;
    Ok(ForwardVars { image, selection, colors })
}

fn tower_features<T: Element>(
    g: &mut Graph<T>,
    tower: Tower,
    vars: &[Var],
    input: &NetworkInput<T>,
    params: &ParamVars,
    config: &ModelConfig,
) -> Result<Var> {
    let t = tower.prefix();
    let m = config.merged_shrink();
    let (mh, mw) = (input.out_height + m, input.out_width + m);
    let mut parts = Vec::with_capacity(vars.len());
    for (r, ((&x, pc), pin)) in vars.iter().zip(&config.pathways).zip(&input.pathways).enumerate() {
        let mut h = x;
        for i in 0..pc.layers.len() {
            let (w, b) = params.conv(&format!("{t}/path{r}/conv{i}"))?;
            h = g.conv2d(h, w, b)?;
            h = g.relu(h)?;
        }
        if pc.factor > 1 {
            h = g.upsample_nearest(h, pc.factor)?;
        }
        let s = g.value(h).shape();
        if pin.crop_top != 0 || pin.crop_left != 0 || s[2] != mh || s[3] != mw {
            h = g.crop(h, pin.crop_top, pin.crop_left, mh, mw)?;
        }
        parts.push(h);
    }
    let mut h = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
    for i in 0..config.merged.len() {
        let (w, b) = params.conv(&format!("{t}/merge/conv{i}"))?;
        h = g.conv2d(h, w, b)?;
        h = g.relu(h)?;
    }
    Ok(h)
}

fn selection_tower_graph<T: Element>(
    g: &mut Graph<T>,
    vars: &[Var],
    input: &NetworkInput<T>,
    params: &ParamVars,
    config: &ModelConfig,
) -> Result<Var> {
    let feats = tower_features(g, Tower::Selection, vars, input, params, config)?;
    let s = g.value(feats).shape().to_vec();
    let (d, f, h, w) = (s[0], s[1], s[2], s[3]);
    // Per-pixel feature vectors of all planes side by side: channel z * F + f.
    let mut x = g.reshape(feats, &[1, d * f, h, w])?;
    let last = config.cross_depth.len() - 1;
    for i in 0..config.cross_depth.len() {
        let (wt, b) = params.conv(&format!("select/depth{i}"))?;
        x = g.conv2d(x, wt, b)?;
        if i + 1 == last {
            x = g.tanh(x)?;
        } else if i < last {
            x = g.relu(x)?;
        }
    }
    let probs = g.softmax(x, 1)?;
    Ok(g.reshape(probs, &[d, 1, h, w])?)
}

fn color_tower_graph<T: Element>(
    g: &mut Graph<T>,
    vars: &[Var],
    input: &NetworkInput<T>,
    params: &ParamVars,
    config: &ModelConfig,
) -> Result<Var> {
    let feats = tower_features(g, Tower::Color, vars, input, params, config)?;
    let (w, b) = params.conv("color/out")?;
    Ok(g.conv2d(feats, w, b)?)
}

/// Selection-weighted sum of plane colors: `[D,1,H,W] x [D,3,H,W] -> [3,H,W]`.
pub fn combine_graph<T: Element>(g: &mut Graph<T>, selection: Var, colors: Var) -> Result<Var> {
    let (ss, cs) = (g.value(selection).shape(), g.value(colors).shape());
    if ss.len() != 4 || cs.len() != 4 || ss[1] != 1 || cs[1] != 3 || ss[0] != cs[0] || ss[2..] != cs[2..] {
        return Err(NetworkError::InvalidArgument(format!(
            "cannot combine selection {ss:?} with colors {cs:?}"
        )));
    }
    let weighted = g.mul(selection, colors)?;
    Ok(g.sum_axis(weighted, 0)?)
}

/// Per-pixel probabilities over depth, `[D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMap<T>(pub Tensor<T>);

/// Per-plane colors, `[D, 3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorVolume<T>(pub Tensor<T>);

impl<T: Element> SelectionMap<T> {
    pub fn depth(&self) -> usize {
        self.0.shape()[0]
    }

    /// Index of the most probable plane per pixel, row-major `H x W`.
    pub fn argmax(&self) -> Vec<usize> {
        let s = self.0.shape();
        let (d, hw) = (s[0], s[1] * s[2]);
        let data = self.0.data();
        (0..hw)
            .map(|p| (0..d).fold(0, |best, z| if data[z * hw + p] > data[best * hw + p] { z } else { best }))
            .collect()
    }
}

/// Result of a forward pass with its intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// `[3, H, W]`, unclamped.
    pub image: Tensor<T>,
    pub selection: SelectionMap<T>,
    pub colors: ColorVolume<T>,
}

pub fn forward<T: Element>(input: &NetworkInput<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<Prediction<T>> {
    let mut g = Graph::new();
    let pv = params.register(&mut g)?;
    let out = build_forward(&mut g, input, &pv, config)?;
    let sel = g.value(out.selection).clone();
    let s = sel.shape().to_vec();
    Ok(Prediction {
        image: g.value(out.image).clone(),
        selection: SelectionMap(sel.reshaped(&[s[0], s[2], s[3]])?),
        colors: ColorVolume(g.value(out.colors).clone()),
    })
}

pub fn selection_tower<T: Element>(input: &NetworkInput<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<SelectionMap<T>> {
    check_input(input, config)?;
    let mut g = Graph::new();
    let pv = params.register(&mut g)?;
    let vars = input.pathways.iter().map(|p| g.input(p.data.clone())).collect::<std::result::Result<Vec<_>, _>>()?;
    let sel = selection_tower_graph(&mut g, &vars, input, &pv, config)?;
    let t = g.value(sel).clone();
    let s = t.shape().to_vec();
    Ok(SelectionMap(t.reshaped(&[s[0], s[2], s[3]])?))
}

pub fn color_tower<T: Element>(input: &NetworkInput<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<ColorVolume<T>> {
    check_input(input, config)?;
    let mut g = Graph::new();
    let pv = params.register(&mut g)?;
    let vars = input.pathways.iter().map(|p| g.input(p.data.clone())).collect::<std::result::Result<Vec<_>, _>>()?;
    let c = color_tower_graph(&mut g, &vars, input, &pv, config)?;
    Ok(ColorVolume(g.value(c).clone()))
}

/// Selection-weighted combination of plane colors into a `[3, H, W]` image.
pub fn combine<T: Element>(selection: &SelectionMap<T>, colors: &ColorVolume<T>) -> Result<Tensor<T>> {
    let s = selection.0.shape();
    if s.len() != 3 {
        return Err(NetworkError::InvalidArgument(format!("selection map must be [D, H, W], got {s:?}")));
    }
    let mut g = Graph::new();
    let sv = g.input(selection.0.clone().reshaped(&[s[0], 1, s[1], s[2]])?)?;
    let cv = g.input(colors.0.clone())?;
    let out = combine_graph(&mut g, sv, cv)?;
    Ok(g.value(out).clone())
}

/// Stacks per-source plane lists (`planes[k][z]`, all the same size) into `[D, 4K, h, w]`.
pub fn stack_planes<T: Element>(planes: &[Vec<RgbaImage>]) -> Result<Tensor<T>> {
    let k = planes.len();
    let d = planes.first().map_or(0, |p| p.len());
    if k == 0 || d == 0 {
        return Err(NetworkError::InvalidArgument("need at least one source and one plane".into()));
    }
    let (w, h) = (planes[0][0].width() as usize, planes[0][0].height() as usize);
    if planes.iter().any(|p| p.len() != d || p.iter().any(|i| i.width() as usize != w || i.height() as usize != h)) {
        return Err(NetworkError::InvalidArgument("all sources need the same plane count and size".into()));
    }
    let hw = h * w;
    let mut data = vec![T::zero(); d * 4 * k * hw];
    for (s, vol) in planes.iter().enumerate() {
        for (z, img) in vol.iter().enumerate() {
            let raw = img.as_raw();
            for c in 0..4 {
                let base = (z * 4 * k + s * 4 + c) * hw;
                for (p, dst) in data[base..base + hw].iter_mut().enumerate() {
                    *dst = T::of_f64(raw[4 * p + c] as f64);
                }
            }
        }
    }
    Ok(Tensor::new(vec![d, 4 * k, h, w], data)?)
}

/// Alpha-weighted box filter over `factor x factor` blocks.
pub fn downsample_area(img: &RgbaImage, factor: u32) -> RgbaImage {
    if factor == 1 {
        return img.clone();
    }
    let (w, h) = (img.width() / factor, img.height() / factor);
    let n = (factor * factor) as f64;
    RgbaImage::from_fn(w, h, |x, y| {
        let mut acc = [0.0f64; 4];
        for dy in 0..factor {
            for dx in 0..factor {
                let p = img.pixel(x * factor + dx, y * factor + dy);
                let a = p[3] as f64;
                for c in 0..3 {
                    acc[c] += a * p[c] as f64;
                }
                acc[3] += a;
            }
        }
        if acc[3] <= 0.0 {
            return [0.0; 4];
        }
        let c = |v: f64| ((v / acc[3]) as f32).clamp(0.0, 1.0);
        [c(acc[0]), c(acc[1]), c(acc[2]), ((acc[3] / n) as f32).clamp(0.0, 1.0)]
    })
    .expect("values are clamped to [0, 1]")
}

/// Sources, target camera and depth sampling from which network inputs are cut.
#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub sources: &'a [PosedImage],
    pub target: &'a Camera,
    pub sampling: &'a DepthSampling,
}

/// Window of target pixels (and its crop offset) that pathway `factor`
/// needs for an output region. Low-resolution cells are anchored on the
/// global pixel grid, so the result for any output pixel is independent of
/// how the image is tiled.
pub fn pathway_window(region: Region, merged_shrink: usize, pathway: &PathwayConfig) -> (Region, usize, usize) {
    let f = pathway.factor as i64;
    let a = (merged_shrink / 2) as i64;
    let b = (ModelConfig::shrink(&pathway.layers) / 2) as i64;
    let (x0, y0) = (region.x0 - a, region.y0 - a);
    let (x1, y1) = (region.x0 + region.width as i64 + a - 1, region.y0 + region.height as i64 + a - 1);
    let (u0, u1) = (x0.div_euclid(f), x1.div_euclid(f));
    let (v0, v1) = (y0.div_euclid(f), y1.div_euclid(f));
    let window = Region::new(
        (u0 - b) * f,
        (v0 - b) * f,
        ((u1 - u0 + 1 + 2 * b) * f) as u32,
        ((v1 - v0 + 1 + 2 * b) * f) as u32,
    );
    (window, (y0 - v0 * f) as usize, (x0 - u0 * f) as usize)
}

/// Cuts the per-pathway input stacks for one output region.
pub fn multires_preprocess<T: Element>(region: Region, inputs: &SweepInputs<'_>, config: &ModelConfig) -> Result<NetworkInput<T>> {
    config.validate()?;
    if inputs.sources.len() != config.sources {
        return Err(NetworkError::InvalidArgument(format!(
            "model expects {} sources, got {}",
            config.sources,
            inputs.sources.len()
        )));
    }
    if inputs.sampling.count != config.depth_planes {
        return Err(NetworkError::InvalidArgument(format!(
            "model expects {} depth planes, sampling has {}",
            config.depth_planes, inputs.sampling.count
        )));
    }
    let mut pathways = Vec::with_capacity(config.pathways.len());
    for pc in &config.pathways {
        let (window, crop_top, crop_left) = pathway_window(region, config.merged_shrink(), pc);
        let vols = build_psv(inputs.sources, inputs.target, inputs.sampling, window)?;
        let planes: Vec<Vec<RgbaImage>> = vols
            .into_iter()
            .map(|v| v.planes.iter().map(|p| downsample_area(p, pc.factor as u32)).collect())
            .collect();
        pathways.push(PathwayInput { factor: pc.factor, data: stack_planes(&planes)?, crop_top, crop_left });
    }
    Ok(NetworkInput { pathways, out_height: region.height as usize, out_width: region.width as usize })
}

#[cfg(test)]
mod tests;

/// Two pathways, one merged layer and a small cross-depth stage, small enough
/// for exhaustive finite differences. Not bound by the 26 -> 8 patch contract.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        sources: 2,
        depth_planes: 3,
        pathways: vec![
            PathwayConfig { factor: 1, layers: vec![ConvLayer::new(3, 3)] },
            PathwayConfig { factor: 2, layers: vec![ConvLayer::new(1, 2)] },
        ],
        merged: vec![ConvLayer::new(3, 3)],
        cross_depth: vec![4, 3],
        source_order: SourceOrder::NearestFirst,
    }
}

/// Random inputs producing a 2x2 output of [`gradcheck_config`].
pub fn gradcheck_input(rng: &mut impl Rng) -> NetworkInput<f64> {
    let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0));
    NetworkInput {
        pathways: vec![
            PathwayInput { factor: 1, data: u(&[3, 8, 6, 6]), crop_top: 0, crop_left: 0 },
            PathwayInput { factor: 2, data: u(&[3, 8, 3, 3]), crop_top: 1, crop_left: 1 },
        ],
        out_height: 2,
        out_width: 2,
    }
}

/// Finite-difference check of every parameter of the full network
/// (both towers and the composite) at `points` random evaluation points.
/// Points closer than `min_kink_margin` to a relu/L1 kink are redrawn.
pub fn end_to_end_gradcheck(seed: u64, points: usize, step: f64, min_kink_margin: f64) -> Result<Vec<GradCheckReport>> {
    let cfg = gradcheck_config();
    let names: Vec<String> = ModelParams::<f64>::zeros(&cfg)?.names().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(points);
    let max_attempts = 10 * points.max(1);
    for _ in 0..max_attempts {
        if reports.len() == points {
            return Ok(reports);
        }
        let input = gradcheck_input(&mut rng);
        let mut params = ModelParams::<f64>::zeros(&cfg)?;
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.6..0.6);
            }
        }
        let direction = Tensor::from_fn(&[3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let inputs: Vec<(String, Tensor<f64>)> = params.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        let report = grad_check("network", &inputs, step, |g, vars| {
            let pv = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let out = build_forward(g, &input, &pv, &cfg).map_err(|e| match e {
                NetworkError::Tensor(t) => t,
                other => TensorError::InvalidArgument(other.to_string()),
            })?;
            let dir = g.input(direction.clone())?;
            let proj = g.mul(out.image, dir)?;
            g.sum(proj)
        })?;
        if report.kink_margin >= min_kink_margin {
            reports.push(report);
        }
    }
    if reports.len() == points {
        Ok(reports)
    } else {
        Err(NetworkError::InvalidArgument("could not find evaluation points away from relu kinks".into()))
    }
}
