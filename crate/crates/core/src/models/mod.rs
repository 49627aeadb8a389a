//! Desk-scale encoders, heads, named parameter storage and the EMA teacher.

mod conv;
mod heads;
mod vit;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{MaskSpec, View};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Mat, ParamSource, Real, Var};

pub use heads::{HeadConfig, HeadKind};
pub use vit::{patchify, unpatchify};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    ConvResidual,
    PatchTransformer,
}

impl Arch {
    pub fn label(self) -> &'static str {
        match self {
            Arch::ConvResidual => "conv_residual",
            Arch::PatchTransformer => "patch_transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: Arch,
    /// Residual blocks (conv) or transformer blocks.
    pub depth: usize,
    /// Channels (conv) or embedding dimension (transformer).
    pub width: usize,
    /// Patch side in pixels; transformer only.
    pub patch_size: usize,
    pub input_size: usize,
    pub heads: usize,
    /// Hidden width of the transformer MLP relative to `width`.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: Arch::PatchTransformer,
            depth: 4,
            width: 64,
            patch_size: 8,
            input_size: 32,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn conv(depth: usize, width: usize, input_size: usize) -> Self {
        Self {
            arch: Arch::ConvResidual,
            depth,
            width,
            input_size,
            ..Self::default()
        }
    }

    pub fn transformer(depth: usize, width: usize, patch_size: usize, input_size: usize) -> Self {
        Self {
            arch: Arch::PatchTransformer,
            depth,
            width,
            patch_size,
            input_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 {
            return Err(Error::invalid("encoder depth and width must be at least 1"));
        }
        if self.input_size < 8 {
            return Err(Error::invalid("encoder input size must be at least 8"));
        }
        if self.arch == Arch::PatchTransformer {
            if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
                return Err(Error::invalid(format!(
                    "input size {} is not divisible by patch size {}",
                    self.input_size, self.patch_size
                )));
            }
            if self.heads == 0 || self.width % self.heads != 0 {
                return Err(Error::invalid("embedding width must be divisible by the head count"));
            }
        }
        Ok(())
    }

    /// Embedding dimension produced by [`encode`].
    pub fn embed_dim(&self) -> usize {
        self.width
    }

    /// Patch tokens for an input of `size × size` pixels.
    pub fn tokens_for(&self, size: usize) -> usize {
        (size / self.patch_size).pow(2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamArray {
    fn view2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }
}

/// Named parameter arrays. Iteration order is the lexical order of names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParameters {
    arrays: BTreeMap<String, ParamArray>,
}

impl ParamSource for ModelParameters {
    fn lookup(&self, name: &str) -> Option<(usize, usize, &[f32])> {
        self.arrays.get(name).map(|a| {
            let (r, c) = a.view2();
            (r, c, a.data.as_slice())
        })
    }
}

impl ModelParameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("{name}: shape {shape:?} holds {} values", data.len())));
        }
        self.arrays.insert(name, ParamArray { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.arrays.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ParamArray> {
        self.arrays.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamArray)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamArray)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.values().map(|a| a.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    /// Names and shapes, used to check that two parameter sets line up.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        self.arrays
            .iter()
            .map(|(k, v)| (k.clone(), v.shape.clone()))
            .collect()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ModelParameters {
        ModelParameters {
            arrays: self
                .arrays
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ModelParameters) {
        self.arrays.extend(other.arrays);
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.arrays.retain(|k, _| keep(k));
    }
}

/// Deterministic initializer: every parameter draws from its own stream
/// keyed by `(seed, name)`.
pub(crate) struct Init<'a> {
    pub params: &'a mut ModelParameters,
    pub seed: u64,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) {
        let n: usize = shape.iter().product();
        let mut r = rng::stream(self.seed, &[rng::tag::INIT, rng::name_hash(name)]);
        let data = (0..n)
            .map(|_| {
                // Box-Muller, clipped at two standard deviations
                let u1: f64 = r.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = r.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                (z.clamp(-2.0, 2.0) * std) as f32
            })
            .collect();
        self.params
            .insert(name, shape, data)
            .expect("initializer shapes are consistent");
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, value: f32) {
        let n = shape.iter().product();
        self.params
            .insert(name, shape, vec![value; n])
            .expect("initializer shapes are consistent");
    }

    /// Weight `[fan_in, fan_out]` plus bias `[fan_out]`.
    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64, bias: bool) {
        self.normal(&format!("{prefix}.w"), vec![fan_in, fan_out], std);
        if bias {
            self.constant(&format!("{prefix}.b"), vec![fan_out], 0.0);
        }
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.constant(&format!("{prefix}.g"), vec![dim], 1.0);
        self.constant(&format!("{prefix}.b"), vec![dim], 0.0);
    }
}

pub(crate) fn linear<T: Real>(
    g: &mut Graph<T>,
    p: &ModelParameters,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let bname = format!("{prefix}.b");
    let b = match p.get(&bname) {
        Some(_) => Some(g.param(p, &bname)?),
        None => None,
    };
    g.linear(x, w, b)
}

pub(crate) fn layer_norm<T: Real>(
    g: &mut Graph<T>,
    p: &ModelParameters,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = g.param(p, &format!("{prefix}.g"))?;
    let beta = g.param(p, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

/// A stack of equally sized square views, NHWC, one row per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub count: usize,
    pub size: usize,
    pub data: Vec<f32>,
}

impl Batch {
    pub fn from_views<'a>(views: impl IntoIterator<Item = &'a View>) -> Result<Self> {
        let mut data = Vec::new();
        let mut size = None;
        let mut count = 0;
        for v in views {
            if *size.get_or_insert(v.size) != v.size {
                return Err(Error::shape("views in one batch must share a size"));
            }
            data.extend_from_slice(&v.data);
            count += 1;
        }
        Ok(Self {
            count,
            size: size.unwrap_or(0),
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }
}

/// Backbone embedding per image (`count × embed_dim`).
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    batch: &Batch,
) -> Result<Var> {
    if batch.count == 0 {
        return Err(Error::shape("empty batch"));
    }
    let out = match cfg.arch {
        Arch::ConvResidual => conv::encode(g, params, cfg, batch)?,
        Arch::PatchTransformer => vit::encode(g, params, cfg, batch)?,
    };
    if !g.value(out).all_finite() {
        return Err(Error::NonFinite("encoder activations".into()));
    }
    Ok(out)
}

/// Full token sequence of a patch transformer (`count · (1 + T) × width`,
/// class token first in each sequence).
pub fn encode_tokens<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    batch: &Batch,
) -> Result<Var> {
    if cfg.arch != Arch::PatchTransformer {
        return Err(Error::Unsupported("token sequences need a patch transformer".into()));
    }
    vit::encode_tokens(g, params, cfg, batch, None)
}

/// Latent tokens of the visible patches only: per image, the class token
/// followed by the unmasked patches in increasing patch order. All masks
/// must hide the same number of patches.
pub fn encode_visible<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    batch: &Batch,
    masks: &[MaskSpec],
) -> Result<Var> {
    if cfg.arch != Arch::PatchTransformer {
        return Err(Error::Unsupported(
            "masked encoding is only defined for the patch transformer".into(),
        ));
    }
    vit::encode_tokens(g, params, cfg, batch, Some(masks))
}

/// Full-resolution reconstruction from visible latents: one row per patch
/// with `patch² · 3` pixel values. See [`unpatchify`] for image layout.
pub fn decode_masked<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    decoder: &HeadConfig,
    latents: Var,
    masks: &[MaskSpec],
) -> Result<Var> {
    vit::decode(g, params, cfg, decoder, latents, masks)
}

/// An encoder with zero or more named heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderConfig,
    pub heads: Vec<HeadConfig>,
    pub params: ModelParameters,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

pub fn head_prefix(name: &str) -> String {
    format!("head.{name}.")
}

impl Model {
    pub fn new(encoder: EncoderConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        let mut params = ModelParameters::new();
        let mut init = Init {
            params: &mut params,
            seed,
        };
        match encoder.arch {
            Arch::ConvResidual => conv::init(&mut init, &encoder),
            Arch::PatchTransformer => vit::init(&mut init, &encoder),
        }
        Ok(Self {
            encoder,
            heads: Vec::new(),
            params,
        })
    }

    pub fn backbone(&self) -> ModelParameters {
        self.params.subset(BACKBONE_PREFIX)
    }

    pub fn backbone_param_count(&self) -> usize {
        self.backbone().count()
    }

    /// Adds heads, initializing their parameters from `seed`.
    pub fn attach_heads(&mut self, heads: &[HeadConfig], seed: u64) -> Result<()> {
        for h in heads {
            h.validate()?;
            if h.input_dim != self.encoder.embed_dim() && h.kind != HeadKind::Decoder {
                return Err(Error::shape(format!(
                    "head {} expects {} inputs, backbone emits {}",
                    h.name,
                    h.input_dim,
                    self.encoder.embed_dim()
                )));
            }
            if self.heads.iter().any(|o| o.name == h.name) {
                return Err(Error::invalid(format!("head {} already attached", h.name)));
            }
            let mut init = Init {
                params: &mut self.params,
                seed,
            };
            heads::init(&mut init, h, &self.encoder);
            self.heads.push(h.clone());
        }
        Ok(())
    }

    /// Drops every head and attaches `head`; backbone parameters are
    /// untouched.
    pub fn replace_heads(&mut self, head: HeadConfig, seed: u64) -> Result<()> {
        self.params.retain(|k| k.starts_with(BACKBONE_PREFIX));
        self.heads.clear();
        self.attach_heads(&[head], seed)
    }

    /// Re-draws one head's parameters from a new seed.
    pub fn reinit_head(&mut self, name: &str, seed: u64) -> Result<()> {
        let h = self
            .head(name)
            .ok_or_else(|| Error::invalid(format!("no head named {name}")))?
            .clone();
        let prefix = head_prefix(name);
        self.params.retain(|k| !k.starts_with(&prefix));
        let mut init = Init {
            params: &mut self.params,
            seed,
        };
        heads::init(&mut init, &h, &self.encoder);
        Ok(())
    }

    pub fn head(&self, name: &str) -> Option<&HeadConfig> {
        self.heads.iter().find(|h| h.name == name)
    }

    /// Backbone embedding followed by every non-decoder head, in attach order.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Vec<Var>> {
        let emb = encode(g, &self.params, &self.encoder, batch)?;
        self.heads
            .iter()
            .filter(|h| h.kind != HeadKind::Decoder)
            .map(|h| heads::forward(g, &self.params, h, emb))
            .collect()
    }

    /// Head `name` applied to a backbone embedding.
    pub fn apply_head<T: Real>(&self, g: &mut Graph<T>, params: &ModelParameters, name: &str, emb: Var) -> Result<Var> {
        let h = self
            .head(name)
            .ok_or_else(|| Error::invalid(format!("no head named {name}")))?;
        heads::forward(g, params, h, emb)
    }
}

/// Momentum teacher: same parameter schema as the student (backbone plus
/// the distillation head), momentum `m` and the output center.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ModelParameters,
    pub momentum: f64,
    pub center: Vec<f64>,
}

impl TeacherState {
    pub fn new(params: ModelParameters, momentum: f64, out_dim: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("teacher momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            params,
            momentum,
            center: vec![0.0; out_dim],
        })
    }
}

/// `t ← m·t + (1 − m)·s`, elementwise.
pub fn ema_step<T: Real>(teacher: &mut [T], student: &[T], momentum: T) {
    let keep = T::one() - momentum;
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = momentum * *t + keep * s;
    }
}

/// Exponential-moving-average teacher update over every teacher parameter.
/// The student may carry extra parameters (e.g. a supervised head) that
/// the teacher does not track.
pub fn ema_update(teacher: &TeacherState, student: &ModelParameters) -> Result<TeacherState> {
    let mut next = teacher.clone();
    let m = teacher.momentum;
    for (name, t) in next.params.iter_mut() {
        let s = student
            .get(name)
            .ok_or_else(|| Error::shape(format!("student lacks teacher parameter {name}")))?;
        if s.shape != t.shape {
            return Err(Error::shape(format!("{name}: teacher {:?} vs student {:?}", t.shape, s.shape)));
        }
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = (m * *tv as f64 + (1.0 - m) * sv as f64) as f32;
        }
    }
    Ok(next)
}

/// Converts a graph value to an `f64` matrix.
pub fn value_f64<T: Real>(g: &Graph<T>, v: Var) -> Mat<f64> {
    g.value(v).cast()
}
