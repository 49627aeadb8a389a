use serde::{Deserialize, Serialize};

use super::{head_prefix, layer_norm, linear, vit, EncoderConfig, Init, ModelParameters};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// MLP with ReLU between layers.
    Projection,
    /// MLP, L2 normalization, then a bias-free linear map onto prototypes.
    Dino,
    /// Single linear layer onto class logits.
    Classification,
    /// Masked-patch reconstruction decoder; `layer_dims[0]` is its width.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub name: String,
    pub kind: HeadKind,
    pub input_dim: usize,
    /// Hidden widths. For `Dino` the last entry is the bottleneck.
    pub layer_dims: Vec<usize>,
    pub output_dim: usize,
    /// Transformer blocks and attention heads; decoder only.
    #[serde(default = "one")]
    pub blocks: usize,
    #[serde(default = "two")]
    pub attention_heads: usize,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl HeadConfig {
    pub fn projection(name: &str, input_dim: usize, hidden: usize, output_dim: usize) -> Self {
        Self::with(name, HeadKind::Projection, input_dim, vec![hidden], output_dim)
    }

    pub fn dino(name: &str, input_dim: usize, hidden: usize, bottleneck: usize, prototypes: usize) -> Self {
        Self::with(name, HeadKind::Dino, input_dim, vec![hidden, bottleneck], prototypes)
    }

    pub fn classification(name: &str, input_dim: usize, classes: usize) -> Self {
        Self::with(name, HeadKind::Classification, input_dim, Vec::new(), classes)
    }

    /// Decoder for an encoder `enc`; `output_dim` is the pixel count per patch.
    pub fn decoder(name: &str, enc: &EncoderConfig, width: usize, blocks: usize, heads: usize) -> Self {
        Self {
            blocks,
            attention_heads: heads,
            ..Self::with(
                name,
                HeadKind::Decoder,
                enc.embed_dim(),
                vec![width],
                enc.patch_size * enc.patch_size * 3,
            )
        }
    }

    fn with(name: &str, kind: HeadKind, input_dim: usize, layer_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            input_dim,
            layer_dims,
            output_dim,
            blocks: 1,
            attention_heads: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || self.input_dim == 0 {
            return Err(Error::invalid(format!("head {}: dimensions must be positive", self.name)));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::invalid(format!("head {}: zero-width hidden layer", self.name)));
        }
        if self.name.is_empty() || self.name.contains('.') {
            return Err(Error::invalid(format!("head name {:?} must be non-empty without dots", self.name)));
        }
        match self.kind {
            HeadKind::Dino if self.layer_dims.is_empty() => {
                Err(Error::invalid("dino head needs a bottleneck width"))
            }
            HeadKind::Decoder => {
                let w = self.layer_dims.first().copied().unwrap_or(0);
                if w == 0 || self.blocks == 0 || self.attention_heads == 0 || w % self.attention_heads != 0 {
                    Err(Error::invalid("decoder width must be divisible by its attention heads"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

pub(super) fn init(init: &mut Init, h: &HeadConfig, enc: &EncoderConfig) {
    let p = head_prefix(&h.name);
    match h.kind {
        HeadKind::Projection | HeadKind::Classification | HeadKind::Dino => {
            let mut fan_in = h.input_dim;
            for (i, &d) in h.layer_dims.iter().enumerate() {
                init.linear(&format!("{p}l{i}"), fan_in, d, (2.0 / fan_in as f64).sqrt(), true);
                fan_in = d;
            }
            if h.kind == HeadKind::Dino {
                init.normal(&format!("{p}prototypes.w"), vec![fan_in, h.output_dim], (1.0 / fan_in as f64).sqrt());
            } else {
                init.linear(&format!("{p}out"), fan_in, h.output_dim, (1.0 / fan_in as f64).sqrt(), true);
            }
        }
        HeadKind::Decoder => vit::init_decoder(init, &p, h, enc),
    }
}

pub(super) fn forward<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    h: &HeadConfig,
    emb: Var,
) -> Result<Var> {
    let p = head_prefix(&h.name);
    if g.value(emb).cols != h.input_dim {
        return Err(Error::shape(format!(
            "head {} expects width {}, got {}",
            h.name,
            h.input_dim,
            g.value(emb).cols
        )));
    }
    let mut x = emb;
    match h.kind {
        HeadKind::Projection | HeadKind::Classification => {
            for i in 0..h.layer_dims.len() {
                x = linear(g, params, &format!("{p}l{i}"), x)?;
                x = g.relu(x);
            }
            linear(g, params, &format!("{p}out"), x)
        }
        HeadKind::Dino => {
            let last = h.layer_dims.len() - 1;
            for i in 0..=last {
                x = linear(g, params, &format!("{p}l{i}"), x)?;
                if i < last {
                    x = g.gelu(x);
                }
            }
            let x = g.l2_normalize(x);
            linear(g, params, &format!("{p}prototypes"), x)
        }
        HeadKind::Decoder => Err(Error::Unsupported(
            "decoder heads consume token sequences, use decode_masked".into(),
        )),
    }
}

/// Pre-norm transformer block shared by encoder and decoder.
pub(super) fn block<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    prefix: &str,
    x: Var,
    tokens: usize,
    heads: usize,
) -> Result<Var> {
    let h = layer_norm(g, params, &format!("{prefix}ln1"), x)?;
    let qkv = linear(g, params, &format!("{prefix}qkv"), h)?;
    let a = g.attention(qkv, tokens, heads)?;
    let a = linear(g, params, &format!("{prefix}proj"), a)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, params, &format!("{prefix}ln2"), x)?;
    let h = linear(g, params, &format!("{prefix}fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, params, &format!("{prefix}fc2"), h)?;
    g.add(x, h)
}

pub(super) fn init_block(init: &mut Init, prefix: &str, dim: usize, mlp: usize) {
    let std = 0.02;
    init.layer_norm(&format!("{prefix}ln1"), dim);
    init.linear(&format!("{prefix}qkv"), dim, 3 * dim, std, true);
    init.linear(&format!("{prefix}proj"), dim, dim, std, true);
    init.layer_norm(&format!("{prefix}ln2"), dim);
    init.linear(&format!("{prefix}fc1"), dim, mlp, std, true);
    init.linear(&format!("{prefix}fc2"), mlp, dim, std, true);
}
