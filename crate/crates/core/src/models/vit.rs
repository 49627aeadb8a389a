use super::heads::{block, init_block};
use super::{head_prefix, layer_norm, linear, Batch, EncoderConfig, HeadConfig, Init, ModelParameters};
use crate::augment::MaskSpec;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mat, Real, Var};

pub(super) fn init(init: &mut Init, cfg: &EncoderConfig) {
    let d = cfg.width;
    let p = cfg.patch_size;
    let tokens = cfg.tokens_for(cfg.input_size);
    init.linear("backbone.patch_embed", p * p * 3, d, (1.0 / (p * p * 3) as f64).sqrt(), true);
    init.normal("backbone.cls", vec![1, d], 0.02);
    init.normal("backbone.pos", vec![1 + tokens, d], 0.02);
    for i in 0..cfg.depth {
        init_block(init, &format!("backbone.block{i}."), d, d * cfg.mlp_ratio);
    }
    init.layer_norm("backbone.norm", d);
}

pub(super) fn init_decoder(init: &mut Init, prefix: &str, h: &HeadConfig, enc: &EncoderConfig) {
    let w = h.layer_dims[0];
    let tokens = enc.tokens_for(enc.input_size);
    init.linear(&format!("{prefix}embed"), h.input_dim, w, 0.02, true);
    init.normal(&format!("{prefix}mask_token"), vec![1, w], 0.02);
    init.normal(&format!("{prefix}pos"), vec![1 + tokens, w], 0.02);
    for i in 0..h.blocks {
        init_block(init, &format!("{prefix}block{i}."), w, 2 * w);
    }
    init.layer_norm(&format!("{prefix}norm"), w);
    init.linear(&format!("{prefix}pred"), w, h.output_dim, 0.02, true);
}

/// Cuts `count` NHWC images of side `size` into `patch × patch` tiles.
/// Rows are ordered (image, patch row, patch col); columns (y, x, channel).
pub fn patchify<T: Real>(data: &[f32], count: usize, size: usize, patch: usize) -> Mat<T> {
    let grid = size / patch;
    let cols = patch * patch * 3;
    let mut out = Mat::zeros(count * grid * grid, cols);
    for b in 0..count {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = (b * grid + gy) * grid + gx;
                let dst = out.row_mut(row);
                for y in 0..patch {
                    let src = ((b * size + gy * patch + y) * size + gx * patch) * 3;
                    for (d, &s) in dst[y * patch * 3..(y + 1) * patch * 3]
                        .iter_mut()
                        .zip(&data[src..src + patch * 3])
                    {
                        *d = T::of(s as f64);
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`]: returns NHWC image data.
pub fn unpatchify<T: Real>(patches: &Mat<T>, size: usize, patch: usize) -> Result<Vec<f32>> {
    let grid = size / patch;
    if patch == 0 || size % patch != 0 || patches.cols != patch * patch * 3 || patches.rows % (grid * grid) != 0 {
        return Err(Error::shape(format!(
            "{}x{} patches do not tile a {size}px image with patch {patch}",
            patches.rows, patches.cols
        )));
    }
    let count = patches.rows / (grid * grid);
    let mut out = vec![0.0f32; count * size * size * 3];
    for b in 0..count {
        for gy in 0..grid {
            for gx in 0..grid {
                let src = patches.row((b * grid + gy) * grid + gx);
                for y in 0..patch {
                    let dst = ((b * size + gy * patch + y) * size + gx * patch) * 3;
                    for (d, s) in out[dst..dst + patch * 3]
                        .iter_mut()
                        .zip(&src[y * patch * 3..(y + 1) * patch * 3])
                    {
                        *d = s.f64() as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resampling matrix taking a `from × from` grid to `to × to`
/// (half-pixel centres, edge clamped).
pub(super) fn interpolation<T: Real>(from: usize, to: usize) -> Mat<T> {
    let weights = |i: usize| -> [(usize, f64); 2] {
        let s = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        let f = s - lo as f64;
        [(lo, 1.0 - f), (hi, f)]
    };
    let mut m = Mat::zeros(to * to, from * from);
    for y in 0..to {
        for x in 0..to {
            let row = m.row_mut(y * to + x);
            for (sy, wy) in weights(y) {
                for (sx, wx) in weights(x) {
                    row[sy * from + sx] += T::of(wy * wx);
                }
            }
        }
    }
    m
}

/// Position embeddings for the patch tokens of a `grid × grid` input.
fn patch_positions<T: Real>(g: &mut Graph<T>, pos: Var, trained_grid: usize, grid: usize) -> Result<Var> {
    let rows: Vec<usize> = (1..=trained_grid * trained_grid).collect();
    let base = g.gather_rows(pos, &rows)?;
    if grid == trained_grid {
        return Ok(base);
    }
    let m = g.input(interpolation(trained_grid, grid));
    g.matmul(m, base)
}

fn check_masks(masks: &[MaskSpec], count: usize, grid: usize) -> Result<usize> {
    if masks.len() != count {
        return Err(Error::shape(format!("{} masks for {count} images", masks.len())));
    }
    let mut visible = None;
    for m in masks {
        if m.grid_h != grid || m.grid_w != grid {
            return Err(Error::shape(format!(
                "mask grid {}x{} does not match patch grid {grid}x{grid}",
                m.grid_h, m.grid_w
            )));
        }
        let v = m.patches() - m.masked.len();
        if v == 0 {
            return Err(Error::invalid("mask hides every patch; at least one must stay visible"));
        }
        if *visible.get_or_insert(v) != v {
            return Err(Error::shape("masks in one batch must hide equally many patches"));
        }
    }
    Ok(visible.unwrap_or(0))
}

pub(super) fn encode_tokens<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    batch: &Batch,
    masks: Option<&[MaskSpec]>,
) -> Result<Var> {
    let p = cfg.patch_size;
    if batch.size == 0 || batch.size % p != 0 {
        return Err(Error::shape(format!("input size {} is not a multiple of patch {p}", batch.size)));
    }
    if batch.data.len() != batch.count * batch.pixels() * 3 {
        return Err(Error::shape("batch data length does not match its geometry"));
    }
    let grid = batch.size / p;
    let tokens = grid * grid;
    let trained = cfg.input_size / p;
    let (kept, visible): (Vec<usize>, usize) = match masks {
        None => ((0..batch.count * tokens).collect(), tokens),
        Some(ms) => {
            let v = check_masks(ms, batch.count, grid)?;
            let kept = ms
                .iter()
                .enumerate()
                .flat_map(|(b, m)| m.visible().into_iter().map(move |i| b * tokens + i))
                .collect();
            (kept, v)
        }
    };

    let patches = g.input(patchify(&batch.data, batch.count, batch.size, p));
    let x = linear(g, params, "backbone.patch_embed", patches)?;
    let x = if kept.len() == batch.count * tokens {
        x
    } else {
        g.gather_rows(x, &kept)?
    };
    let pos = g.param(params, "backbone.pos")?;
    let pos_patch = patch_positions(g, pos, trained, grid)?;
    let pos_rows = g.assemble(&[pos_patch], kept.iter().map(|&r| (0, (r % tokens) as u32)).collect())?;
    let x = g.add(x, pos_rows)?;
    let cls = g.param(params, "backbone.cls")?;
    let pos_cls = g.gather_rows(pos, &[0])?;
    let cls = g.add(cls, pos_cls)?;

    let seq = 1 + visible;
    let mut index = Vec::with_capacity(batch.count * seq);
    for b in 0..batch.count {
        index.push((0, 0));
        index.extend((0..visible).map(|j| (1, (b * visible + j) as u32)));
    }
    let mut x = g.assemble(&[cls, x], index)?;
    for i in 0..cfg.depth {
        x = block(g, params, &format!("backbone.block{i}."), x, seq, cfg.heads)?;
    }
    layer_norm(g, params, "backbone.norm", x)
}

pub(super) fn encode<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    batch: &Batch,
) -> Result<Var> {
    let x = encode_tokens(g, params, cfg, batch, None)?;
    let seq = 1 + cfg.tokens_for(batch.size);
    let cls: Vec<usize> = (0..batch.count).map(|b| b * seq).collect();
    g.gather_rows(x, &cls)
}

pub(super) fn decode<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    dec: &HeadConfig,
    latents: Var,
    masks: &[MaskSpec],
) -> Result<Var> {
    let grid = cfg.input_size / cfg.patch_size;
    check_masks(masks, masks.len(), grid)?;
    let positions: Vec<Vec<usize>> = masks.iter().map(|m| m.visible()).collect();
    decode_tokens(g, params, cfg, dec, latents, &positions)
}

/// Decoder over latents whose token `j` of image `b` sits at patch
/// `positions[b][j]`. Every other patch receives the mask token.
pub(crate) fn decode_tokens<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    dec: &HeadConfig,
    latents: Var,
    positions: &[Vec<usize>],
) -> Result<Var> {
    let prefix = head_prefix(&dec.name);
    let tokens = cfg.tokens_for(cfg.input_size);
    let count = positions.len();
    let visible = positions.first().map_or(0, Vec::len);
    let seq = 1 + visible;
    let lat = g.value(latents);
    if count == 0 || lat.rows != count * seq || positions.iter().any(|p| p.len() != visible) {
        return Err(Error::shape(format!(
            "latents have {} rows, masks imply {count} sequences of {seq}",
            lat.rows
        )));
    }
    let y = linear(g, params, &format!("{prefix}embed"), latents)?;
    let mask_token = g.param(params, &format!("{prefix}mask_token"))?;
    let mut index = Vec::with_capacity(count * (1 + tokens));
    for (b, pos) in positions.iter().enumerate() {
        let mut slot = vec![(1u32, 0u32); tokens];
        for (j, &p) in pos.iter().enumerate() {
            if p >= tokens || slot[p].0 == 0 {
                return Err(Error::shape(format!("invalid or repeated visible position {p}")));
            }
            slot[p] = (0, (b * seq + 1 + j) as u32);
        }
        index.push((0, (b * seq) as u32));
        index.extend(slot);
    }
    let full = g.assemble(&[y, mask_token], index)?;
    let pos = g.param(params, &format!("{prefix}pos"))?;
    let pos_rows = g.assemble(
        &[pos],
        (0..count * (1 + tokens)).map(|r| (0, (r % (1 + tokens)) as u32)).collect(),
    )?;
    let mut x = g.add(full, pos_rows)?;
    for i in 0..dec.blocks {
        x = block(g, params, &format!("{prefix}block{i}."), x, 1 + tokens, dec.attention_heads)?;
    }
    let x = layer_norm(g, params, &format!("{prefix}norm"), x)?;
    let rows: Vec<usize> = (0..count)
        .flat_map(|b| (1..=tokens).map(move |t| b * (1 + tokens) + t))
        .collect();
    let x = g.gather_rows(x, &rows)?;
    linear(g, params, &format!("{prefix}pred"), x)
}
