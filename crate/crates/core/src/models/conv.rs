use super::{linear, Batch, EncoderConfig, Init, ModelParameters};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mat, Real, Spatial, Var};

/// Blocks per resolution stage; the map is halved between stages.
fn stage_len(depth: usize) -> usize {
    depth.div_ceil(3).max(1)
}

pub(super) fn init(init: &mut Init, cfg: &EncoderConfig) {
    let w = cfg.width;
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    init.linear("backbone.stem", 27, w, he(27), true);
    for i in 0..cfg.depth {
        init.linear(&format!("backbone.block{i}.conv1"), 9 * w, w, he(9 * w), true);
        // small second conv keeps each residual branch near identity at start
        init.linear(&format!("backbone.block{i}.conv2"), 9 * w, w, 0.1 * he(9 * w), true);
    }
}

fn conv3x3<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    prefix: &str,
    x: Var,
    geo: Spatial,
) -> Result<Var> {
    let cols = g.im2col(x, geo, 1)?;
    linear(g, params, prefix, cols)
}

pub(super) fn encode<T: Real>(
    g: &mut Graph<T>,
    params: &ModelParameters,
    cfg: &EncoderConfig,
    batch: &Batch,
) -> Result<Var> {
    if batch.size != cfg.input_size {
        return Err(Error::shape(format!(
            "conv encoder expects {}px inputs, got {}px",
            cfg.input_size, batch.size
        )));
    }
    if batch.data.len() != batch.count * batch.pixels() * 3 {
        return Err(Error::shape("batch data length does not match its geometry"));
    }
    let mut geo = Spatial {
        batch: batch.count,
        height: batch.size,
        width: batch.size,
    };
    let input = Mat::from_vec(
        geo.rows(),
        3,
        batch.data.iter().map(|&v| T::of(v as f64)).collect(),
    );
    let x = g.input(input);
    let x = conv3x3(g, params, "backbone.stem", x, geo)?;
    let mut x = g.relu(x);
    let stage = stage_len(cfg.depth);
    for i in 0..cfg.depth {
        let p = format!("backbone.block{i}.");
        let h = conv3x3(g, params, &format!("{p}conv1"), x, geo)?;
        let h = g.relu(h);
        let h = conv3x3(g, params, &format!("{p}conv2"), h, geo)?;
        let y = g.add(x, h)?;
        x = g.relu(y);
        if (i + 1) % stage == 0 && i + 1 < cfg.depth && geo.height >= 8 && geo.height % 2 == 0 {
            x = g.avg_pool2(x, geo)?;
            geo.height /= 2;
            geo.width /= 2;
        }
    }
    g.mean_rows(x, geo.height * geo.width)
}
