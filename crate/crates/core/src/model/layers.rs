//! Building blocks shared by the encoder and both decoders.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::real::Real;

use super::ModelConfig;

pub(crate) fn linear<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}

pub(crate) fn norm<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.get(&format!("{prefix}.g"))?;
    let bias = p.get(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias)
}

/// `fc2(relu(fc1(x)))`.
pub(crate) fn mlp<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w1 = p.get(&format!("{prefix}.fc1.w"))?;
    let b1 = p.get(&format!("{prefix}.fc1.b"))?;
    let w2 = p.get(&format!("{prefix}.fc2.w"))?;
    let b2 = p.get(&format!("{prefix}.fc2.b"))?;
    g.mlp2(x, w1, b1, w2, b2)
}

/// `x + W_o MHA(LN(x), memory)`; self-attention when `memory` is `None`.
pub(crate) fn attention_block<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    memory: Option<Var>,
    label: &str,
) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.ln"), x)?;
    let src = memory.unwrap_or(h);
    let q = linear(g, p, &format!("{prefix}.q"), h)?;
    let k = linear(g, p, &format!("{prefix}.k"), src)?;
    let v = linear(g, p, &format!("{prefix}.v"), src)?;
    let o = g.attention(q, k, v, cfg.n_heads, label)?;
    let o = linear(g, p, &format!("{prefix}.o"), o)?;
    g.add(x, o)
}

/// `x + FFN(LN(x))` with a ReLU hidden layer.
pub(crate) fn ffn_block<T: Real>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.ln"), x)?;
    let h = mlp(g, p, prefix, h)?;
    g.add(x, h)
}

/// Prediction head: `[L, d]` tokens to a `[2, h, w]` spectrogram.
pub(crate) fn head<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    grid: [usize; 2],
) -> Result<Var> {
    if g.shape(x)[0] != grid[0] * grid[1] {
        return Err(Error::dim(format!(
            "{} tokens cannot fill a {:?} grid",
            g.shape(x)[0],
            grid
        )));
    }
    let h = norm(g, p, &format!("{prefix}.ln"), x)?;
    let y = linear(g, p, prefix, h)?;
    let y = g.transpose(y)?;
    g.reshape(y, &[2, grid[0], grid[1]])
}

/// `[2, H, W]` grid to `[H*W, 2]` per-coordinate values.
pub(crate) fn grid_to_tokens<T: Real>(g: &mut Graph<T>, s: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    let m = shape[1] * shape[2];
    let flat = g.reshape(s, &[2, m])?;
    g.transpose(flat)
}

/// Residual convolutional refinement of a `[2, H, W]` image.
pub(crate) fn refine<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    prefix: &str,
    image: Var,
) -> Result<Var> {
    let slope = T::of(cfg.leaky_slope);
    let mut h = image;
    for j in 0..cfg.refine_depth {
        let k = p.get(&format!("{prefix}.{j}.w"))?;
        let b = p.get(&format!("{prefix}.{j}.b"))?;
        h = g.conv2d(h, k, b)?;
        if j + 1 < cfg.refine_depth {
            h = g.leaky_relu(h, slope);
        }
    }
    g.add(image, h)
}
