//! The k-space transformer: tokenization, encoder, low-resolution decoder,
//! and high-resolution decoder alternating with image-domain refinement.

mod attention_maps;
mod config;
mod init;
mod layers;


pub use attention_maps::{encoder_attention_maps, hr_attention_maps, AttentionMap};
pub use config::ModelConfig;
pub use init::{init_params, param_group, ParamGroup};

use crate::autodiff::{AttentionLog, Graph, Var};
use crate::error::{Error, Result};
use crate::fourier::ComplexGrid;
use crate::params::{BoundParams, ParamStore};
use crate::real::Real;
use crate::sampling::SampledPointSet;
use crate::tensor::Tensor;

/// Sinusoidal 2D positional encoding of a normalized coordinate.
///
/// The first `d/2` entries encode `p[0]`, the last `d/2` encode `p[1]`; each
/// half interleaves `sin(p * w_j)` and `cos(p * w_j)` with `w_j = 2*pi*2^j`,
/// `j = 0..d/4`.
pub fn positional_encoding_2d(p: [f64; 2], d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::dim(format!(
            "positional encoding width {} must be a positive multiple of 4",
            d
        )));
    }
    let quarter = d / 4;
    let mut out = Vec::with_capacity(d);
    for &coord in &p {
        for j in 0..quarter {
            let w = std::f64::consts::TAU * (1u64 << j.min(62)) as f64;
            let angle = coord * w;
            out.push(angle.sin());
            out.push(angle.cos());
        }
    }
    Ok(out)
}

/// `[L, d]` positional encodings for a list of coordinates.
pub fn positional_encodings<T: Real>(positions: &[[f64; 2]], d: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        data.extend(positional_encoding_2d(p, d)?.into_iter().map(T::of));
    }
    Tensor::new([positions.len(), d], data)
}

/// Per-layer graph handles produced by [`forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[2, h, w]` per LR layer.
    pub lr_spectrograms: Vec<Var>,
    /// Predicted `[2, H, W]` spectrogram per HR layer (before refinement).
    pub hr_spectrograms: Vec<Var>,
    /// Refined `[2, H, W]` image per HR layer.
    pub hr_images: Vec<Var>,
    /// Spectrogram of each refined image.
    pub refined_spectrograms: Vec<Var>,
    pub final_image: Var,
}

/// Everything a forward pass produces, as concrete grids.
#[derive(Clone, Debug)]
pub struct ReconstructionOutputs<T> {
    pub lr_spectrograms: Vec<ComplexGrid<T>>,
    pub hr_spectrograms: Vec<ComplexGrid<T>>,
    pub hr_images: Vec<ComplexGrid<T>>,
    pub refined_spectrograms: Vec<ComplexGrid<T>>,
    pub final_image: ComplexGrid<T>,
    pub attention: AttentionLog<T>,
}

impl<T: Real> ReconstructionOutputs<T> {
    pub fn from_graph(g: &Graph<T>, vars: &ForwardVars) -> Result<Self> {
        let grids = |vs: &[Var]| -> Result<Vec<ComplexGrid<T>>> {
            vs.iter().map(|&v| ComplexGrid::from_tensor(g.value(v))).collect()
        };
        Ok(ReconstructionOutputs {
            lr_spectrograms: grids(&vars.lr_spectrograms)?,
            hr_spectrograms: grids(&vars.hr_spectrograms)?,
            hr_images: grids(&vars.hr_images)?,
            refined_spectrograms: grids(&vars.refined_spectrograms)?,
            final_image: ComplexGrid::from_tensor(g.value(vars.final_image))?,
            attention: g.attention_log().clone(),
        })
    }

    /// Magnitude of the final complex image.
    pub fn final_magnitude(&self) -> Vec<T> {
        self.final_image.magnitude()
    }
}

/// `v_i = MLP(m_i) + PE(p_i)` for every sampled point: `[n, d]`.
pub fn tokenize<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    points: &SampledPointSet<T>,
) -> Result<Var> {
    if points.is_empty() {
        return Err(Error::arg("cannot tokenize an empty point set"));
    }
    let values: Vec<T> = points.values.iter().flat_map(|v| [v[0], v[1]]).collect();
    let values = g.constant(Tensor::new([points.len(), 2], values)?);
    let pe = g.constant(positional_encodings(&points.positions, cfg.d)?);
    let embedded = layers::mlp(g, p, "tok", values)?;
    g.add(embedded, pe)
}

/// Pre-LN transformer encoder over the point tokens, followed by a final
/// layer norm. Output has the input's shape.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    tokens: Var,
) -> Result<Var> {
    let width = g.shape(tokens).get(1).copied();
    if g.shape(tokens).len() != 2 || width != Some(cfg.d) {
        return Err(Error::dim(format!(
            "encoder expects [n, {}] tokens, got {:?}",
            cfg.d,
            g.shape(tokens)
        )));
    }
    let mut x = tokens;
    for i in 0..cfg.n_enc {
        x = layers::attention_block(g, p, cfg, &format!("enc.{i}.attn"), x, None, &format!("enc.{i}.self"))?;
        x = layers::ffn_block(g, p, &format!("enc.{i}.ffn"), x)?;
    }
    layers::norm(g, p, "enc.norm", x)
}

/// Low-resolution decoder. Queries are `W_q PE(p)` over `query_positions`;
/// each layer applies self-attention, cross-attention into `memory`, and a
/// feed-forward block, then predicts a `[2, grid_h, grid_w]` spectrogram.
///
/// Returns the normalized final tokens and the per-layer spectrograms.
pub fn lr_decode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    memory: Var,
    query_positions: &[[f64; 2]],
    grid: [usize; 2],
) -> Result<(Var, Vec<Var>)> {
    if g.shape(memory).get(1) != Some(&cfg.d) {
        return Err(Error::dim(format!(
            "decoder memory must be [n, {}], got {:?}",
            cfg.d,
            g.shape(memory)
        )));
    }
    if grid[0] * grid[1] != query_positions.len() {
        return Err(Error::dim(format!(
            "{} query positions cannot fill a {:?} grid",
            query_positions.len(),
            grid
        )));
    }
    let pe = g.constant(positional_encodings(query_positions, cfg.d)?);
    let mut x = layers::linear(g, p, "lr.query", pe)?;
    let mut spectrograms = Vec::with_capacity(cfg.n_lr);
    for i in 0..cfg.n_lr {
        x = layers::attention_block(g, p, cfg, &format!("lr.{i}.self"), x, None, &format!("lr.{i}.self"))?;
        x = layers::attention_block(g, p, cfg, &format!("lr.{i}.cross"), x, Some(memory), &format!("lr.{i}.cross"))?;
        x = layers::ffn_block(g, p, &format!("lr.{i}.ffn"), x)?;
        spectrograms.push(layers::head(g, p, &format!("lr.{i}.head"), x, grid)?);
    }
    let tokens = layers::norm(g, p, "lr.norm", x)?;
    Ok((tokens, spectrograms))
}

/// Measured data on the HR grid, used by the optional data-consistency step.
struct Measurements {
    /// Zero-filled spectrogram `[2, H, W]`.
    sampled: Var,
    /// `1 - mask` on both channels.
    keep: Var,
}

fn measurements<T: Real>(g: &mut Graph<T>, points: &SampledPointSet<T>) -> Result<Measurements> {
    let sampled = g.constant(points.scatter().to_tensor());
    let (h, w) = points.dims();
    let mut keep: Vec<T> = points.mask.to_real::<T>().into_iter().map(|m| T::one() - m).collect();
    keep.extend_from_within(..);
    let keep = g.constant(Tensor::new([2, h, w], keep)?);
    Ok(Measurements { sampled, keep })
}

fn data_consistency<T: Real>(g: &mut Graph<T>, s: Var, meas: &Measurements) -> Result<Var> {
    let kept = g.mul(s, meas.keep)?;
    g.add(kept, meas.sampled)
}

/// High-resolution decoder. `source` is the token set HR queries attend to
/// (the LR tokens, or the encoder memory when the LR decoder is disabled).
///
/// Per layer: cross-attention and feed-forward, spectrogram prediction,
/// image-domain refinement `T(refine(T^-1(S)))`, and re-embedding of the
/// refined spectrogram into the query tokens for the next layer.
pub fn hr_decode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    source: Var,
    points: Option<&SampledPointSet<T>>,
) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
    let grid = cfg.hr_grid;
    let pe = g.constant(positional_encodings(&cfg.hr_positions(), cfg.d)?);
    let mut x = layers::linear(g, p, "hr.query", pe)?;
    let meas = match (cfg.data_consistency, points) {
        (true, Some(pts)) => {
            if pts.dims() != (grid[0], grid[1]) {
                return Err(Error::dim(format!(
                    "points sampled on {:?}, model grid is {:?}",
                    pts.dims(),
                    grid
                )));
            }
            Some(measurements(g, pts)?)
        }
        (true, None) => return Err(Error::arg("data consistency needs the sampled points")),
        _ => None,
    };
    let (mut specs, mut images, mut refined_specs) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..cfg.n_hr {
        if cfg.hr_self_attention {
            x = layers::attention_block(g, p, cfg, &format!("hr.{i}.self"), x, None, &format!("hr.{i}.self"))?;
        }
        x = layers::attention_block(g, p, cfg, &format!("hr.{i}.cross"), x, Some(source), &format!("hr.{i}.cross"))?;
        x = layers::ffn_block(g, p, &format!("hr.{i}.ffn"), x)?;
        let mut s = layers::head(g, p, &format!("hr.{i}.head"), x, grid)?;
        if let Some(meas) = &meas {
            s = data_consistency(g, s, meas)?;
        }
        let image = g.ifft2(s)?;
        let (refined, refined_spec) = if cfg.use_refinement {
            let r = layers::refine(g, p, cfg, &format!("hr.{i}.refine"), image)?;
            match &meas {
                Some(meas) => {
                    let k = g.fft2(r)?;
                    let k = data_consistency(g, k, meas)?;
                    (g.ifft2(k)?, k)
                }
                None => {
                    let k = g.fft2(r)?;
                    (r, k)
                }
            }
        } else {
            (image, s)
        };
        specs.push(s);
        images.push(refined);
        refined_specs.push(refined_spec);
        if i + 1 < cfg.n_hr {
            let values = layers::grid_to_tokens(g, refined_spec)?;
            let e = layers::mlp(g, p, &format!("hr.{i}.embed"), values)?;
            x = g.add(x, e)?;
        }
    }
    Ok((specs, images, refined_specs))
}

/// Full model on a graph. When `stop_hr_gradient` is set, the token hand-off
/// into the HR decoder is a constant, so HR losses only train HR parameters.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    points: &SampledPointSet<T>,
    stop_hr_gradient: bool,
) -> Result<ForwardVars> {
    cfg.validate()?;
    if points.dims() != (cfg.hr_grid[0], cfg.hr_grid[1]) {
        return Err(Error::dim(format!(
            "points sampled on a {:?} grid, model expects {:?}",
            points.dims(),
            cfg.hr_grid
        )));
    }
    let tokens = tokenize(g, p, cfg, points)?;
    let memory = encode(g, p, cfg, tokens)?;
    let (source, lr_spectrograms) = if cfg.use_lr_decoder {
        lr_decode(g, p, cfg, memory, &cfg.lr_positions(), cfg.lr_grid)?
    } else {
        (memory, Vec::new())
    };
    let source = if stop_hr_gradient { g.detach(source) } else { source };
    let (hr_spectrograms, hr_images, refined_spectrograms) = hr_decode(g, p, cfg, source, Some(points))?;
    let final_image = *hr_images.last().expect("n_hr >= 1");
    Ok(ForwardVars {
        lr_spectrograms,
        hr_spectrograms,
        hr_images,
        refined_spectrograms,
        final_image,
    })
}

/// Inference: run the model with parameters as constants.
pub fn forward<T: Real>(
    points: &SampledPointSet<T>,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    record_attention: bool,
) -> Result<ReconstructionOutputs<T>> {
    let mut g = if record_attention { Graph::recording() } else { Graph::new() };
    let bound = params.bind(&mut g, false);
    let vars = forward_graph(&mut g, &bound, cfg, points, false)?;
    ReconstructionOutputs::from_graph(&g, &vars)
}
