//! Attention cost accounting for the hierarchical decoder versus a
//! single-resolution decoder, plus wall-clock measurement.
//!
//! The cost unit is one attention score element (a query-key dot product of
//! `d` multiply-adds). Counts are per head.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fourier::ComplexGrid;
use crate::model::{forward, init_params, ModelConfig};
use crate::sampling::{apply_mask, Mask};

/// HR decoder with self-attention over all `m` queries and cross-attention
/// straight into the `n` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StandardCost {
    pub cross: u64,
    pub self_attn: u64,
    pub per_layer_peak: u64,
}

impl StandardCost {
    pub fn total(&self) -> u64 {
        self.cross + self.self_attn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct HierCost {
    pub lr_cross: u64,
    pub lr_self: u64,
    pub hr_cross: u64,
    pub per_layer_peak: u64,
}

impl HierCost {
    pub fn total(&self) -> u64 {
        self.lr_cross + self.lr_self + self.hr_cross
    }
}

fn positive(args: &[(usize, &str)]) -> Result<()> {
    match args.iter().find(|(v, _)| *v == 0) {
        Some((_, name)) => Err(Error::arg(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

/// `layers * (m n + m^2)`.
pub fn analytic_cost_standard(m: usize, n: usize, d: usize, layers: usize) -> Result<StandardCost> {
    positive(&[(m, "m"), (n, "n"), (d, "d"), (layers, "layers")])?;
    let (m, n, k) = (m as u64, n as u64, layers as u64);
    Ok(StandardCost {
        cross: k * m * n,
        self_attn: k * m * m,
        per_layer_peak: (m * n).max(m * m),
    })
}

/// `lr_layers * (l n + l^2) + hr_layers * m l`.
pub fn analytic_cost_hier(m: usize, n: usize, l: usize, d: usize, lr_layers: usize, hr_layers: usize) -> Result<HierCost> {
    positive(&[(m, "m"), (n, "n"), (l, "l"), (d, "d"), (lr_layers, "lr_layers"), (hr_layers, "hr_layers")])?;
    if l > m {
        return Err(Error::arg(format!("l = {l} exceeds m = {m}")));
    }
    let (m, n, l) = (m as u64, n as u64, l as u64);
    Ok(HierCost {
        lr_cross: lr_layers as u64 * l * n,
        lr_self: lr_layers as u64 * l * l,
        hr_cross: hr_layers as u64 * m * l,
        per_layer_peak: (l * n).max(l * l).max(m * l),
    })
}

/// Encoder self-attention, reported separately from either decoder.
pub fn encoder_cost(n: usize, layers: usize) -> u64 {
    (layers * n * n) as u64
}

/// One measured configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostProfile {
    /// Free-form name of the sweep this row belongs to.
    pub sweep: String,
    pub hierarchical: bool,
    pub m: usize,
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub n_enc: usize,
    pub n_lr: usize,
    pub n_hr: usize,
    pub analytic_decoder: u64,
    pub measured_decoder: u64,
    pub analytic_encoder: u64,
    pub measured_encoder: u64,
    pub analytic_peak: u64,
    /// Largest decoder score matrix observed on the tape.
    pub measured_peak: u64,
    pub runs: usize,
    pub median_seconds: f64,
}

impl CostProfile {
    pub fn analytic_multiply_adds(&self) -> u64 {
        self.analytic_decoder * self.d as u64
    }
}

/// `n` distinct random bins (always including DC) with random values.
pub fn random_points(height: usize, width: usize, n: usize, seed: u64) -> Result<crate::sampling::SampledPointSet<f32>> {
    if n == 0 || n > height * width {
        return Err(Error::arg(format!("cannot sample {n} of {} bins", height * width)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dc = (height / 2) * width + width / 2;
    let mut others: Vec<usize> = (0..height * width).filter(|&i| i != dc).collect();
    others.shuffle(&mut rng);
    let mut bits = vec![false; height * width];
    bits[dc] = true;
    for &i in &others[..n - 1] {
        bits[i] = true;
    }
    let mask = Mask::from_bits(height, width, bits)?;
    let re = (0..height * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let im = (0..height * width).map(|_| rng.random_range(-1.0..1.0)).collect();
    let full = ComplexGrid::new(height, width, re, im)?;
    Ok(apply_mask(&full, &mask)?.0)
}

/// Run the forward pass `runs` times on fresh random inputs with `n` points.
pub fn measure(cfg: &ModelConfig, n: usize, runs: usize, seed: u64) -> Result<CostProfile> {
    if runs == 0 {
        return Err(Error::arg("runs must be positive"));
    }
    let params = init_params::<f32>(cfg, seed)?;
    let [h, w] = cfg.hr_grid;
    let (m, l) = (cfg.m(), cfg.l());
    let mut times = Vec::with_capacity(runs);
    let mut log = None;
    for r in 0..runs {
        let points = random_points(h, w, n, seed.wrapping_add(r as u64 + 1))?;
        let start = Instant::now();
        let out = forward(&points, &params, cfg, false)?;
        times.push(start.elapsed().as_secs_f64());
        log = Some(out.attention);
    }
    times.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 {
        times[runs / 2]
    } else {
        0.5 * (times[runs / 2 - 1] + times[runs / 2])
    };
    let log = log.expect("runs > 0");
    let decoder = log.entries.iter().filter(|e| !e.label.starts_with("enc."));
    let measured_peak = decoder.clone().map(|e| e.score_elements()).max().unwrap_or(0);
    let measured_decoder = decoder.map(|e| e.score_elements()).sum();
    let hierarchical = cfg.use_lr_decoder && !cfg.hr_self_attention;
    let (analytic_decoder, analytic_peak) = if hierarchical {
        let c = analytic_cost_hier(m, n, l, cfg.d, cfg.n_lr, cfg.n_hr)?;
        (c.total(), c.per_layer_peak)
    } else if !cfg.use_lr_decoder && cfg.hr_self_attention {
        let c = analytic_cost_standard(m, n, cfg.d, cfg.n_hr)?;
        (c.total(), c.per_layer_peak)
    } else {
        return Err(Error::Config(
            "bench compares the hierarchical decoder with the single-resolution one (no LR decoder, HR self-attention)"
                .into(),
        ));
    };
    Ok(CostProfile {
        sweep: String::new(),
        hierarchical,
        m,
        n,
        l,
        d: cfg.d,
        n_enc: cfg.n_enc,
        n_lr: if cfg.use_lr_decoder { cfg.n_lr } else { 0 },
        n_hr: cfg.n_hr,
        analytic_decoder,
        measured_decoder,
        analytic_encoder: encoder_cost(n, cfg.n_enc),
        measured_encoder: log.score_elements_with_prefix("enc."),
        analytic_peak,
        measured_peak,
        runs,
        median_seconds: median,
    })
}

/// The single-resolution counterpart of `cfg`.
pub fn standard_variant(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        use_lr_decoder: false,
        hr_self_attention: true,
        ..cfg.clone()
    }
}

/// Residual sums of squares of the least-squares fits `y = a + b x` and
/// `y = a + c x^2`.
pub fn fit_residuals(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::arg("need at least three (x, y) pairs of equal length"));
    }
    let rss = |feature: &dyn Fn(f64) -> f64| {
        let n = xs.len() as f64;
        let f: Vec<f64> = xs.iter().map(|&x| feature(x)).collect();
        let fm = f.iter().sum::<f64>() / n;
        let ym = ys.iter().sum::<f64>() / n;
        let sxx: f64 = f.iter().map(|v| (v - fm).powi(2)).sum();
        let sxy: f64 = f.iter().zip(ys).map(|(v, y)| (v - fm) * (y - ym)).sum();
        let slope = sxy / sxx;
        let icept = ym - slope * fm;
        f.iter().zip(ys).map(|(v, y)| (y - icept - slope * v).powi(2)).sum::<f64>()
    };
    Ok((rss(&|x| x), rss(&|x| x * x)))
}
