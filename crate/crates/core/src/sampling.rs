//! Cartesian undersampling masks and the sampled point set fed to the model.
//!
//! Bin `(r, c)` of an `H x W` grid sits at the normalized position
//! `((r + 0.5) / H, (c + 0.5) / W)`, so grids of different resolution cover
//! the same continuous domain.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::ComplexGrid;
use crate::real::Real;

pub const DEFAULT_CENTER_FRACTION: f64 = 0.08;
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Whole phase-encode columns.
    Uniform1d,
    /// Independent per-bin draws from a centered Gaussian density.
    Gaussian2d,
    /// Anything built from an explicit grid.
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMeta {
    pub kind: MaskKind,
    pub target_acceleration: f64,
    pub achieved_acceleration: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub offset: Option<usize>,
    #[serde(default)]
    pub center_fraction: Option<f64>,
    #[serde(default)]
    pub sigma_fraction: Option<f64>,
    /// Undersampled axis for 1D masks.
    #[serde(default)]
    pub axis: Option<String>,
}

/// Binary sampling mask. The DC bin `(H/2, W/2)` is always sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    meta: MaskMeta,
}

impl Mask {
    /// Build from explicit bits; rejects empty masks and masks that skip DC.
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        Self::with_meta(height, width, bits, MaskKind::Custom, None, |m| m)
    }

    fn with_meta(
        height: usize,
        width: usize,
        bits: Vec<bool>,
        kind: MaskKind,
        target: Option<f64>,
        extra: impl FnOnce(MaskMeta) -> MaskMeta,
    ) -> Result<Self> {
        if bits.len() != height * width || bits.is_empty() {
            return Err(Error::dim(format!(
                "mask {}x{} needs {} entries, got {}",
                height,
                width,
                height * width,
                bits.len()
            )));
        }
        if !bits[(height / 2) * width + width / 2] {
            return Err(Error::arg("mask must sample the DC bin"));
        }
        let ones = bits.iter().filter(|&&b| b).count();
        let achieved = (height * width) as f64 / ones as f64;
        let meta = extra(MaskMeta {
            kind,
            target_acceleration: target.unwrap_or(achieved),
            achieved_acceleration: achieved,
            seed: None,
            offset: None,
            center_fraction: None,
            sigma_fraction: None,
            axis: None,
        });
        Ok(Mask {
            height,
            width,
            bits,
            meta,
        })
    }

    pub fn all_ones(height: usize, width: usize) -> Self {
        Self::from_bits(height, width, vec![true; height * width]).expect("non-empty")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn meta(&self) -> &MaskMeta {
        &self.meta
    }

    pub(crate) fn set_meta(&mut self, meta: MaskMeta) {
        self.meta = meta;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `H*W / popcount`.
    pub fn acceleration(&self) -> f64 {
        (self.height * self.width) as f64 / self.count_ones() as f64
    }

    /// Mask as a 0/1 real plane.
    pub fn to_real<T: Real>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }
}

/// Normalized position of bin `(r, c)`.
pub fn bin_position(r: usize, c: usize, height: usize, width: usize) -> [f64; 2] {
    [
        (r as f64 + 0.5) / height as f64,
        (c as f64 + 0.5) / width as f64,
    ]
}

/// Equispaced phase-encode lines (columns) plus a fully sampled central block.
///
/// Outside the block, every `a'`-th column is kept starting at `offset`,
/// where `a' = accel * (n_low - W) / (n_low * accel - W)` makes the expected
/// total `W / accel` columns.
pub fn make_uniform_1d_mask(
    height: usize,
    width: usize,
    accel: f64,
    center_fraction: f64,
    offset: usize,
) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::arg("mask dims must be positive"));
    }
    if !(accel >= 1.0) {
        return Err(Error::arg(format!("acceleration must be >= 1, got {}", accel)));
    }
    if !(0.0..1.0).contains(&center_fraction) {
        return Err(Error::arg(format!(
            "center fraction must lie in [0, 1), got {}",
            center_fraction
        )));
    }
    let max_offset = (accel.round() as usize).max(1);
    if offset >= max_offset {
        return Err(Error::arg(format!(
            "offset {} must be below round(accel) = {}",
            offset, max_offset
        )));
    }
    // Guard against float noise such as 0.08 * 50 = 4.000000000000001.
    let n_low = ((center_fraction * width as f64) - 1e-9).ceil().max(0.0) as usize;
    let budget = width as f64 / accel;
    if n_low as f64 > budget + 1e-9 {
        return Err(Error::arg(format!(
            "central block of {} columns exceeds the budget of {:.2} columns at {}x",
            n_low, budget, accel
        )));
    }
    let mut cols = vec![false; width];
    let pad = (width - n_low + 1) / 2;
    for c in cols.iter_mut().skip(pad).take(n_low) {
        *c = true;
    }
    let denom = n_low as f64 * accel - width as f64;
    if denom.abs() > 1e-12 {
        let spacing = accel * (n_low as f64 - width as f64) / denom;
        let mut pos = offset as f64;
        while pos < (width - 1) as f64 + 0.5 {
            let c = pos.round() as usize;
            if c < width {
                cols[c] = true;
            }
            pos += spacing;
        }
    }
    cols[width / 2] = true;
    let bits = (0..height * width).map(|i| cols[i % width]).collect();
    Mask::with_meta(height, width, bits, MaskKind::Uniform1d, Some(accel), |m| MaskMeta {
        offset: Some(offset),
        center_fraction: Some(center_fraction),
        axis: Some("columns".to_string()),
        ..m
    })
}

/// Per-bin inclusion probabilities `min(1, c * exp(-|k - k0|^2 / (2 sigma^2)))`
/// with `c` chosen by bisection so the expected count is `H*W / accel`.
pub fn gaussian_density(
    height: usize,
    width: usize,
    accel: f64,
    sigma_fraction: f64,
) -> Result<Vec<f64>> {
    if !(accel >= 1.0) {
        return Err(Error::arg(format!("acceleration must be >= 1, got {}", accel)));
    }
    if !(sigma_fraction > 0.0) {
        return Err(Error::arg(format!(
            "sigma fraction must be positive, got {}",
            sigma_fraction
        )));
    }
    let n = (height * width) as f64;
    let target = n / accel;
    let sigma = sigma_fraction * height.min(width) as f64;
    let (r0, c0) = ((height / 2) as f64, (width / 2) as f64);
    let base: Vec<f64> = (0..height * width)
        .map(|i| {
            let dr = (i / width) as f64 - r0;
            let dc = (i % width) as f64 - c0;
            (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let expected = |c: f64| base.iter().map(|&b| (c * b).min(1.0)).sum::<f64>();
    if target >= n - 1e-9 {
        return Ok(vec![1.0; base.len()]);
    }
    let min_base = base.iter().copied().fold(f64::INFINITY, f64::min);
    let (mut lo, mut hi) = (0.0, 1.0 / min_base);
    if expected(hi) < target {
        return Err(Error::arg(format!(
            "cannot calibrate Gaussian density to {} samples",
            target
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(base.iter().map(|&b| (hi * b).min(1.0)).collect())
}

/// Variable-density random mask; the DC bin is forced on.
pub fn make_gaussian_2d_mask(
    height: usize,
    width: usize,
    accel: f64,
    sigma_fraction: f64,
    seed: u64,
) -> Result<Mask> {
    let probs = gaussian_density(height, width, accel, sigma_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits: Vec<bool> = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
    bits[(height / 2) * width + width / 2] = true;
    Mask::with_meta(height, width, bits, MaskKind::Gaussian2d, Some(accel), |m| MaskMeta {
        seed: Some(seed),
        sigma_fraction: Some(sigma_fraction),
        ..m
    })
}

/// Serializable recipe for a mask; `build` is deterministic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub acceleration: f64,
    pub center_fraction: f64,
    pub sigma_fraction: f64,
    /// Column offset for uniform masks.
    pub offset: usize,
    /// RNG seed for Gaussian masks.
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            kind: MaskKind::Uniform1d,
            acceleration: 2.5,
            center_fraction: DEFAULT_CENTER_FRACTION,
            sigma_fraction: DEFAULT_SIGMA_FRACTION,
            offset: 0,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn uniform(acceleration: f64) -> Self {
        MaskSpec { acceleration, ..Self::default() }
    }

    pub fn gaussian(acceleration: f64, seed: u64) -> Self {
        MaskSpec {
            kind: MaskKind::Gaussian2d,
            acceleration,
            seed,
            ..Self::default()
        }
    }

    pub fn build(&self, height: usize, width: usize) -> Result<Mask> {
        match self.kind {
            MaskKind::Uniform1d => {
                make_uniform_1d_mask(height, width, self.acceleration, self.center_fraction, self.offset)
            }
            MaskKind::Gaussian2d => {
                make_gaussian_2d_mask(height, width, self.acceleration, self.sigma_fraction, self.seed)
            }
            MaskKind::Custom => Err(Error::Config("a custom mask has no recipe; load it from a file".into())),
        }
    }
}

/// The observed k-space points `s_i = (m_i, p_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPointSet<T> {
    /// Complex value per point, as `[re, im]`.
    pub values: Vec<[T; 2]>,
    /// Normalized position per point.
    pub positions: Vec<[f64; 2]>,
    /// Source bin per point.
    pub bins: Vec<(usize, usize)>,
    pub mask: Mask,
}

impl<T: Real> SampledPointSet<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    /// Scatter the points back onto a zero grid.
    pub fn scatter(&self) -> ComplexGrid<T> {
        let (h, w) = self.dims();
        let mut g = ComplexGrid::zeros(h, w);
        for (&(r, c), v) in self.bins.iter().zip(&self.values) {
            g.set(r, c, Complex::new(v[0], v[1]));
        }
        g
    }

    /// Reorder the points (the set itself is unchanged).
    pub fn permuted(&self, order: &[usize]) -> Self {
        SampledPointSet {
            values: order.iter().map(|&i| self.values[i]).collect(),
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            bins: order.iter().map(|&i| self.bins[i]).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// Gather the mask-1 bins of `full` (row-major order) and build the
/// zero-filled spectrogram.
pub fn apply_mask<T: Real>(
    full: &ComplexGrid<T>,
    mask: &Mask,
) -> Result<(SampledPointSet<T>, ComplexGrid<T>)> {
    if full.dims() != mask.dims() {
        return Err(Error::dim(format!(
            "spectrogram {:?} and mask {:?} differ in size",
            full.dims(),
            mask.dims()
        )));
    }
    let (h, w) = mask.dims();
    let mut zero_filled = ComplexGrid::zeros(h, w);
    let mut values = Vec::with_capacity(mask.count_ones());
    let mut positions = Vec::with_capacity(mask.count_ones());
    let mut bins = Vec::with_capacity(mask.count_ones());
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                let z = full.get(r, c);
                zero_filled.set(r, c, z);
                values.push([z.re, z.im]);
                positions.push(bin_position(r, c, h, w));
                bins.push((r, c));
            }
        }
    }
    Ok((
        SampledPointSet {
            values,
            positions,
            bins,
            mask: mask.clone(),
        },
        zero_filled,
    ))
}

/// `H*W / popcount`.
pub fn acceleration(mask: &Mask) -> f64 {
    mask.acceleration()
}
