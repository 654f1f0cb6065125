use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::center_offset;
use crate::sampling::bin_position;

/// Architecture hyper-parameters.
///
/// The defaults are the desk-scale model; [`ModelConfig::paper_scale`] gives
/// the full-size constants (d = 256, 4/4/6 layers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width.
    pub d: usize,
    pub n_heads: usize,
    pub n_enc: usize,
    pub n_lr: usize,
    pub n_hr: usize,
    /// Hidden width of the transformer feed-forward blocks; `None` means `4 * d`.
    pub ffn_width: Option<usize>,
    /// Hidden width of the value-embedding MLPs; `None` means `d`.
    pub mlp_hidden: Option<usize>,
    /// High-resolution output grid `[H, W]`.
    pub hr_grid: [usize; 2],
    /// Low-resolution grid `[h, w]`; must divide `hr_grid` per axis.
    pub lr_grid: [usize; 2],
    /// Channels of the hidden refinement convolutions.
    pub refine_channels: usize,
    /// Number of 3x3 convolutions in each refinement stack (last one maps to 2 channels).
    pub refine_depth: usize,
    pub leaky_slope: f64,
    /// Image-domain refinement after every HR layer.
    pub use_refinement: bool,
    /// When false, HR queries attend straight into the encoder memory.
    pub use_lr_decoder: bool,
    /// Full-resolution self-attention in HR layers (non-hierarchical baseline only).
    pub hr_self_attention: bool,
    /// Overwrite predicted k-space at sampled bins with the measurements.
    pub data_consistency: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_heads: 2,
            n_enc: 2,
            n_lr: 2,
            n_hr: 3,
            ffn_width: None,
            mlp_hidden: None,
            hr_grid: [64, 64],
            lr_grid: [16, 16],
            refine_channels: 32,
            refine_depth: 5,
            leaky_slope: 0.01,
            use_refinement: true,
            use_lr_decoder: true,
            hr_self_attention: false,
            data_consistency: false,
        }
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        ModelConfig {
            d: 256,
            n_heads: 8,
            n_enc: 4,
            n_lr: 4,
            n_hr: 6,
            refine_channels: 64,
            ..Self::default()
        }
    }

    /// Small configuration for gradient checks and fast tests.
    pub fn tiny(grid: usize) -> Self {
        ModelConfig {
            d: 16,
            n_heads: 2,
            n_enc: 1,
            n_lr: 1,
            n_hr: 2,
            hr_grid: [grid, grid],
            lr_grid: [grid / 4, grid / 4],
            refine_channels: 4,
            ..Self::default()
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_width.unwrap_or(4 * self.d)
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(self.d)
    }

    /// Number of HR grid coordinates `m`.
    pub fn m(&self) -> usize {
        self.hr_grid[0] * self.hr_grid[1]
    }

    /// Number of LR grid coordinates `l`.
    pub fn l(&self) -> usize {
        self.lr_grid[0] * self.lr_grid[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.d % 4 != 0 {
            return bad(format!("d = {} must be a positive multiple of 4", self.d));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!("d = {} not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if self.n_hr == 0 {
            return bad("n_hr must be at least 1".into());
        }
        if self.use_lr_decoder && self.n_lr == 0 {
            return bad("n_lr must be at least 1 when the LR decoder is used".into());
        }
        let [h, w] = self.hr_grid;
        let [lh, lw] = self.lr_grid;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return bad(format!("hr_grid {:?} must be powers of two", self.hr_grid));
        }
        if lh == 0 || lw == 0 || h % lh != 0 || w % lw != 0 {
            return bad(format!(
                "lr_grid {:?} must divide hr_grid {:?}",
                self.lr_grid, self.hr_grid
            ));
        }
        if self.refine_depth < 2 || self.refine_channels == 0 {
            return bad("refinement needs depth >= 2 and at least one channel".into());
        }
        if !(self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope {} must be >= 0", self.leaky_slope));
        }
        Ok(())
    }

    /// Row-major normalized coordinates of the HR grid.
    pub fn hr_positions(&self) -> Vec<[f64; 2]> {
        let [h, w] = self.hr_grid;
        (0..h * w)
            .map(|i| bin_position(i / w, i % w, h, w))
            .collect()
    }

    /// Row-major normalized coordinates of the LR grid: the central
    /// `h x w` band of the HR grid, in HR coordinates.
    pub fn lr_positions(&self) -> Vec<[f64; 2]> {
        let [hh, hw] = self.hr_grid;
        let [lh, lw] = self.lr_grid;
        let (r0, c0) = center_offset(hh, hw, lh, lw);
        (0..lh * lw)
            .map(|i| bin_position(r0 + i / lw, c0 + i % lw, hh, hw))
            .collect()
    }
}
