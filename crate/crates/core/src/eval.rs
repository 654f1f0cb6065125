//! Held-out evaluation against the zero-filled baseline.

use serde::Serialize;

use crate::data::PhantomSample;
use crate::error::{Error, Result};
use crate::fourier::{ifft2_centered, ComplexGrid};
use crate::metrics::{psnr_complex, ssim_complex};
use crate::model::{forward, ModelConfig, ReconstructionOutputs};
use crate::params::ParamStore;
use crate::real::Real;
use crate::sampling::{apply_mask, Mask};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub zero_filled_psnr: f64,
    pub zero_filled_ssim: f64,
    /// PSNR of each HR layer's refined image.
    pub layer_psnr: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Aggregate { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if mean.is_finite() {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
        } else {
            f64::NAN
        };
        Aggregate { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub zero_filled_psnr: Aggregate,
    pub zero_filled_ssim: Aggregate,
    /// Mean PSNR per HR layer.
    pub layer_psnr: Vec<f64>,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let layers = samples.first().map_or(0, |s| s.layer_psnr.len());
        let layer_psnr = (0..layers)
            .map(|i| Aggregate::of(samples.iter().map(|s| s.layer_psnr[i])).mean)
            .collect();
        EvalReport {
            psnr: Aggregate::of(samples.iter().map(|s| s.psnr)),
            ssim: Aggregate::of(samples.iter().map(|s| s.ssim)),
            zero_filled_psnr: Aggregate::of(samples.iter().map(|s| s.zero_filled_psnr)),
            zero_filled_ssim: Aggregate::of(samples.iter().map(|s| s.zero_filled_ssim)),
            layer_psnr,
            samples,
        }
    }
}

/// Model output and zero-filled baseline for one sample.
pub struct Reconstruction<T> {
    pub outputs: ReconstructionOutputs<T>,
    pub zero_filled: ComplexGrid<T>,
    pub ground_truth: ComplexGrid<T>,
}

pub fn reconstruct<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    sample: &PhantomSample,
    mask: &Mask,
    record_attention: bool,
) -> Result<Reconstruction<T>> {
    let spectrum = sample.spectrum.cast::<T>();
    let (points, zf_spectrum) = apply_mask(&spectrum, mask)?;
    // A full mask loses nothing, so the baseline is the stored image itself.
    let zero_filled = if mask.count_ones() == mask.bits().len() {
        sample.image.cast()
    } else {
        ifft2_centered(&zf_spectrum)?
    };
    Ok(Reconstruction {
        outputs: forward(&points, params, cfg, record_attention)?,
        zero_filled,
        ground_truth: sample.image.cast(),
    })
}

pub fn evaluate_sample<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    sample: &PhantomSample,
    mask: &Mask,
) -> Result<SampleMetrics> {
    let r = reconstruct(params, cfg, sample, mask, false)?;
    let gt = &r.ground_truth;
    Ok(SampleMetrics {
        index: sample.index,
        psnr: psnr_complex(&r.outputs.final_image, gt)?,
        ssim: ssim_complex(&r.outputs.final_image, gt)?,
        zero_filled_psnr: psnr_complex(&r.zero_filled, gt)?,
        zero_filled_ssim: ssim_complex(&r.zero_filled, gt)?,
        layer_psnr: r
            .outputs
            .hr_images
            .iter()
            .map(|img| psnr_complex(img, gt))
            .collect::<Result<_>>()?,
    })
}

pub fn evaluate<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    dataset: &[PhantomSample],
    mask: &Mask,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::arg("evaluation needs at least one sample"));
    }
    let samples = dataset
        .iter()
        .map(|s| evaluate_sample(params, cfg, s, mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(samples))
}
