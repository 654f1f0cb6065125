//! Image quality metrics on magnitude images.

use crate::error::{Error, Result};
use crate::fourier::ComplexGrid;
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(x: &[f64], reference: &[f64]) -> Result<()> {
    if x.len() != reference.len() || x.is_empty() {
        return Err(Error::dim(format!(
            "metric inputs have {} and {} pixels",
            x.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// `10 log10(MAX^2 / MSE)` with `MAX` the peak of `reference`.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(x: &[f64], reference: &[f64]) -> Result<f64> {
    check_same(x, reference)?;
    let max = reference.iter().copied().fold(0.0, f64::max);
    let mse = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max * max / mse).log10())
}

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Valid-mode separable filtering with the SSIM window.
fn filter_valid(img: &[f64], height: usize, width: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(j, t)| t * img[y * width + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(j, t)| t * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all window positions that fit inside the image.
pub fn ssim(x: &[f64], reference: &[f64], height: usize, width: usize) -> Result<f64> {
    check_same(x, reference)?;
    if x.len() != height * width {
        return Err(Error::dim(format!("{} pixels for a {height}x{width} image", x.len())));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "{height}x{width} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let range = reference.iter().copied().fold(0.0, f64::max);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let taps = ssim_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = reference.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(reference).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, height, width, &taps);
    let my = filter_valid(reference, height, width, &taps);
    let sxx = filter_valid(&xx, height, width, &taps);
    let syy = filter_valid(&yy, height, width, &taps);
    let sxy = filter_valid(&xy, height, width, &taps);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

pub fn magnitude_f64<T: Real>(g: &ComplexGrid<T>) -> Vec<f64> {
    g.magnitude().into_iter().map(Real::f64).collect()
}

/// PSNR of the magnitude images.
pub fn psnr_complex<T: Real>(x: &ComplexGrid<T>, reference: &ComplexGrid<T>) -> Result<f64> {
    psnr(&magnitude_f64(x), &magnitude_f64(reference))
}

/// SSIM of the magnitude images.
pub fn ssim_complex<T: Real>(x: &ComplexGrid<T>, reference: &ComplexGrid<T>) -> Result<f64> {
    if x.dims() != reference.dims() {
        return Err(Error::dim(format!("{:?} vs {:?}", x.dims(), reference.dims())));
    }
    let (h, w) = x.dims();
    ssim(&magnitude_f64(x), &magnitude_f64(reference), h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    /// Direct windowed SSIM with explicit 2D weights and centered moments.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let c = 5.0;
        let mut win = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let l = y.iter().copied().fold(0.0, f64::max);
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=h - 11 {
            for c0 in 0..=w - 11 {
                let at = |img: &[f64], i: usize, j: usize| img[(r0 + i) * w + c0 + j];
                let (mut ux, mut uy) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        ux += win[i][j] / s * at(x, i, j);
                        uy += win[i][j] / s * at(y, i, j);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = win[i][j] / s;
                        vx += wt * (at(x, i, j) - ux).powi(2);
                        vy += wt * (at(y, i, j) - uy).powi(2);
                        cxy += wt * (at(x, i, j) - ux) * (at(y, i, j) - uy);
                    }
                }
                total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_examples() {
        let r = random(64, 1);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        // MSE equal to MAX^2 gives 0 dB.
        let reference = vec![0.0, 2.0];
        let x = vec![2.0, 0.0];
        assert!(psnr(&x, &reference).unwrap().abs() < 1e-12);
        let x = random(64, 2);
        let max = r.iter().copied().fold(0.0, f64::max);
        let mse: f64 = x.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 64.0;
        assert!((psnr(&x, &r).unwrap() - 10.0 * (max * max / mse).log10()).abs() < 1e-9);
        assert!(psnr(&x[..3], &r).is_err());
    }

    #[test]
    fn ssim_examples() {
        let x = random(16 * 20, 3);
        assert!((ssim(&x, &x, 16, 20).unwrap() - 1.0).abs() < 1e-12);
        let bin: Vec<f64> = x.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        let inv: Vec<f64> = bin.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&inv, &bin, 16, 20).unwrap() < ssim(&bin, &bin, 16, 20).unwrap());
        assert!(ssim(&x[..100], &x[..100], 10, 10).is_err());
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        for (h, w, seed) in [(11, 11, 4), (16, 13, 5), (24, 24, 6)] {
            let x = random(h * w, seed);
            let y: Vec<f64> = random(h * w, seed + 100).iter().zip(&x).map(|(n, v)| 0.7 * v + 0.3 * n).collect();
            let fast = ssim(&x, &y, h, w).unwrap();
            assert!((fast - ssim_oracle(&x, &y, h, w)).abs() < 1e-8);
        }
    }

    #[test]
    fn metrics_are_repeatable() {
        let x = random(144, 7);
        let y = random(144, 8);
        assert_eq!(ssim(&x, &y, 12, 12).unwrap().to_bits(), ssim(&x, &y, 12, 12).unwrap().to_bits());
        assert_eq!(psnr(&x, &y).unwrap().to_bits(), psnr(&x, &y).unwrap().to_bits());
    }

    proptest! {
        #[test]
        fn ssim_is_bounded(seed in 0u64..500) {
            let x = random(12 * 12, seed);
            let y = random(12 * 12, seed ^ 0xABCD);
            let s = ssim(&x, &y, 12, 12).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn psnr_is_symmetric_in_error(seed in 0u64..500) {
            let r = random(32, seed);
            let e = random(32, seed + 1);
            let plus: Vec<f64> = r.iter().zip(&e).map(|(a, b)| a + 0.1 * b).collect();
            let minus: Vec<f64> = r.iter().zip(&e).map(|(a, b)| a - 0.1 * b).collect();
            prop_assert!((psnr(&plus, &r).unwrap() - psnr(&minus, &r).unwrap()).abs() < 1e-9);
        }
    }
}
