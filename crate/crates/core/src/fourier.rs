//! Centered, orthonormally scaled 2D DFT pair connecting k-space and image
//! space, plus a naive double-sum oracle and conjugate-symmetry diagnostics.
//!
//! Convention: `fft2_centered = fftshift . fft2 . ifftshift`, scaled by
//! `1/sqrt(H*W)` in both directions so the transform is unitary. The zero
//! frequency sits at bin `(H/2, W/2)`.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Largest side accepted by [`dft2_naive`].
pub const NAIVE_DFT_MAX_SIDE: usize = 32;

/// Complex `H x W` grid stored as separate real and imaginary channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid<T> {
    height: usize,
    width: usize,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Real> ComplexGrid<T> {
    pub fn new(height: usize, width: usize, re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let n = height * width;
        if re.len() != n || im.len() != n {
            return Err(Error::dim(format!(
                "complex grid {}x{} needs {} values per channel, got re={} im={}",
                height,
                width,
                n,
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexGrid {
            height,
            width,
            re,
            im,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        ComplexGrid {
            height,
            width,
            re: vec![T::zero(); n],
            im: vec![T::zero(); n],
        }
    }

    pub fn from_real(height: usize, width: usize, re: Vec<T>) -> Result<Self> {
        let im = vec![T::zero(); re.len()];
        Self::new(height, width, re, im)
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

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [T] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [T] {
        &mut self.im
    }

    pub fn get(&self, r: usize, c: usize) -> Complex<T> {
        let i = r * self.width + c;
        Complex::new(self.re[i], self.im[i])
    }

    pub fn set(&mut self, r: usize, c: usize, z: Complex<T>) {
        let i = r * self.width + c;
        self.re[i] = z.re;
        self.im[i] = z.im;
    }

    /// Per-pixel modulus, row-major.
    pub fn magnitude(&self) -> Vec<T> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&a, &b)| a.hypot(b))
            .collect()
    }

    pub fn norm_l2(&self) -> f64 {
        self.re
            .iter()
            .chain(&self.im)
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.re
            .iter()
            .zip(&other.re)
            .chain(self.im.iter().zip(&other.im))
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|x| x.is_finite())
    }

    pub fn scale(&self, s: T) -> Self {
        ComplexGrid {
            height: self.height,
            width: self.width,
            re: self.re.iter().map(|&x| x * s).collect(),
            im: self.im.iter().map(|&x| x * s).collect(),
        }
    }

    /// Two-channel tensor `[2, H, W]` (real plane then imaginary plane).
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(2 * self.re.len());
        data.extend_from_slice(&self.re);
        data.extend_from_slice(&self.im);
        Tensor::new([2, self.height, self.width], data).expect("consistent grid")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            &[2, h, w] => {
                let n = h * w;
                Self::new(h, w, t.data()[..n].to_vec(), t.data()[n..].to_vec())
            }
            s => Err(Error::dim(format!(
                "expected a [2, H, W] tensor for a complex grid, got {:?}",
                s
            ))),
        }
    }

    pub fn cast<U: Real>(&self) -> ComplexGrid<U> {
        ComplexGrid {
            height: self.height,
            width: self.width,
            re: self.re.iter().map(|x| U::of(x.f64())).collect(),
            im: self.im.iter().map(|x| U::of(x.f64())).collect(),
        }
    }

    /// Central `h x w` block (k-space low-frequency band when centered).
    pub fn crop_center(&self, h: usize, w: usize) -> Result<Self> {
        if h > self.height || w > self.width {
            return Err(Error::dim(format!(
                "cannot crop {}x{} out of {}x{}",
                h, w, self.height, self.width
            )));
        }
        let (r0, c0) = center_offset(self.height, self.width, h, w);
        let mut out = Self::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                out.set(r, c, self.get(r0 + r, c0 + c));
            }
        }
        Ok(out)
    }

    /// Embed this grid in the middle of a zero `h x w` grid.
    pub fn zero_pad_center(&self, h: usize, w: usize) -> Result<Self> {
        if h < self.height || w < self.width {
            return Err(Error::dim(format!(
                "cannot pad {}x{} into {}x{}",
                self.height, self.width, h, w
            )));
        }
        let (r0, c0) = center_offset(h, w, self.height, self.width);
        let mut out = Self::zeros(h, w);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r0 + r, c0 + c, self.get(r, c));
            }
        }
        Ok(out)
    }
}

/// Top-left corner of a centered `h x w` block inside `big_h x big_w`, chosen
/// so that the DC bins of both grids coincide.
pub fn center_offset(big_h: usize, big_w: usize, h: usize, w: usize) -> (usize, usize) {
    (big_h / 2 - h / 2, big_w / 2 - w / 2)
}

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::dim(format!(
            "FFT grid dims must be powers of two, got {}x{}",
            h, w
        )));
    }
    Ok(())
}

/// In-place centered orthonormal transform of separate re/im planes.
pub(crate) fn centered_transform<T: Real>(
    re: &mut [T],
    im: &mut [T],
    h: usize,
    w: usize,
    inverse: bool,
) -> Result<()> {
    check_pow2(h, w)?;
    debug_assert_eq!(re.len(), h * w);
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };

    // For power-of-two sides fftshift and ifftshift are the same roll by n/2.
    let (hh, hw) = (h / 2, w / 2);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    for r in 0..h {
        let dst_r = (r + hh) % h;
        for c in 0..w {
            let src = r * w + c;
            buf[dst_r * w + (c + hw) % w] = Complex::new(re[src], im[src]);
        }
    }

    row_fft.process(&mut buf);
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }

    let scale = T::one() / T::of((h * w) as f64).sqrt();
    for r in 0..h {
        let src_r = (r + hh) % h;
        for c in 0..w {
            let z = buf[src_r * w + (c + hw) % w];
            re[r * w + c] = z.re * scale;
            im[r * w + c] = z.im * scale;
        }
    }
    Ok(())
}

/// Forward centered transform (image space to k-space).
pub fn fft2_centered<T: Real>(g: &ComplexGrid<T>) -> Result<ComplexGrid<T>> {
    let mut out = g.clone();
    centered_transform(&mut out.re, &mut out.im, g.height, g.width, false)?;
    Ok(out)
}

/// Inverse centered transform (k-space to image space).
pub fn ifft2_centered<T: Real>(g: &ComplexGrid<T>) -> Result<ComplexGrid<T>> {
    let mut out = g.clone();
    centered_transform(&mut out.re, &mut out.im, g.height, g.width, true)?;
    Ok(out)
}

/// Direct double-sum centered DFT with the same scaling and shift
/// convention as [`fft2_centered`]. Quadratic in the pixel count.
pub fn dft2_naive<T: Real>(g: &ComplexGrid<T>) -> Result<ComplexGrid<T>> {
    let (h, w) = g.dims();
    if h > NAIVE_DFT_MAX_SIDE || w > NAIVE_DFT_MAX_SIDE {
        return Err(Error::arg(format!(
            "naive DFT limited to {}x{}, got {}x{}",
            NAIVE_DFT_MAX_SIDE, NAIVE_DFT_MAX_SIDE, h, w
        )));
    }
    let tau = std::f64::consts::TAU;
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let (hh, hw) = ((h / 2) as f64, (w / 2) as f64);
    let mut out = ComplexGrid::zeros(h, w);
    for u in 0..h {
        let fu = u as f64 - hh;
        for v in 0..w {
            let fv = v as f64 - hw;
            let mut acc = Complex::new(0.0f64, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let phase =
                        -tau * (fu * (r as f64 - hh) / h as f64 + fv * (c as f64 - hw) / w as f64);
                    let x = g.get(r, c);
                    acc += Complex::new(x.re.f64(), x.im.f64()) * Complex::from_polar(1.0, phase);
                }
            }
            out.set(u, v, Complex::new(T::of(acc.re * scale), T::of(acc.im * scale)));
        }
    }
    Ok(out)
}

/// `max_k |g[k] - conj(g[-k])|` in centered indexing. Zero for spectra of
/// real-valued images.
pub fn hermitian_symmetry_error<T: Real>(g: &ComplexGrid<T>) -> f64 {
    let (h, w) = g.dims();
    let mut worst = 0.0f64;
    for r in 0..h {
        let rr = (h - r) % h;
        for c in 0..w {
            let cc = (w - c) % w;
            let a = g.get(r, c);
            let b = g.get(rr, cc);
            let d = Complex::new(a.re.f64() - b.re.f64(), a.im.f64() + b.im.f64());
            worst = worst.max(d.norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(h: usize, w: usize, seed: u64) -> ComplexGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let re = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        ComplexGrid::new(h, w, re, im).unwrap()
    }

    fn inner(a: &ComplexGrid<f64>, b: &ComplexGrid<f64>) -> Complex<f64> {
        (0..a.len())
            .map(|i| Complex::new(a.re[i], a.im[i]) * Complex::new(b.re[i], -b.im[i]))
            .sum()
    }

    #[test]
    fn impulse_at_center_gives_constant() {
        let mut g = ComplexGrid::<f64>::zeros(8, 16);
        g.set(4, 8, Complex::new(1.0, 0.0));
        let k = fft2_centered(&g).unwrap();
        let expect = 1.0 / (128f64).sqrt();
        for i in 0..k.len() {
            assert!((k.re[i] - expect).abs() < 1e-14);
            assert!(k.im[i].abs() < 1e-14);
        }
    }

    #[test]
    fn zero_grid_maps_to_zero() {
        let g = ComplexGrid::<f64>::zeros(4, 4);
        assert_eq!(fft2_centered(&g).unwrap(), g);
        assert_eq!(ifft2_centered(&g).unwrap(), g);
    }

    #[test]
    fn constant_grid_inverts_to_center_impulse() {
        // 2x2 constant 3: inverse gives sum/sqrt(4) = 2*3 at the center bin.
        let g = ComplexGrid::<f64>::from_real(2, 2, vec![3.0; 4]).unwrap();
        let x = ifft2_centered(&g).unwrap();
        assert!((x.get(1, 1).re - 6.0).abs() < 1e-14);
        for (r, c) in [(0, 0), (0, 1), (1, 0)] {
            assert!(x.get(r, c).norm() < 1e-14);
        }
    }

    #[test]
    fn matches_naive_dft() {
        for &h in &[2, 4, 8, 16] {
            for &w in &[2, 4, 8, 16] {
                let g = random_grid(h, w, (h * 100 + w) as u64);
                let fast = fft2_centered(&g).unwrap();
                let slow = dft2_naive(&g).unwrap();
                assert!(fast.max_abs_diff(&slow) < 1e-10, "{}x{}", h, w);
            }
        }
    }

    #[test]
    fn inverse_matches_conjugation_identity() {
        let g = random_grid(8, 8, 3);
        let conj = |x: &ComplexGrid<f64>| {
            ComplexGrid::new(x.height, x.width, x.re.clone(), x.im.iter().map(|v| -v).collect())
                .unwrap()
        };
        let via_conj = conj(&fft2_centered(&conj(&g)).unwrap());
        let direct = ifft2_centered(&g).unwrap();
        assert!(direct.max_abs_diff(&via_conj) < 1e-10);
    }

    #[test]
    fn round_trip_and_parseval() {
        let g = random_grid(16, 16, 7);
        let k = fft2_centered(&g).unwrap();
        assert!(((k.norm_l2() - g.norm_l2()) / g.norm_l2()).abs() < 1e-9);
        let back = ifft2_centered(&k).unwrap();
        assert!(back.max_abs_diff(&g) < 1e-10);
    }

    #[test]
    fn forward_and_inverse_are_adjoint() {
        for seed in 0..5 {
            let x = random_grid(8, 16, seed);
            let y = random_grid(8, 16, seed + 100);
            let lhs = inner(&fft2_centered(&x).unwrap(), &y);
            let rhs = inner(&x, &ifft2_centered(&y).unwrap());
            assert!((lhs - rhs).norm() < 1e-9);
        }
    }

    #[test]
    fn linearity() {
        let x = random_grid(8, 8, 1);
        let y = random_grid(8, 8, 2);
        let (a, b) = (0.7, -1.3);
        let combo = ComplexGrid::new(
            8,
            8,
            (0..64).map(|i| a * x.re[i] + b * y.re[i]).collect(),
            (0..64).map(|i| a * x.im[i] + b * y.im[i]).collect(),
        )
        .unwrap();
        let fx = fft2_centered(&x).unwrap();
        let fy = fft2_centered(&y).unwrap();
        let expect = ComplexGrid::new(
            8,
            8,
            (0..64).map(|i| a * fx.re[i] + b * fy.re[i]).collect(),
            (0..64).map(|i| a * fx.im[i] + b * fy.im[i]).collect(),
        )
        .unwrap();
        assert!(fft2_centered(&combo).unwrap().max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let g = ComplexGrid::<f64>::zeros(6, 8);
        assert!(matches!(fft2_centered(&g), Err(Error::Dimension(_))));
        assert!(matches!(ifft2_centered(&g), Err(Error::Dimension(_))));
    }

    #[test]
    fn naive_dft_guards_size() {
        let g = ComplexGrid::<f64>::zeros(64, 8);
        assert!(dft2_naive(&g).is_err());
    }

    #[test]
    fn hermitian_error_of_real_image_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let re: Vec<f64> = (0..256).map(|_| rng.random()).collect();
        let img = ComplexGrid::from_real(16, 16, re.clone()).unwrap();
        let k = fft2_centered(&img).unwrap();
        assert!(hermitian_symmetry_error(&k) < 1e-10);

        // i * real image: error is twice the largest bin magnitude.
        let imag = ComplexGrid::new(16, 16, vec![0.0; 256], re).unwrap();
        let k2 = fft2_centered(&imag).unwrap();
        let max_mag = k2.magnitude().into_iter().fold(0.0, f64::max);
        let err = hermitian_symmetry_error(&k2);
        assert!(err > 0.0);
        assert!((err - 2.0 * max_mag).abs() < 1e-10);

        assert_eq!(hermitian_symmetry_error(&ComplexGrid::<f64>::zeros(4, 4)), 0.0);
    }

    #[test]
    fn crop_and_pad_share_dc() {
        let g = random_grid(16, 16, 4);
        let c = g.crop_center(4, 4).unwrap();
        assert_eq!(c.get(2, 2), g.get(8, 8));
        let p = c.zero_pad_center(16, 16).unwrap();
        assert_eq!(p.get(8, 8), g.get(8, 8));
        assert_eq!(p.get(0, 0), Complex::new(0.0, 0.0));
    }
}
