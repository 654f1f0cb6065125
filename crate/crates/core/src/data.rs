//! Synthetic complex-valued phantoms.
//!
//! Each image is a sum of random ellipses, blurred by a small Gaussian,
//! normalized so its peak magnitude never exceeds one, and multiplied by a
//! smooth random phase.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{fft2_centered, ComplexGrid};

const BLUR_SIGMA: f64 = 1.0;
const BLUR_RADIUS: usize = 3;

/// One ellipse in normalized image coordinates (`[-1, 1]` on both axes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_axes[0];
        let v = (-dx * s + dy * c) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }
}

/// Phase map `offset + scale * (a x + b y + c x y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseField {
    pub offset: f64,
    pub coefficients: [f64; 3],
}

impl PhaseField {
    fn at(&self, x: f64, y: f64) -> f64 {
        let [a, b, c] = self.coefficients;
        self.offset + std::f64::consts::FRAC_PI_4 * (a * x + b * y + c * x * y)
    }
}

/// Ground-truth image together with its full spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub seed: u64,
    pub index: usize,
    pub ellipses: Vec<Ellipse>,
    pub phase: PhaseField,
    pub image: ComplexGrid<f64>,
    pub spectrum: ComplexGrid<f64>,
}

impl PhantomSample {
    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// Rebuild from a stored image; the spectrogram is recomputed.
    pub fn from_image(seed: u64, index: usize, ellipses: Vec<Ellipse>, phase: PhaseField, image: ComplexGrid<f64>) -> Result<Self> {
        let spectrum = fft2_centered(&image)?;
        Ok(PhantomSample {
            seed,
            index,
            ellipses,
            phase,
            image,
            spectrum,
        })
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = BLUR_RADIUS as f64;
    let k: Vec<f64> = (0..=2 * BLUR_RADIUS)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with zero padding.
fn blur(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let r = BLUR_RADIUS as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = x as isize + j as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * img[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = y as isize + j as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Phantom number `index` of the dataset identified by `seed`.
pub fn generate_phantom(height: usize, width: usize, seed: u64, index: usize) -> Result<PhantomSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let count = rng.random_range(3..=8);
    let mut ellipses = Vec::with_capacity(count);
    for i in 0..count {
        // The first ellipse is a large body that the others sit inside.
        let (center_span, axes) = if i == 0 { (0.1, 0.55..0.85) } else { (0.5, 0.08..0.45) };
        ellipses.push(Ellipse {
            center: [
                rng.random_range(-center_span..center_span),
                rng.random_range(-center_span..center_span),
            ],
            semi_axes: [rng.random_range(axes.clone()), rng.random_range(axes)],
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: rng.random_range(0.2..=1.0),
        });
    }
    let phase = PhaseField {
        offset: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        coefficients: [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ],
    };

    let coord = |i: usize, n: usize| (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
    let mut mag = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            let (x, y) = (coord(c, width), coord(r, height));
            mag[r * width + c] = ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
        }
    }
    let mut mag = blur(&mag, height, width);
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak > 1.0 {
        mag.iter_mut().for_each(|v| *v /= peak);
    }
    let mut re = vec![0.0; height * width];
    let mut im = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let (s, co) = phase.at(coord(c, width), coord(r, height)).sin_cos();
            re[i] = mag[i] * co;
            im[i] = mag[i] * s;
        }
    }
    let image = ComplexGrid::new(height, width, re, im)?;
    PhantomSample::from_image(seed, index, ellipses, phase, image)
}

/// `count` phantoms with indices `0..count`.
pub fn generate_phantoms(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PhantomSample>> {
    if count == 0 {
        return Err(Error::arg("phantom count must be at least 1"));
    }
    (0..count).map(|i| generate_phantom(height, width, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantoms(4, 32, 32, 9).unwrap();
        let b = generate_phantoms(4, 32, 32, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_phantoms(4, 32, 32, 10).unwrap();
        assert_ne!(a[0].image, c[0].image);
        assert_ne!(a[0].image, a[1].image);
    }

    #[test]
    fn sample_depends_only_on_seed_and_index() {
        let set = generate_phantoms(5, 16, 16, 3).unwrap();
        assert_eq!(generate_phantom(16, 16, 3, 4).unwrap(), set[4]);
    }

    #[test]
    fn magnitudes_are_bounded_and_images_complex() {
        let set = generate_phantoms(100, 32, 32, 1).unwrap();
        for s in &set {
            assert!((3..=8).contains(&s.ellipses.len()));
            let mags = s.image.magnitude();
            assert!(mags.iter().all(|&m| (0.0..=1.2).contains(&m)));
            assert!(mags.iter().any(|&m| m > 0.1));
            assert!(s.image.im().iter().any(|v| v.abs() > 1e-3));
            for e in &s.ellipses {
                assert!((0.2..=1.0).contains(&e.intensity));
            }
        }
    }

    #[test]
    fn spectrum_matches_image() {
        for s in generate_phantoms(3, 64, 64, 5).unwrap() {
            let k = fft2_centered(&s.image).unwrap();
            assert!(k.max_abs_diff(&s.spectrum) <= 1e-10);
        }
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(generate_phantoms(0, 8, 8, 0).is_err());
    }

    #[test]
    fn blur_preserves_mass_away_from_edges() {
        let mut img = vec![0.0; 15 * 15];
        img[7 * 15 + 7] = 1.0;
        let b = blur(&img, 15, 15);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((b[7 * 15 + 6] - b[6 * 15 + 7]).abs() < 1e-15);
    }
}
