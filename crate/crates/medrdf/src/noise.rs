//! Isotropic pixel noise models and the fixed (non-learned) denoisers
//! applied to each noisy copy before classification.
//!
//! Every element of the image is perturbed independently with a common
//! scale parameter `sigma`, whose meaning depends on the noise kind:
//!
//! * `Gaussian` — additive noise with standard deviation `sigma`;
//! * `SaltAndPepper` — each pixel is corrupted with probability `sigma`,
//!   and a corrupted pixel becomes 0 or 1 with equal probability;
//! * `Poisson` — the pixel is scaled to photon counts at 8-bit scale
//!   (`c = x * 255`), a Poisson draw with mean `c` replaces it, and the
//!   result is scaled back.
//!
//! Denoisers run per channel with edge replication at the borders.

use crate::error::{Error, Result};
use crate::tensor::{clamp01, ImageTensor, SeededStream};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian,
    SaltAndPepper,
    Poisson,
}

/// An isotropic noise distribution with scale `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
}

/// Photon-count scale used by the Poisson model: pixel intensities are
/// interpreted as mean counts out of 255, the 8-bit convention.
const POISSON_SCALE: f64 = 255.0;

impl NoiseModel {
    pub fn gaussian(sigma: f64) -> Self {
        NoiseModel {
            kind: NoiseKind::Gaussian,
            sigma,
        }
    }

    pub fn salt_and_pepper(sigma: f64) -> Self {
        NoiseModel {
            kind: NoiseKind::SaltAndPepper,
            sigma,
        }
    }

    pub fn poisson() -> Self {
        NoiseModel {
            kind: NoiseKind::Poisson,
            sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if self.kind == NoiseKind::SaltAndPepper && self.sigma > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "salt-and-pepper corruption probability must be <= 1, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseKind {
    None,
    GaussianSmoothing,
    MedianFilter,
}

/// A fixed spatial filter applied to each noisy copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub kind: DenoiseKind,
    /// Odd spatial extent of the filter window.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Kernel standard deviation; only used by Gaussian smoothing.
    #[serde(default = "default_smoothing_sigma")]
    pub smoothing_sigma: f64,
}

fn default_window() -> usize {
    3
}

fn default_smoothing_sigma() -> f64 {
    1.0
}

impl Denoiser {
    pub fn none() -> Self {
        Denoiser {
            kind: DenoiseKind::None,
            window: 1,
            smoothing_sigma: 1.0,
        }
    }

    pub fn gaussian_smoothing(window: usize, smoothing_sigma: f64) -> Self {
        Denoiser {
            kind: DenoiseKind::GaussianSmoothing,
            window,
            smoothing_sigma,
        }
    }

    pub fn median_filter(window: usize) -> Self {
        Denoiser {
            kind: DenoiseKind::MedianFilter,
            window,
            smoothing_sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == DenoiseKind::None {
            return Ok(());
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "denoiser window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if self.kind == DenoiseKind::GaussianSmoothing
            && (!self.smoothing_sigma.is_finite() || self.smoothing_sigma <= 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "smoothing sigma must be positive, got {}",
                self.smoothing_sigma
            )));
        }
        Ok(())
    }
}

/// Draws one noisy copy of `x`. The input is never modified; identical
/// `(x, model, stream)` triples produce identical output.
pub fn perturb(x: &ImageTensor, model: &NoiseModel, stream: SeededStream) -> ImageTensor {
    let mut rng = stream.rng();
    let mut out = x.clone();
    match model.kind {
        NoiseKind::Gaussian => {
            if model.sigma > 0.0 {
                let normal = Normal::new(0.0, model.sigma).expect("validated sigma");
                for v in out.as_mut_slice() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        NoiseKind::SaltAndPepper => {
            let p = model.sigma;
            for v in out.as_mut_slice() {
                let u: f64 = rng.random();
                if u < p {
                    *v = if u < p * 0.5 { 0.0 } else { 1.0 };
                }
            }
        }
        NoiseKind::Poisson => {
            for v in out.as_mut_slice() {
                let counts = (*v * POISSON_SCALE).max(0.0);
                let sampled = if counts > 0.0 {
                    Poisson::new(counts).expect("positive mean").sample(&mut rng)
                } else {
                    0.0
                };
                *v = sampled / POISSON_SCALE;
            }
        }
    }
    clamp01(&out)
}

/// Applies the denoiser to `x`, returning a new tensor. `None` is the
/// identity; the filters replicate edge pixels at the borders.
pub fn denoise(x: &ImageTensor, d: &Denoiser) -> ImageTensor {
    match d.kind {
        DenoiseKind::None => x.clone(),
        DenoiseKind::GaussianSmoothing => gaussian_smooth(x, d.window, d.smoothing_sigma),
        DenoiseKind::MedianFilter => median_filter(x, d.window),
    }
}

/// Normalized 1-D Gaussian kernel of odd length `window`.
pub fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[inline]
fn reflect_clamp(i: isize, n: usize) -> usize {
    // edge replication
    i.clamp(0, n as isize - 1) as usize
}

fn gaussian_smooth(x: &ImageTensor, window: usize, sigma: f64) -> ImageTensor {
    let (c, h, w) = x.shape();
    let kernel = gaussian_kernel(window, sigma);
    let half = (window / 2) as isize;
    let mut out = ImageTensor::zeros(c, h, w);
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = x.channel(ch);
        // horizontal pass
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = reflect_clamp(xx as isize + ki as isize - half, w);
                    acc += kv * plane[y * w + sx];
                }
                tmp[y * w + xx] = acc;
            }
        }
        // vertical pass
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = reflect_clamp(y as isize + ki as isize - half, h);
                    acc += kv * tmp[sy * w + xx];
                }
                out.set(ch, y, xx, acc);
            }
        }
    }
    out
}

fn median_filter(x: &ImageTensor, window: usize) -> ImageTensor {
    let (c, h, w) = x.shape();
    let half = (window / 2) as isize;
    let mut out = ImageTensor::zeros(c, h, w);
    let mut buf = Vec::with_capacity(window * window);
    for ch in 0..c {
        let plane = x.channel(ch);
        for y in 0..h {
            for xx in 0..w {
                buf.clear();
                for dy in -half..=half {
                    let sy = reflect_clamp(y as isize + dy, h);
                    for dx in -half..=half {
                        let sx = reflect_clamp(xx as isize + dx, w);
                        buf.push(plane[sy * w + sx]);
                    }
                }
                buf.sort_unstable_by(f64::total_cmp);
                out.set(ch, y, xx, buf[buf.len() / 2]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> ImageTensor {
        let mut rng = SeededStream::new(seed, 0).rng();
        let data = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        ImageTensor::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn gaussian_sigma_zero_is_identity() {
        let x = random_image(1, 1, 8, 8);
        let y = perturb(&x, &NoiseModel::gaussian(0.0), SeededStream::new(9, 0));
        assert_eq!(x, y);
    }

    #[test]
    fn perturb_is_deterministic_and_does_not_alias() {
        let x = random_image(2, 1, 8, 8);
        let m = NoiseModel::salt_and_pepper(0.2);
        let a = perturb(&x, &m, SeededStream::new(5, 3));
        let b = perturb(&x, &m, SeededStream::new(5, 3));
        let c = perturb(&x, &m, SeededStream::new(5, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        // input untouched, output in range
        assert!(x.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn salt_pepper_corruption_rate() {
        // 10_000-pixel mid-gray image, sigma 0.1: fraction of changed pixels
        // lands in [0.08, 0.12] for every seed (99% binomial interval is
        // much tighter than that at this sample size).
        let x = ImageTensor::constant(1, 100, 100, 0.5);
        let m = NoiseModel::salt_and_pepper(0.1);
        for seed in 0..100u64 {
            let y = perturb(&x, &m, SeededStream::new(1234, seed));
            let changed = x
                .as_slice()
                .iter()
                .zip(y.as_slice())
                .filter(|(a, b)| a != b)
                .count();
            let frac = changed as f64 / x.len() as f64;
            assert!((0.08..=0.12).contains(&frac), "seed {seed}: frac {frac}");
        }
    }

    #[test]
    fn gaussian_moments_on_midgray() {
        // 10^5 draws of sigma=0.1 noise on 0.5: mean within 0.5 +- 0.01,
        // std in [0.08, 0.11] (clipping shrinks the raw std slightly).
        let x = ImageTensor::constant(1, 100, 100, 0.5);
        let m = NoiseModel::gaussian(0.1);
        let mut values = Vec::with_capacity(100_000);
        for seed in 0..10u64 {
            let y = perturb(&x, &m, SeededStream::new(77, seed));
            values.extend_from_slice(y.as_slice());
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        let std = var.sqrt();
        assert!((0.08..=0.11).contains(&std), "std {std}");
    }

    #[test]
    fn poisson_preserves_mean_roughly() {
        let x = ImageTensor::constant(1, 100, 100, 0.5);
        let m = NoiseModel::poisson();
        let y = perturb(&x, &m, SeededStream::new(3, 0));
        let mean = y.as_slice().iter().sum::<f64>() / y.len() as f64;
        // Poisson(127.5)/255 has mean 0.5, std ~0.044/sqrt(10000) per-pixel avg
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!(y.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn denoisers_preserve_constant_images() {
        let x = ImageTensor::constant(2, 9, 9, 0.37);
        for d in [
            Denoiser::none(),
            Denoiser::gaussian_smoothing(3, 1.0),
            Denoiser::gaussian_smoothing(5, 2.0),
            Denoiser::median_filter(3),
            Denoiser::median_filter(5),
        ] {
            let y = denoise(&x, &d);
            for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
                assert!((a - b).abs() < 1e-12, "{d:?}");
            }
        }
    }

    #[test]
    fn median_removes_isolated_impulse() {
        // 5x5 zeros with center 1.0 -> all zero after a 3x3 median.
        let mut x = ImageTensor::zeros(1, 5, 5);
        x.set(0, 2, 2, 1.0);
        let y = denoise(&x, &Denoiser::median_filter(3));
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        // exact sort-based oracle on every 3x3 window
        let oracle = median_oracle(&x, 3);
        assert_eq!(y, oracle);
    }

    /// Independent brute-force median: gathers each replicated window into a
    /// Vec, sorts, and indexes the middle element.
    fn median_oracle(x: &ImageTensor, window: usize) -> ImageTensor {
        let (c, h, w) = x.shape();
        let half = window as isize / 2;
        let mut out = ImageTensor::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut vals = Vec::new();
                    for dy in -half..=half {
                        for dx in -half..=half {
                            let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                            vals.push(x.get(ch, sy, sx));
                        }
                    }
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    out.set(ch, y, xx, vals[vals.len() / 2]);
                }
            }
        }
        out
    }

    #[test]
    fn median_matches_oracle_on_random_images() {
        for seed in 0..5 {
            let x = random_image(100 + seed, 2, 11, 7);
            for window in [3, 5] {
                let y = denoise(&x, &Denoiser::median_filter(window));
                assert_eq!(y, median_oracle(&x, window), "seed {seed} window {window}");
            }
        }
    }

    /// Direct 2-D convolution with the product kernel and edge replication.
    fn gaussian_oracle(x: &ImageTensor, window: usize, sigma: f64) -> ImageTensor {
        let k1 = gaussian_kernel(window, sigma);
        let (c, h, w) = x.shape();
        let half = window as isize / 2;
        let mut out = ImageTensor::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (iy, ky) in k1.iter().enumerate() {
                        for (ix, kx) in k1.iter().enumerate() {
                            let sy = (y as isize + iy as isize - half).clamp(0, h as isize - 1);
                            let sx = (xx as isize + ix as isize - half).clamp(0, w as isize - 1);
                            acc += ky * kx * x.get(ch, sy as usize, sx as usize);
                        }
                    }
                    out.set(ch, y, xx, acc);
                }
            }
        }
        out
    }

    #[test]
    fn gaussian_kernel_sums_to_one() {
        for (w, s) in [(3, 1.0), (5, 0.8), (7, 2.5)] {
            let k = gaussian_kernel(w, s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_smoothing_matches_2d_oracle() {
        for seed in 0..3 {
            let x = random_image(200 + seed, 1, 10, 13);
            for (w, s) in [(3, 1.0), (5, 1.5)] {
                let fast = denoise(&x, &Denoiser::gaussian_smoothing(w, s));
                let slow = gaussian_oracle(&x, w, s);
                for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn median_outputs_are_order_statistics() {
        let x = random_image(42, 1, 9, 9);
        let y = denoise(&x, &Denoiser::median_filter(3));
        let (_, h, w) = x.shape();
        for yy in 0..h {
            for xx in 0..w {
                let out = y.get(0, yy, xx);
                let mut found = false;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let sy = (yy as isize + dy).clamp(0, h as isize - 1) as usize;
                        let sx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                        if x.get(0, sy, sx) == out {
                            found = true;
                        }
                    }
                }
                assert!(found, "output at ({yy},{xx}) not in its window");
            }
        }
    }

    #[test]
    fn filters_are_translation_equivariant_in_the_interior() {
        let x = random_image(7, 1, 12, 12);
        // shift the whole image down by one row (replicating the top row)
        let (_, h, w) = x.shape();
        let mut shifted = x.clone();
        for y in (1..h).rev() {
            for xx in 0..w {
                let v = x.get(0, y - 1, xx);
                shifted.set(0, y, xx, v);
            }
        }
        for d in [Denoiser::median_filter(3), Denoiser::gaussian_smoothing(3, 1.0)] {
            let fx = denoise(&x, &d);
            let fs = denoise(&shifted, &d);
            for y in 2..h - 2 {
                for xx in 2..w - 2 {
                    let a = fx.get(0, y - 1, xx);
                    let b = fs.get(0, y, xx);
                    assert!((a - b).abs() < 1e-12, "{d:?} at ({y},{xx})");
                }
            }
        }
    }

    #[test]
    fn median_cleans_salt_pepper_on_smooth_image() {
        // Smooth ramp image; after s.p. sigma=0.1 + MF window 3, at least
        // 95% of pixels end up within 0.5 of the original.
        let h = 40;
        let w = 40;
        let data: Vec<f64> = (0..h * w)
            .map(|i| {
                let y = i / w;
                let x = i % w;
                0.3 + 0.4 * (x + y) as f64 / (h + w) as f64
            })
            .collect();
        let x = ImageTensor::from_vec(1, h, w, data).unwrap();
        let m = NoiseModel::salt_and_pepper(0.1);
        let d = Denoiser::median_filter(3);
        let mut ok = 0usize;
        let mut total = 0usize;
        for seed in 0..20u64 {
            let y = denoise(&perturb(&x, &m, SeededStream::new(900, seed)), &d);
            for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
                if (a - b).abs() < 0.5 {
                    ok += 1;
                }
                total += 1;
            }
        }
        let frac = ok as f64 / total as f64;
        assert!(frac >= 0.95, "clean fraction {frac}");
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(NoiseModel::salt_and_pepper(1.5).validate().is_err());
        assert!(NoiseModel::gaussian(-0.1).validate().is_err());
        assert!(Denoiser::median_filter(4).validate().is_err());
        assert!(Denoiser::gaussian_smoothing(3, 0.0).validate().is_err());
        assert!(Denoiser::none().validate().is_ok());
    }
}
