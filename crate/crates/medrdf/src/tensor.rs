//! Dense image tensors and deterministic seeded random streams.
//!
//! [`ImageTensor`] is the universal sample representation: a `C x H x W`
//! array of real pixel intensities with nominal range `[0, 1]`, stored
//! row-major. Values are immutable after construction wherever they cross
//! module boundaries, so tensors are safe to share across threads.
//!
//! [`SeededStream`] is the determinism contract for everything stochastic
//! in this crate: a counter-based generator keyed by `(master_seed,
//! substream)`. Two streams with equal keys yield bitwise-identical
//! sequences; distinct substreams are statistically independent, so
//! parallel work can claim one substream per item and stay reproducible
//! regardless of scheduling.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A `channels x height x width` image with `f64` pixel intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "tensor dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match shape {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor::constant(channels, height, width, 0.0)
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0);
        ImageTensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// One channel as a contiguous `height * width` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Elementwise map into a new tensor of the same shape.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ImageTensor {
        ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equal-shape tensors.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<ImageTensor> {
        check_same_shape(self, other)?;
        Ok(ImageTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            got: b.shape(),
        });
    }
    Ok(())
}

/// Clamps every element into `[0, 1]`. Elements already in range are
/// returned bit-for-bit unchanged, so the operation is idempotent.
pub fn clamp01(x: &ImageTensor) -> ImageTensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Maximum absolute elementwise difference between two equal-shape tensors.
pub fn linf_distance(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&p, &q)| (p - q).abs())
        .fold(0.0, f64::max))
}

/// Key for one reproducible random sequence.
///
/// The generator is ChaCha8 seeded by `master_seed` with the stream counter
/// set to `substream`, so sequences for distinct substreams never overlap
/// and creation order is irrelevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeededStream {
    pub master_seed: u64,
    pub substream: u64,
}

impl SeededStream {
    pub fn new(master_seed: u64, substream: u64) -> Self {
        SeededStream {
            master_seed,
            substream,
        }
    }

    /// Instantiates the generator for this key. Calling twice yields two
    /// generators that produce identical output.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.substream);
        rng
    }

    /// Derives a fresh 64-bit seed from this key, for components that take
    /// a plain seed (e.g. per-image attack seeds inside the harness).
    pub fn derive_seed(&self) -> u64 {
        // splitmix64 over the combined key
        let mut z = self
            .master_seed
            .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(self.substream.wrapping_add(1)));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
}
