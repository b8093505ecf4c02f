//! Images, noise synthesis and training-patch pipelines.

mod folders;
mod patches;
mod pnm;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};

pub use folders::{load_folder, load_paired, read_pnm_file, write_pnm_file, NamedImage, NamedPair};
pub use patches::{augment, augment_turns, batch_iter, extract_paired_patches, extract_patches, grid_positions, Batches, PatchSet};
pub use pnm::{read_pnm, write_pnm};
pub use synth::{gen_synthetic, gen_synthetic_color};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not a binary PGM/PPM file (magic {0:?})")]
    BadMagic(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    MaxVal(u32),
    #[error("malformed PNM header: {0}")]
    Header(String),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// An 8-bit image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(DataError::Invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(DataError::Invalid(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width * channels {
            return Err(DataError::Invalid(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Planar `(channels, h, w)` tensor with samples scaled to `[0, 1]`.
pub fn to_float(img: &ImageBuffer) -> Tensor<f32> {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut data = vec![0f32; h * w * c];
    for (i, px) in img.pixels.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + i] = v as f32 / 255.0;
        }
    }
    Tensor::new(&[c, h, w], data).expect("shape matches buffer")
}

/// Inverse of [`to_float`]: clamps to `[0, 1]`, scales by 255 and rounds half-up.
/// Accepts `(c, h, w)` or a single-sample `(1, c, h, w)` tensor.
pub fn from_float(t: &Tensor<f32>) -> Result<ImageBuffer> {
    let dims = match t.shape() {
        [c, h, w] | [1, c, h, w] => [*c, *h, *w],
        s => return Err(DataError::Invalid(format!("expected (c, h, w) image tensor, got {s:?}"))),
    };
    let [c, h, w] = dims;
    let mut pixels = vec![0u8; c * h * w];
    for (ch, plane) in t.data().chunks_exact(h * w).enumerate() {
        for (i, &v) in plane.iter().enumerate() {
            pixels[i * c + ch] = quantize(v);
        }
    }
    ImageBuffer::new(h, w, c, pixels)
}

fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { (v as f64).clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Additive white Gaussian noise; `sigma` is on the 0–255 scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(DataError::Invalid(format!("noise sigma must be a finite value >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// `clean + g` with `g ~ N(0, (sigma/255)^2)` per element. The result is not clamped.
pub fn add_awgn(clean: &Tensor<f32>, spec: &NoiseSpec) -> Tensor<f32> {
    if spec.sigma == 0.0 {
        return clean.clone();
    }
    let std = spec.sigma / 255.0;
    let mut rng = SplitMix64::new(spec.seed);
    let mut noisy = clean.clone();
    for v in noisy.data_mut() {
        *v = (*v as f64 + std * rng.gaussian()) as f32;
    }
    noisy
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_conversion_endpoints_and_rounding() {
        let img = ImageBuffer::new(1, 3, 1, vec![0, 128, 255]).unwrap();
        let t = to_float(&img);
        assert_eq!(t.data()[2], 1.0);
        assert_eq!(from_float(&t).unwrap(), img);

        let t = Tensor::new(&[1, 1, 4], vec![0.5f32, -0.2, 1.7, f32::NAN]).unwrap();
        assert_eq!(from_float(&t).unwrap().pixels(), &[128, 0, 255, 0]);
    }

    #[test]
    fn color_is_planar_in_float_form() {
        let img = ImageBuffer::new(1, 2, 3, vec![255, 0, 0, 0, 0, 255]).unwrap();
        let t = to_float(&img);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(from_float(&t).unwrap(), img);
    }

    #[test]
    fn quantization_is_idempotent() {
        let t = Tensor::<f32>::gaussian(&[3, 5, 7], 0.5, 0.4, 3).unwrap();
        let once = to_float(&from_float(&t).unwrap());
        let twice = to_float(&from_float(&once).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn image_buffer_validation() {
        assert!(ImageBuffer::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(ImageBuffer::new(2, 2, 1, vec![0; 3]).is_err());
        assert!(ImageBuffer::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn zero_sigma_is_exact_and_negative_rejected() {
        let clean = Tensor::<f32>::gaussian(&[1, 8, 8], 0.5, 0.2, 1).unwrap();
        assert_eq!(add_awgn(&clean, &NoiseSpec::new(0.0, 5).unwrap()), clean);
        assert!(NoiseSpec::new(-1.0, 0).is_err());
        assert!(NoiseSpec::new(f64::NAN, 0).is_err());
    }

    #[test]
    fn awgn_is_not_clamped() {
        let clean = Tensor::<f32>::full(&[1, 16, 16], 1.0).unwrap();
        let noisy = add_awgn(&clean, &NoiseSpec::new(50.0, 2).unwrap());
        assert!(noisy.data().iter().any(|&v| v > 1.0));
    }

    #[test]
    fn awgn_residual_statistics() {
        let n = 1_000_000;
        let clean = Tensor::<f32>::full(&[n], 0.5).unwrap();
        let noisy = add_awgn(&clean, &NoiseSpec::new(25.0, 11).unwrap());
        let r: Vec<f64> = noisy.data().iter().map(|&v| v as f64 - 0.5).collect();
        let mean = r.iter().sum::<f64>() / n as f64;
        let std = (r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        assert!(std > 0.0960 && std < 0.1001, "{std}");
        assert!(mean.abs() < 3.0 * 25.0 / 255.0 / (n as f64).sqrt(), "{mean}");
    }
}
