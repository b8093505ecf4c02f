//! PSNR and single-scale SSIM on `[0, 1]` image tensors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Reported instead of infinity when two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("expected an image tensor (c, h, w) or (1, c, h, w), got {0:?}")]
    NotImage(Vec<usize>),
    #[error("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("no images to report on")]
    Empty,
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn image_dims(t: &Tensor<f32>) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok([c, h, w]),
        [h, w] => Ok([1, h, w]),
        _ => Err(MetricError::NotImage(t.shape().to_vec())),
    }
}

fn check_pair(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<[usize; 3]> {
    let (da, db) = (image_dims(a)?, image_dims(b)?);
    if da != db {
        return Err(MetricError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(da)
}

fn clamp01(v: f32) -> f64 {
    (v as f64).clamp(0.0, 1.0)
}

/// `10·log10(1 / MSE)` with both images clamped to `[0, 1]` and the MSE taken
/// jointly over every channel. Capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<f64> {
    psnr_with(reference, test, clamp01)
}

/// Same as [`psnr`] on raw values, for signals that leave `[0, 1]` (noisy
/// images before quantization).
pub fn psnr_unclamped(reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<f64> {
    psnr_with(reference, test, |v| v as f64)
}

fn psnr_with(reference: &Tensor<f32>, test: &Tensor<f32>, f: impl Fn(f32) -> f64) -> Result<f64> {
    check_pair(reference, test)?;
    let n = reference.len() as f64;
    let sse: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| {
            let d = f(a) - f(b);
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (n / sse).log10()).min(PSNR_CAP_DB))
}

/// Channel-mean grayscale plane, clamped to `[0, 1]`.
fn gray(t: &Tensor<f32>, [c, h, w]: [usize; 3]) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0f64; plane];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(&t.data()[ch * plane..(ch + 1) * plane]) {
            *o += clamp01(v);
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f64);
    out
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0f64; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions: `(h−10) × (w−10)` outputs.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0f64; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = k.iter().enumerate().map(|(j, kv)| kv * x[y * w + x0 + j]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM over every valid 11×11 Gaussian-weighted window (σ = 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1). Color images are compared on
/// their channel mean.
pub fn ssim(reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<f64> {
    let dims = check_pair(reference, test)?;
    let [_, h, w] = dims;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::TooSmall(h, w));
    }
    let (x, y) = (gray(reference, dims), gray(test, dims));
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let mxx = filter_valid(&prod(&x, &x), h, w, &k);
    let myy = filter_valid(&prod(&y, &y), h, w, &k);
    let mxy = filter_valid(&prod(&x, &y), h, w, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image rows plus their arithmetic means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_rows(images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(MetricError::Empty);
        }
        let n = images.len() as f64;
        let mean_psnr_db = images.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|r| r.ssim).sum::<f64>() / n;
        Ok(Self {
            images,
            mean_psnr_db,
            mean_ssim,
        })
    }

    /// Scores `test` against `reference` for one named image.
    pub fn measure(name: &str, reference: &Tensor<f32>, test: &Tensor<f32>) -> Result<ImageMetrics> {
        Ok(ImageMetrics {
            name: name.to_string(),
            psnr_db: psnr(reference, test)?,
            ssim: ssim(reference, test)?,
        })
    }
}
