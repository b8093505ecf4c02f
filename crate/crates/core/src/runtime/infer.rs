use serde::{Deserialize, Serialize};

use super::{Corpus, Result, RuntimeError};
use crate::data::{add_awgn, from_float, to_float, ImageBuffer, NoiseSpec};
use crate::metrics::{ImageMetrics, MetricReport};
use crate::nn::{Mhcnn, Mode};
use crate::rng::derive_seed;
use crate::tensor::{Tape, Tensor};

/// How reported PSNR/SSIM values are measured.
pub const PSNR_CONVENTION: &str =
    "PSNR/SSIM on the model's float output clamped to [0,1], before 8-bit quantization; PSNR uses joint MSE over all channels";

/// Mirror index for reflect padding (edge sample not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflect-pads a `(c, h, w)` tensor to the smallest square whose side is a
/// multiple of 4 and at least `max(h, w)`. The original sits at the top-left.
pub fn pad_to_square(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [c, h, w] = image_dims(t)?;
    let side = h.max(w).div_ceil(4) * 4;
    if side == h && side == w {
        return Ok(t.clone());
    }
    let mut data = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..side {
            let sy = reflect(y as isize, h);
            for x in 0..side {
                data.push(plane[sy * w + reflect(x as isize, w)]);
            }
        }
    }
    Ok(Tensor::new(&[c, side, side], data)?)
}

fn image_dims(t: &Tensor<f32>) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(RuntimeError::Config(format!("expected a (c, h, w) image tensor, got {:?}", t.shape()))),
    }
}

fn crop_top_left(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (c, side) = (t.shape()[1], t.shape()[3]);
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let start = (ch * side + y) * side;
            data.extend_from_slice(&t.data()[start..start + w]);
        }
    }
    Tensor::new(&[c, h, w], data).expect("crop shape")
}

/// Runs the model in eval mode on one `(c, h, w)` image of any size and
/// returns the output clamped to `[0, 1]`, same shape as the input.
pub fn denoise_tensor(model: &Mhcnn<f32>, noisy: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [c, h, w] = image_dims(noisy)?;
    if c != model.config().in_channels {
        return Err(RuntimeError::Config(format!(
            "model expects {}-channel images, got {c}",
            model.config().in_channels
        )));
    }
    let padded = pad_to_square(noisy)?;
    let side = padded.shape()[1];
    let mut tape = Tape::new();
    let x = tape.constant(padded.reshape(&[1, c, side, side])?);
    let y = model.forward(&mut tape, x, Mode::Eval)?;
    Ok(crop_top_left(tape.value(y), h, w).map(|v| v.clamp(0.0, 1.0)))
}

/// Denoises an 8-bit image: pad, forward, crop, clamp and quantize.
pub fn denoise_image(model: &Mhcnn<f32>, image: &ImageBuffer) -> Result<ImageBuffer> {
    let out = denoise_tensor(model, &to_float(image))?;
    Ok(from_float(&out)?)
}

/// Scores for the noisy inputs and for the model's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub convention: String,
    /// `None` for paired (real-noise) data.
    pub sigma: Option<f64>,
    pub noisy: MetricReport,
    pub denoised: MetricReport,
}

impl EvalReport {
    pub fn gain_db(&self) -> f64 {
        self.denoised.mean_psnr_db - self.noisy.mean_psnr_db
    }

    fn build(sigma: Option<f64>, rows: Vec<(ImageMetrics, ImageMetrics)>) -> Result<Self> {
        let (noisy, denoised) = rows.into_iter().unzip();
        Ok(Self {
            convention: PSNR_CONVENTION.to_string(),
            sigma,
            noisy: MetricReport::from_rows(noisy)?,
            denoised: MetricReport::from_rows(denoised)?,
        })
    }
}

/// Adds AWGN at `sigma` to each clean image (image `i` uses
/// `derive_seed(seed, i)`), denoises it and scores both against the clean image.
pub fn evaluate(model: &Mhcnn<f32>, images: &[crate::data::NamedImage], sigma: f64, seed: u64) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(RuntimeError::Config("evaluation dataset is empty".into()));
    }
    let noise = NoiseSpec::new(sigma, seed)?;
    let rows = images
        .iter()
        .enumerate()
        .map(|(i, (name, img))| {
            let clean = to_float(img);
            let noisy = add_awgn(&clean, &noise.with_seed(derive_seed(seed, i as u64)));
            score(model, name, &clean, &noisy)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::build(Some(sigma), rows)
}

/// Scores the model on clean/noisy image pairs.
pub fn evaluate_pairs(model: &Mhcnn<f32>, pairs: &[crate::data::NamedPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(RuntimeError::Config("evaluation dataset is empty".into()));
    }
    let rows = pairs
        .iter()
        .map(|(name, c, n)| score(model, name, &to_float(c), &to_float(n)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::build(None, rows)
}

impl super::Corpus {
    /// [`evaluate`] or [`evaluate_pairs`] depending on the corpus kind.
    pub fn evaluate(&self, model: &Mhcnn<f32>, sigma: f64, seed: u64) -> Result<EvalReport> {
        match self {
            Corpus::Clean(images) => evaluate(model, images, sigma, seed),
            Corpus::Paired(pairs) => evaluate_pairs(model, pairs),
        }
    }
}

fn score(model: &Mhcnn<f32>, name: &str, clean: &Tensor<f32>, noisy: &Tensor<f32>) -> Result<(ImageMetrics, ImageMetrics)> {
    let denoised = denoise_tensor(model, noisy)?;
    Ok((
        MetricReport::measure(name, clean, noisy)?,
        MetricReport::measure(name, clean, &denoised)?,
    ))
}
