//! Browser bindings: make a noisy sample, train a small model on synthetic
//! patches for a few steps, denoise, and look at intermediate feature maps.

use wasm_bindgen::prelude::*;

use mhcnn::data::{add_awgn, batch_iter, extract_patches, from_float, gen_synthetic, to_float, ImageBuffer, NoiseSpec};
use mhcnn::metrics::psnr;
use mhcnn::nn::{Mhcnn, Mode, ModelConfig};
use mhcnn::optim::{adam_step, l2_loss_var, AdamConfig, AdamState};
use mhcnn::rng::derive_seed;
use mhcnn::runtime::{denoise_tensor, dump_features, FeatureStage};
use mhcnn::tensor::{Tape, Tensor};

const SIZE: usize = 64;
const WIDTH: usize = 4;
const PATCH: usize = 32;
const BATCH: usize = 4;
const LR: f64 = 1e-3;
const CORPUS: usize = 8;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &ImageBuffer) -> Vec<u8> {
    let c = img.channels();
    img.pixels()
        .chunks(c)
        .flat_map(|p| if c == 1 { [p[0], p[0], p[0], 255] } else { [p[0], p[1], p[2], 255] })
        .collect()
}

/// An image rendered for a canvas: RGBA bytes plus dimensions.
#[wasm_bindgen]
pub struct Picture {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Picture {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

impl From<&ImageBuffer> for Picture {
    fn from(img: &ImageBuffer) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            rgba: rgba(img),
        }
    }
}

/// Demo state: one held-out test image, a training corpus and a width-4 model.
#[wasm_bindgen]
pub struct Demo {
    seed: u64,
    sigma: f64,
    clean: Tensor<f32>,
    noisy: Tensor<f32>,
    corpus: Vec<ImageBuffer>,
    model: Mhcnn<f32>,
    adam: AdamState<f32>,
    steps: usize,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, sigma: f64) -> Result<Demo, JsError> {
        let seed = seed as u64;
        let clean = to_float(&gen_synthetic(1, SIZE, derive_seed(seed, 1))[0]);
        let noise = NoiseSpec::new(sigma, derive_seed(seed, 2)).map_err(js)?;
        let noisy = add_awgn(&clean, &noise);
        let model = Mhcnn::new(&ModelConfig::desk(WIDTH, 1, seed)).map_err(js)?;
        Ok(Demo {
            seed,
            sigma,
            clean,
            noisy,
            corpus: gen_synthetic(CORPUS, SIZE, derive_seed(seed, 3)),
            model,
            adam: AdamState::new(LR, AdamConfig::default()).map_err(js)?,
            steps: 0,
        })
    }

    /// Redraws the noise on the test image at a new level.
    pub fn renoise(&mut self, sigma: f64) -> Result<(), JsError> {
        let noise = NoiseSpec::new(sigma, derive_seed(self.seed, 2)).map_err(js)?;
        self.sigma = sigma;
        self.noisy = add_awgn(&self.clean, &noise);
        Ok(())
    }

    pub fn clean(&self) -> Result<Picture, JsError> {
        Ok((&from_float(&self.clean).map_err(js)?).into())
    }

    pub fn noisy(&self) -> Result<Picture, JsError> {
        Ok((&from_float(&self.noisy).map_err(js)?).into())
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[wasm_bindgen(getter)]
    pub fn parameters(&self) -> usize {
        self.model.param_count()
    }

    /// Runs `count` Adam steps on fresh noisy patches; returns the mean loss.
    pub fn train(&mut self, count: usize) -> Result<f64, JsError> {
        let mut total = 0.0;
        for _ in 0..count {
            let step_seed = derive_seed(self.seed ^ 0x7A11, self.steps as u64);
            let noise = NoiseSpec::new(self.sigma, step_seed).map_err(js)?;
            let patches = extract_patches(&self.corpus, PATCH, 8, Some(BATCH), &noise, step_seed)
                .and_then(|p| p.augmented(step_seed))
                .map_err(js)?;
            let (clean, noisy) = batch_iter(&patches, BATCH, step_seed)
                .map_err(js)?
                .next()
                .ok_or_else(|| js("empty batch"))?;
            let mut tape = Tape::new();
            let x = tape.constant(noisy);
            let target = tape.constant(clean);
            let y = self.model.forward(&mut tape, x, Mode::Train).map_err(js)?;
            let loss = l2_loss_var(&mut tape, y, target).map_err(js)?;
            let grads = tape.backward(loss).map_err(js)?;
            self.model.update_running_stats(&tape).map_err(js)?;
            adam_step(&mut self.adam, &mut self.model.store.params, &grads).map_err(js)?;
            total += tape.value(loss).item().map_err(js)? as f64;
            self.steps += 1;
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    pub fn denoised(&self) -> Result<Picture, JsError> {
        let out = denoise_tensor(&self.model, &self.noisy).map_err(js)?;
        Ok((&from_float(&out).map_err(js)?).into())
    }

    pub fn noisy_psnr(&self) -> Result<f64, JsError> {
        psnr(&self.clean, &self.noisy).map_err(js)
    }

    pub fn denoised_psnr(&self) -> Result<f64, JsError> {
        let out = denoise_tensor(&self.model, &self.noisy).map_err(js)?;
        psnr(&self.clean, &out).map_err(js)
    }

    /// Tiled channels of `head0`, `head1`, `head2` or `mpa_out` for the noisy image.
    pub fn features(&self, stage: &str) -> Result<Picture, JsError> {
        let stage: FeatureStage = stage.parse().map_err(js)?;
        let input = from_float(&self.noisy).map_err(js)?;
        Ok((&dump_features(&self.model, &input, stage).map_err(js)?).into())
    }
}
