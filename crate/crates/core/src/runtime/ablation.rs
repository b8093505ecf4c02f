use serde::{Deserialize, Serialize};

use super::{train, Result, RunConfig, RuntimeError};
use crate::nn::ModelConfig;
use crate::rng::derive_seed;

/// One row of the head/angle/MPA ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: &'static str,
    pub angles: Vec<u8>,
    pub use_mpa: bool,
}

/// The seven variants, in table order.
pub fn ablation_variants() -> Vec<Variant> {
    let v = |label, angles: &[u8], use_mpa| Variant {
        label,
        angles: angles.to_vec(),
        use_mpa,
    };
    vec![
        v("MHCNN", &[0, 1, 2], true),
        v("MHCNN with 2 heads", &[0, 1], true),
        v("MHCNN with 1 head", &[0], true),
        v("MHCNN (0°, 0°, 0°)", &[0, 0, 0], true),
        v("MHCNN (0°, 90°, 270°)", &[0, 1, 3], true),
        v("MHCNN (0°, 180°, 270°)", &[0, 2, 3], true),
        v("MHCNN without MPA", &[0, 1, 2], false),
    ]
}

impl Variant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            heads: self.angles.len(),
            angles: self.angles.clone(),
            use_mpa: self.use_mpa,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub heads: usize,
    pub angles_deg: Vec<u32>,
    pub use_mpa: bool,
    pub params: usize,
    pub final_train_loss: Option<f64>,
    pub noisy_psnr_db: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// CRC32 of the training batches; identical across rows.
    pub data_digest: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sigma: f64,
    pub seed: u64,
    pub iterations: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Fixed-width text table, one line per variant.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<26} {:>5} {:>9} {:>12} {:>10} {:>8}\n",
            "variant", "heads", "params", "train loss", "PSNR (dB)", "SSIM"
        );
        for r in &self.rows {
            let loss = r.final_train_loss.map_or("-".to_string(), |l| format!("{l:.5}"));
            s.push_str(&format!(
                "{:<26} {:>5} {:>9} {:>12} {:>10.3} {:>8.4}\n",
                r.label, r.heads, r.params, loss, r.psnr_db, r.ssim
            ));
        }
        s
    }

    /// True when every variant consumed the same training batches.
    pub fn shared_data(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].data_digest == w[1].data_digest)
    }
}

/// Trains and evaluates every variant of [`ablation_variants`] with the
/// base config's seed, data and budget. Only the head count, angles and MPA
/// switch change between rows. Variant checkpoints go to numbered
/// subdirectories of the base `output_dir` when one is set.
pub fn run_ablation(base: &RunConfig) -> Result<AblationTable> {
    base.validate()?;
    let eval_source = base
        .eval_data
        .as_ref()
        .ok_or_else(|| RuntimeError::Config("ablation needs `eval_data` for held-out scoring".into()))?;
    let eval = eval_source.load(base.model.in_channels)?;
    let eval_seed = derive_seed(base.seed, 0xAB1A);
    let mut rows = Vec::new();
    for (i, v) in ablation_variants().iter().enumerate() {
        let cfg = RunConfig {
            model: v.apply(&base.model),
            output_dir: base.output_dir.as_ref().map(|d| d.join(format!("variant{i}"))),
            ..base.clone()
        };
        let outcome = train(&cfg)?;
        let report = eval.evaluate(&outcome.model, base.sigma, eval_seed)?;
        rows.push(AblationRow {
            label: v.label.to_string(),
            heads: cfg.model.heads,
            angles_deg: cfg.model.angles.iter().map(|&a| a as u32 * 90).collect(),
            use_mpa: v.use_mpa,
            params: outcome.model.param_count(),
            final_train_loss: outcome.log.last().map(|l| l.loss),
            noisy_psnr_db: report.noisy.mean_psnr_db,
            psnr_db: report.denoised.mean_psnr_db,
            ssim: report.denoised.mean_ssim,
            data_digest: outcome.data_digest,
        });
    }
    Ok(AblationTable {
        sigma: base.sigma,
        seed: base.seed,
        iterations: base.iterations_per_epoch() * base.epochs,
        rows,
    })
}
