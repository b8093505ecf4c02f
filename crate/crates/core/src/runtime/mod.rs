//! Training, checkpoints, whole-image inference, evaluation, ablations and
//! feature dumps.

mod ablation;
mod checkpoint;
mod features;
mod infer;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, ImageBuffer};
use crate::metrics::MetricError;
use crate::nn::{ModelConfig, NnError};
use crate::optim::{AdamConfig, LrSchedule, OptimError};
use crate::tensor::TensorError;

pub use ablation::{ablation_variants, run_ablation, AblationRow, AblationTable, Variant};
pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use features::{dump_features, tiles_in, FeatureStage};
pub use infer::{denoise_image, denoise_tensor, evaluate, evaluate_pairs, pad_to_square, EvalReport, PSNR_CONVENTION};
pub use train::{train, train_with_log, LogLine, TrainOutcome};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("non-finite training loss at epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss { epoch: usize, iteration: usize },
    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported format version {0}")]
    Version(u32),
    #[error("checkpoint: truncated ({0})")]
    Truncated(String),
    #[error("checkpoint: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown feature stage `{0}` (expected head0..head{1} or mpa_out)")]
    UnknownStage(String, usize),
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RuntimeError + '_ {
    move |source| RuntimeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where training or evaluation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural images from [`data::gen_synthetic`] (or its color variant).
    Synthetic { count: usize, size: usize, seed: u64 },
    /// A directory of clean PGM/PPM images; noise is synthesized.
    Folder { path: PathBuf },
    /// `<path>/clean` and `<path>/noisy` with matching basenames.
    Paired { path: PathBuf },
}

/// Images resolved from a [`DataSource`].
#[derive(Clone, Debug)]
pub enum Corpus {
    Clean(Vec<data::NamedImage>),
    Paired(Vec<data::NamedPair>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Clean(v) => v.len(),
            Corpus::Paired(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn channels(&self) -> impl Iterator<Item = usize> + '_ {
        let clean: Box<dyn Iterator<Item = &ImageBuffer>> = match self {
            Corpus::Clean(v) => Box::new(v.iter().map(|(_, m)| m)),
            Corpus::Paired(v) => Box::new(v.iter().map(|(_, m, _)| m)),
        };
        clean.map(ImageBuffer::channels)
    }
}

impl DataSource {
    pub fn load(&self, channels: usize) -> Result<Corpus> {
        let corpus = match self {
            DataSource::Synthetic { count, size, seed } => {
                if *size < 16 || *count == 0 {
                    return Err(RuntimeError::Config(format!(
                        "synthetic data needs count >= 1 and size >= 16, got {count} x {size}"
                    )));
                }
                let imgs = if channels == 3 {
                    data::gen_synthetic_color(*count, *size, *seed)
                } else {
                    data::gen_synthetic(*count, *size, *seed)
                };
                Corpus::Clean(imgs.into_iter().enumerate().map(|(i, m)| (format!("synthetic{i:03}"), m)).collect())
            }
            DataSource::Folder { path } => Corpus::Clean(data::load_folder(path)?),
            DataSource::Paired { path } => Corpus::Paired(data::load_paired(path)?),
        };
        if let Some(c) = corpus.channels().find(|&c| c != channels) {
            return Err(RuntimeError::Config(format!(
                "model expects {channels}-channel images but the data has {c} channels"
            )));
        }
        Ok(corpus)
    }
}

/// A complete training (and optional evaluation) run, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// AWGN level on the 0–255 scale; ignored for paired data.
    pub sigma: f64,
    pub patch_size: usize,
    /// Grid stride for the patch pool.
    pub patch_stride: usize,
    pub patches_per_epoch: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub data: DataSource,
    /// Held-out images for evaluation after training (ablations use it).
    pub eval_data: Option<DataSource>,
    /// Fraction of the patch pool kept for best-checkpoint selection.
    pub validation_fraction: f64,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sigma: 25.0,
            patch_size: 80,
            patch_stride: 40,
            patches_per_epoch: 128 * 100,
            batch_size: 128,
            epochs: 50,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            data: DataSource::Folder {
                path: PathBuf::from("data/train"),
            },
            eval_data: None,
            validation_fraction: 0.1,
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Laptop-scale preset: width 8, three heads, 32×32 patches, batch 8,
    /// σ = 25, a 16-image synthetic corpus and 200 iterations.
    pub fn desk(seed: u64) -> Self {
        Self {
            model: ModelConfig::desk(8, 1, seed),
            sigma: 25.0,
            patch_size: 32,
            patch_stride: 16,
            patches_per_epoch: 160,
            batch_size: 8,
            epochs: 10,
            schedule: LrSchedule {
                initial: 1e-3,
                factor: 0.5,
                interval: 1000,
            },
            adam: AdamConfig::default(),
            data: DataSource::Synthetic {
                count: 16,
                size: 64,
                seed,
            },
            eval_data: Some(DataSource::Synthetic {
                count: 4,
                size: 64,
                seed: seed ^ 0xE7A1,
            }),
            validation_fraction: 0.1,
            seed,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| RuntimeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            RuntimeError::Config(m) => RuntimeError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        let fail = |m: String| Err(RuntimeError::Config(m));
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if self.patch_size < 4 {
            return fail(format!("patch_size must be at least 4, got {}", self.patch_size));
        }
        if self.patch_stride == 0 {
            return fail("patch_stride must be at least 1".into());
        }
        if self.batch_size == 0 || self.patches_per_epoch == 0 {
            return fail("batch_size and patches_per_epoch must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return fail(format!("validation_fraction must be in [0, 0.5), got {}", self.validation_fraction));
        }
        let b_ok = |b: f64| (0.0..1.0).contains(&b);
        if !b_ok(self.adam.beta1) || !b_ok(self.adam.beta2) || self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            return fail(format!("invalid Adam settings {:?}", self.adam));
        }
        Ok(())
    }

    /// Iterations per epoch: the epoch's patches in batches, last one short.
    pub fn iterations_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch_size)
    }
}
