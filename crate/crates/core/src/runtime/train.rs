use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use super::{io_err, save_checkpoint, Corpus, Result, RunConfig, RuntimeError};
use crate::data::{self, add_awgn, augment, batch_iter, NoiseSpec, PatchSet};
use crate::nn::{Mhcnn, Mode};
use crate::optim::{adam_step, l2_loss_var, schedule_lr, AdamState};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Tape, Tensor};

// Seed streams, so each random stage is independent of the others.
const POOL: u64 = 1;
const HOLDOUT: u64 = 2;
const VAL_NOISE: u64 = 3;
const EPOCH: u64 = 4;

/// One training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    /// Wall time since training started.
    pub seconds: f64,
}

impl fmt::Display for LogLine {
    /// Tab-separated `epoch iter loss lr seconds`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{:.9e}\t{:.6e}\t{:.3}",
            self.epoch, self.iteration, self.loss, self.lr, self.seconds
        )
    }
}

impl LogLine {
    /// The line without its wall-time column; equal across repeated runs.
    pub fn deterministic_part(&self) -> String {
        format!("{}\t{}\t{:.9e}\t{:.6e}", self.epoch, self.iteration, self.loss, self.lr)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Mhcnn<f32>,
    pub log: Vec<LogLine>,
    /// Mean validation loss after each epoch.
    pub validation: Vec<f64>,
    pub best_epoch: Option<usize>,
    /// CRC32 over every training batch in delivery order.
    pub data_digest: u32,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Clean (and for paired data, fixed noisy) patch pool split into training
/// and validation parts.
struct Pools {
    train: PatchSet,
    validation: PatchSet,
    synthesize_noise: bool,
}

fn build_pools(cfg: &RunConfig, corpus: &Corpus) -> Result<Pools> {
    let pool_seed = derive_seed(cfg.seed, POOL);
    let (pool, synthesize_noise) = match corpus {
        Corpus::Clean(images) => {
            let imgs: Vec<_> = images.iter().map(|(_, m)| m.clone()).collect();
            let zero = NoiseSpec::new(0.0, 0)?;
            let set = data::extract_patches(&imgs, cfg.patch_size, cfg.patch_stride, None, &zero, pool_seed)?;
            (set, true)
        }
        Corpus::Paired(pairs) => {
            let pairs: Vec<_> = pairs.iter().map(|(_, c, n)| (c.clone(), n.clone())).collect();
            let set = data::extract_paired_patches(&pairs, cfg.patch_size, cfg.patch_stride, None, pool_seed)?;
            (set, false)
        }
    };
    let (train, mut validation) = pool.split_holdout(cfg.validation_fraction, derive_seed(cfg.seed, HOLDOUT));
    if train.is_empty() {
        return Err(RuntimeError::Config("no training patches left after the validation split".into()));
    }
    if synthesize_noise {
        let noise = NoiseSpec::new(cfg.sigma, derive_seed(cfg.seed, VAL_NOISE))?;
        let noisy = validation
            .iter()
            .enumerate()
            .map(|(i, (c, _))| add_awgn(c, &noise.with_seed(derive_seed(noise.seed, i as u64))))
            .collect();
        let clean = validation.iter().map(|(c, _)| c.clone()).collect();
        validation = PatchSet::new(cfg.patch_size, train.channels(), clean, noisy)?;
    }
    Ok(Pools {
        train,
        validation,
        synthesize_noise,
    })
}

/// The epoch's patches: the training pool cycled in seeded random order up to
/// `patches_per_epoch`, each augmented and (for AWGN data) freshly noised.
fn epoch_patches(cfg: &RunConfig, pools: &Pools, epoch: usize) -> Result<PatchSet> {
    let seed = derive_seed(cfg.seed, EPOCH ^ ((epoch as u64) << 8));
    let mut rng = SplitMix64::new(seed);
    let n = pools.train.len();
    let mut picks = Vec::with_capacity(cfg.patches_per_epoch);
    while picks.len() < cfg.patches_per_epoch {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        picks.extend(order.into_iter().take(cfg.patches_per_epoch - picks.len()));
    }
    let noise = NoiseSpec::new(cfg.sigma, rng.next_u64())?;
    let aug_seed = rng.next_u64();
    let mut clean = Vec::with_capacity(picks.len());
    let mut noisy = Vec::with_capacity(picks.len());
    for (k, &i) in picks.iter().enumerate() {
        let (c, z) = pools.train.get(i);
        let (c, z) = augment(c, z, derive_seed(aug_seed, k as u64))?;
        let z = if pools.synthesize_noise {
            add_awgn(&c, &noise.with_seed(derive_seed(noise.seed, k as u64)))
        } else {
            z
        };
        clean.push(c);
        noisy.push(z);
    }
    Ok(PatchSet::new(cfg.patch_size, pools.train.channels(), clean, noisy)?)
}

fn validation_loss(model: &Mhcnn<f32>, set: &PatchSet, batch: usize) -> Result<Option<f64>> {
    if set.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for (clean, noisy) in batch_iter(set, batch, 0)? {
        let mut tape = Tape::new();
        let x = tape.constant(noisy);
        let y = model.forward(&mut tape, x, Mode::Eval)?;
        let n = clean.shape()[0] as f64;
        total += crate::optim::l2_loss(tape.value(y), &clean)? * n;
    }
    Ok(Some(total / set.len() as f64))
}

fn digest_batch(h: &mut crc32fast::Hasher, t: &Tensor<f32>) {
    for v in t.data() {
        h.update(&v.to_le_bytes());
    }
}

/// Trains a fresh model as described by `cfg`; see [`train_with_log`].
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with_log(cfg, None)
}

/// Trains a fresh model, streaming one TSV line per iteration to `sink`.
///
/// Each epoch samples patches, augments and noises them, then runs
/// forward, l2 loss, backward and an Adam step per batch. When
/// `output_dir` is set, `train.log`, `last.mhck` (every epoch) and
/// `best.mhck` (lowest validation loss) are written there.
pub fn train_with_log(cfg: &RunConfig, mut sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = cfg.data.load(cfg.model.in_channels)?;
    let pools = build_pools(cfg, &corpus)?;
    let mut model = Mhcnn::<f32>::new(&cfg.model)?;
    let mut adam = AdamState::<f32>::new(cfg.schedule.initial, cfg.adam)?;

    let out_dir = cfg.output_dir.as_deref();
    let mut log_file = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("train.log");
        log_file = Some((std::fs::File::create(&path).map_err(io_err(&path))?, path));
        let cfg_path = dir.join("config.json");
        std::fs::write(&cfg_path, cfg.to_json()).map_err(io_err(&cfg_path))?;
    }
    let last_path = out_dir.map(|d| d.join("last.mhck"));
    let best_path = out_dir.map(|d| d.join("best.mhck"));

    let start = Instant::now();
    let mut log = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut digest = crc32fast::Hasher::new();
    let mut iteration = 0;

    for epoch in 0..cfg.epochs {
        adam.lr = schedule_lr(&cfg.schedule, epoch);
        let patches = epoch_patches(cfg, &pools, epoch)?;
        let shuffle = derive_seed(cfg.seed, EPOCH ^ ((epoch as u64) << 8) ^ 0xB5);
        for (clean, noisy) in batch_iter(&patches, cfg.batch_size, shuffle)? {
            digest_batch(&mut digest, &clean);
            digest_batch(&mut digest, &noisy);
            let mut tape = Tape::new();
            let x = tape.constant(noisy);
            let target = tape.constant(clean);
            let y = model.forward(&mut tape, x, Mode::Train)?;
            let loss = l2_loss_var(&mut tape, y, target)?;
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(RuntimeError::NonFiniteLoss { epoch, iteration });
            }
            let grads = tape.backward(loss)?;
            model.update_running_stats(&tape)?;
            adam_step(&mut adam, &mut model.store.params, &grads)?;

            let line = LogLine {
                epoch,
                iteration,
                loss: value,
                lr: adam.lr,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(s) = sink.as_deref_mut() {
                writeln!(s, "{line}").map_err(io_err(std::path::Path::new("<log>")))?;
            }
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(f, "{line}").map_err(io_err(path))?;
            }
            log.push(line);
            iteration += 1;
        }

        let val = validation_loss(&model, &pools.validation, cfg.batch_size)?;
        if let Some(path) = &last_path {
            save_checkpoint(&model, cfg, path)?;
        }
        if let Some(v) = val {
            validation.push(v);
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((epoch, v));
                if let Some(path) = &best_path {
                    save_checkpoint(&model, cfg, path)?;
                }
            }
        }
    }
    if cfg.epochs == 0 {
        if let Some(path) = &last_path {
            save_checkpoint(&model, cfg, path)?;
        }
    }

    Ok(TrainOutcome {
        model,
        log,
        validation,
        best_epoch: best.map(|(e, _)| e),
        data_digest: digest.finalize(),
        last_checkpoint: last_path,
        best_checkpoint: best.and(best_path),
    })
}
