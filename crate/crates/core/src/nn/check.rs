//! Finite-difference gradient checks for each MHCNN block, run in `f64`.
//!
//! Each check feeds fixed Gaussian inputs through one block in training mode
//! and differentiates `Σ y ⊙ r` for a fixed random probe `r`.

use super::attention::{EcaLayer, MpaBlock};
use super::blocks::{DenseBlock, PathBlock, TailBlock};
use super::{Builder, Ctx, Mhcnn, Mode, ModelConfig, ParamStore, Result};
use crate::rng::derive_seed;
use crate::tensor::{gradcheck, GradcheckOptions, GradcheckReport, Tape, Tensor, Var};

/// Worst relative error every block must stay under.
pub const TOLERANCE: f64 = 1e-5;

/// Entries sampled per parameter tensor; smaller tensors are checked in full.
pub const SAMPLES_PER_TENSOR: usize = 16;

#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub block: &'static str,
    pub report: GradcheckReport,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= TOLERANCE
    }
}

fn options(seed: u64) -> GradcheckOptions {
    GradcheckOptions {
        eps: 1e-4,
        max_per_tensor: Some(SAMPLES_PER_TENSOR),
        seed,
    }
}

fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], forward: F, seed: u64) -> Result<GradcheckReport>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let run = |tape: &mut Tape<f64>, params: &super::NamedTensors<f64>| -> Result<Var> {
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let mut ctx = Ctx {
            tape,
            params,
            buffers: &store.buffers,
            mode: Mode::Train,
        };
        forward(&mut ctx, &vars)
    };
    let out_shape = {
        let mut tape = Tape::new();
        let y = run(&mut tape, &store.params)?;
        tape.value(y).shape().to_vec()
    };
    let probe = Tensor::<f64>::gaussian(&out_shape, 0.0, 1.0, derive_seed(seed, 99))?;
    gradcheck(
        |tape, params| -> Result<Var> {
            let y = run(tape, params)?;
            let r = tape.constant(probe.clone());
            let z = tape.mul(y, r)?;
            Ok(tape.sum(z)?)
        },
        &store.params,
        options(seed),
    )
}

fn input(shape: &[usize], seed: u64, stream: u64) -> Result<Tensor<f64>> {
    Ok(Tensor::gaussian(shape, 0.0, 1.0, derive_seed(seed, stream))?)
}

pub fn dense_block(width: usize, seed: u64) -> Result<GradcheckReport> {
    let mut b = Builder::<f64>::new(seed);
    let block = DenseBlock::build(&mut b, "dense", width)?;
    let x = input(&[2, width, 6, 6], seed, 1)?;
    check(&b.store, &[x], |c, v| block.forward(c, v[0]), seed)
}

pub fn path_block(width: usize, seed: u64) -> Result<GradcheckReport> {
    let mut b = Builder::<f64>::new(seed);
    let pb = PathBlock::build(&mut b, "path", 1, width)?;
    let x = input(&[1, 1, 8, 8], seed, 1)?;
    check(&b.store, &[x], |c, v| pb.forward(c, v[0]), seed)
}

pub fn mpa(width: usize, size: usize, seed: u64) -> Result<GradcheckReport> {
    let mut b = Builder::<f64>::new(seed);
    let block = MpaBlock::build(&mut b, "mpa", width, &[0, 1, 2], true)?;
    let streams = (0..3)
        .map(|i| input(&[2, width, size, size], seed, 1 + i))
        .collect::<Result<Vec<_>>>()?;
    check(&b.store, &streams, |c, v| block.forward(c, v), seed)
}

pub fn eca(channels: usize, seed: u64) -> Result<GradcheckReport> {
    let mut b = Builder::<f64>::new(seed);
    let layer = EcaLayer::build(&mut b, "eca", channels)?;
    let x = input(&[2, channels, 5, 5], seed, 1)?;
    check(&b.store, &[x], |c, v| layer.forward(c, v[0]), seed)
}

pub fn tail(channels: usize, seed: u64) -> Result<GradcheckReport> {
    let mut b = Builder::<f64>::new(seed);
    let block = TailBlock::build(&mut b, "tail", channels, 1)?;
    let x = input(&[1, channels, 6, 6], seed, 1)?;
    check(&b.store, &[x], |c, v| block.forward(c, v[0]), seed)
}

pub fn full_model(width: usize, size: usize, seed: u64) -> Result<GradcheckReport> {
    let model = Mhcnn::<f64>::new(&ModelConfig::desk(width, 1, seed))?;
    let x = input(&[1, 1, size, size], seed, 1)?.map(|v| 0.5 + 0.2 * v);
    check(
        &model.store,
        &[x],
        |c, v| {
            let taps = model.forward_taps(c.tape, c.params, v[0], c.mode)?;
            Ok(taps.output)
        },
        seed,
    )
}

/// Every block at desk width 4; the full model on an 8×8 input.
pub fn suite(seed: u64) -> Result<Vec<BlockCheck>> {
    let width = 4;
    let fused = 3 * width;
    Ok(vec![
        BlockCheck {
            block: "DenseBlock",
            report: dense_block(width, seed)?,
        },
        BlockCheck {
            block: "PathBlock",
            report: path_block(width, seed)?,
        },
        BlockCheck {
            block: "MPA",
            report: mpa(width, 6, seed)?,
        },
        BlockCheck {
            block: "ECA",
            report: eca(fused, seed)?,
        },
        BlockCheck {
            block: "Tail",
            report: tail(fused, seed)?,
        },
        BlockCheck {
            block: "MHCNN",
            report: full_model(width, 8, seed)?,
        },
    ])
}
