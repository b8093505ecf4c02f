//! MHCNN building blocks and the assembled model.

mod attention;
mod blocks;
pub mod check;
mod layers;
mod model;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

pub use attention::{eca_kernel_size, EcaLayer, MpaBlock};
pub use blocks::{DenseBlock, PathBlock, TailBlock};
pub use layers::{BatchNorm, Conv2d, PRelu};
pub use model::{Mhcnn, Taps};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter or buffer `{0}`")]
    Missing(String),
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels produced by each head.
    pub width: usize,
    pub heads: usize,
    /// Counterclockwise quarter turns applied to the input of each head.
    pub angles: Vec<u8>,
    pub use_mpa: bool,
    pub in_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 3,
            angles: vec![0, 1, 2],
            use_mpa: true,
            in_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn desk(width: usize, in_channels: usize, seed: u64) -> Self {
        Self {
            width,
            in_channels,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(NnError::Config(m));
        if self.width == 0 {
            return fail("width must be at least 1".into());
        }
        if self.heads == 0 {
            return fail("heads must be at least 1".into());
        }
        if self.angles.len() != self.heads {
            return fail(format!(
                "{} angles given for {} heads",
                self.angles.len(),
                self.heads
            ));
        }
        if self.angles[0] != 0 {
            return fail("the first head must receive the unrotated image (angle 0)".into());
        }
        if let Some(a) = self.angles.iter().find(|&&a| a > 3) {
            return fail(format!("angle {a} is not a quarter-turn count in 0..=3"));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return fail(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        Ok(())
    }

    /// Channels entering the noise-processing stage.
    pub fn fused_channels(&self) -> usize {
        self.heads * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub type NamedTensors<T> = IndexMap<String, Tensor<T>>;

/// Trainable parameters plus non-trainable buffers (batch-norm running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    pub params: NamedTensors<T>,
    pub buffers: NamedTensors<T>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn absorb_batch_stats(&mut self, tape: &Tape<T>, momentum: f64) -> Result<()> {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for s in tape.batch_stats() {
            let (layer, count) = (&s.layer, s.count);
            let unbias = if count > 1 {
                T::from_f64(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let rm_key = format!("{layer}.running_mean");
            let rv_key = format!("{layer}.running_var");
            let rm = self
                .buffers
                .get_mut(&rm_key)
                .ok_or_else(|| NnError::Missing(rm_key.clone()))?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            let rv = self
                .buffers
                .get_mut(&rv_key)
                .ok_or_else(|| NnError::Missing(rv_key.clone()))?;
            for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * b * unbias;
            }
        }
        Ok(())
    }
}

/// Deterministic parameter factory used while assembling a model.
pub(crate) struct Builder<T: Scalar> {
    pub store: ParamStore<T>,
    rng: SplitMix64,
}

impl<T: Scalar> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: SplitMix64::new(seed),
        }
    }

    /// Gaussian tensor with the given std, drawn in `f64` so every precision
    /// sees the same values.
    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(std * self.rng.gaussian()))
            .collect();
        self.insert_param(name, Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert_param(name, Tensor::full(shape, value)?)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        if self
            .store
            .buffers
            .insert(name.to_string(), Tensor::full(shape, value)?)
            .is_some()
        {
            return Err(NnError::Config(format!("duplicate buffer `{name}`")));
        }
        Ok(())
    }

    fn insert_param(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.store.params.insert(name.to_string(), t).is_some() {
            return Err(NnError::Config(format!("duplicate parameter `{name}`")));
        }
        Ok(())
    }
}

/// Everything a forward pass reads: the tape, parameter values, buffers and mode.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a NamedTensors<T>,
    pub buffers: &'a NamedTensors<T>,
    pub mode: Mode,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| NnError::Missing(name.to_string()))?;
        Ok(self.tape.param(name, t))
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| NnError::Missing(name.to_string()))
    }
}
