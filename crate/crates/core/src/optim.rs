//! Training objective, Adam and the step-decay learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Gradients, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("gradient for `{name}` has shape {grad:?} but the parameter has {param:?}")]
    Shape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("gradient for unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("no gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

pub type Result<T, E = OptimError> = std::result::Result<T, E>;

fn batch_of(shape: &[usize]) -> Result<usize> {
    match shape.first() {
        Some(&n) if n >= 1 && shape.len() >= 2 => Ok(n),
        _ => Err(TensorError::Invalid {
            op: "l2_loss",
            msg: format!("expected a (N, ...) batch, got {shape:?}"),
        }
        .into()),
    }
}

/// `Σ (predicted − target)² / (2N)`: squared error summed over each sample's
/// pixels and averaged over the `N` samples, halved.
pub fn l2_loss<T: Scalar>(predicted: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let diff = predicted.sub(target)?;
    let n = batch_of(predicted.shape())?;
    let sq: f64 = diff.data().iter().map(|&d| Scalar::to_f64(d) * Scalar::to_f64(d)).sum();
    Ok(sq / (2.0 * n as f64))
}

/// Differentiable [`l2_loss`] on a tape.
pub fn l2_loss_var<T: Scalar>(tape: &mut Tape<T>, predicted: Var, target: Var) -> Result<Var> {
    let n = batch_of(tape.value(predicted).shape())?;
    let diff = tape.sub(predicted, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, T::from_f64(0.5 / n as f64))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step count for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub lr: f64,
    t: u64,
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64, config: AdamConfig) -> Result<Self> {
        let b_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(lr >= 0.0 && lr.is_finite()) || !b_ok(config.beta1) || !b_ok(config.beta2) || config.eps.is_nan() || config.eps <= 0.0 {
            return Err(OptimError::Config(format!("lr {lr}, {config:?}")));
        }
        Ok(Self {
            config,
            lr,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }
}

/// One Adam update of every parameter in `params` from `grads`.
///
/// `grads` must hold exactly the parameters' names with matching shapes; the
/// state and parameters are left untouched when it does not.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &Gradients<T>,
) -> Result<()> {
    if let Some(extra) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(OptimError::UnknownParam(extra.clone()));
    }
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| OptimError::MissingGrad(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(OptimError::Shape {
                name: name.clone(),
                grad: g.shape().to_vec(),
                param: p.shape().to_vec(),
            });
        }
    }

    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    let lr = state.lr;
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| g.zeros_like());
        let v = state.v.entry(name.clone()).or_insert_with(|| g.zeros_like());
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gi = Scalar::to_f64(gi);
            let m_new = beta1 * Scalar::to_f64(*mi) + (1.0 - beta1) * gi;
            let v_new = beta2 * Scalar::to_f64(*vi) + (1.0 - beta2) * gi * gi;
            *mi = T::from_f64(m_new);
            *vi = T::from_f64(v_new);
            let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
            *theta = T::from_f64(Scalar::to_f64(*theta) - step);
        }
    }
    Ok(())
}

/// Step decay: `initial · factor^⌊epoch / interval⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-4,
            factor: 0.5,
            interval: 30,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(OptimError::Config(format!("initial lr must be positive, got {}", self.initial)));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(OptimError::Config(format!("decay factor must be in (0, 1], got {}", self.factor)));
        }
        if self.interval == 0 {
            return Err(OptimError::Config("decay interval must be at least 1 epoch".into()));
        }
        Ok(())
    }
}

pub fn schedule_lr(schedule: &LrSchedule, epoch: usize) -> f64 {
    let decays = (epoch / schedule.interval.max(1)) as i32;
    schedule.initial * schedule.factor.powi(decays)
}
