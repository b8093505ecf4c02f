use indexmap::IndexMap;

use super::{Tape, Tensor, TensorError, Var};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Tensors larger than this are checked on a seeded random subset of entries.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose ±ε evaluations put some ReLU/PReLU input on the other
    /// side of zero. The central difference there averages two linear pieces,
    /// so these entries are excluded from `max_rel_error`.
    pub kink_crossings: usize,
}

fn eval<F, E>(f: &mut F, params: &IndexMap<String, Tensor<f64>>) -> Result<(f64, Vec<u64>), E>
where
    F: FnMut(&mut Tape<f64>, &IndexMap<String, Tensor<f64>>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    Ok((tape.value(loss).item()?, tape.kink_signature()))
}

/// Compares tape gradients with central differences `(f(θ+ε) − f(θ−ε)) / 2ε`.
///
/// Relative error per entry is `|a − n| / max(|a|, |n|, 1e-8)`; the worst one
/// over all checked entries is reported. Entries where a perturbation flips
/// the sign of any ReLU/PReLU input are counted in `kink_crossings` instead.
pub fn gradcheck<F, E>(
    mut f: F,
    params: &IndexMap<String, Tensor<f64>>,
    opts: GradcheckOptions,
) -> Result<GradcheckReport, E>
where
    F: FnMut(&mut Tape<f64>, &IndexMap<String, Tensor<f64>>) -> Result<Var, E>,
    E: From<TensorError>,
{
    if opts.eps.is_nan() || opts.eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "gradcheck",
            msg: format!("eps must be positive, got {}", opts.eps),
        }
        .into());
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let base = tape.value(loss).item()?;
    let base_kinks = tape.kink_signature();
    let analytic = tape.backward(loss)?;
    drop(tape);

    let (again, _) = eval(&mut f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(TensorError::Invalid {
            op: "gradcheck",
            msg: format!("forward is not deterministic ({base} vs {again})"),
        }
        .into());
    }

    let mut rng = SplitMix64::new(opts.seed);
    let mut work = params.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kink_crossings: 0,
    };
    for (name, tensor) in params {
        let Some(grad) = analytic.get(name) else {
            continue;
        };
        let n = tensor.len();
        let indices: Vec<usize> = match opts.max_per_tensor {
            Some(cap) if cap < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(cap);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = tensor.data()[i];
            work[name].data_mut()[i] = orig + opts.eps;
            let (plus, plus_kinks) = eval(&mut f, &work)?;
            work[name].data_mut()[i] = orig - opts.eps;
            let (minus, minus_kinks) = eval(&mut f, &work)?;
            work[name].data_mut()[i] = orig;
            if plus_kinks != base_kinks || minus_kinks != base_kinks {
                report.kink_crossings += 1;
                continue;
            }

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
