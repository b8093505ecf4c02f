use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, inverse_permutation};
use super::{Result, Scalar, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Gradients keyed by parameter name, one per registered trainable leaf.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Rotate(Var, i32),
    Sum(Var),
    Relu(Var),
    PRelu(Var, Var),
    Sigmoid(Var),
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool(Var),
    ChannelConv1d(Var, Var),
    ChannelScale(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, keyed by layer name.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub layer: String,
    pub mean: Vec<T>,
    /// Biased variance over the batch and spatial axes.
    pub var: Vec<T>,
    pub count: usize,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, which is a valid topological order for
/// the backward sweep.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
    batch_stats: Vec<BatchStats<T>>,
    checked: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            by_name: HashMap::new(),
            batch_stats: Vec::new(),
            checked: false,
        }
    }

    /// Which side of zero every ReLU/PReLU input lies on, packed 64 per word.
    ///
    /// Two evaluations with equal signatures followed the same linear piece
    /// of every piecewise-linear activation.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        let mut word = 0u64;
        let mut used = 0;
        for node in &self.nodes {
            let input = match node.op {
                Op::Relu(a) | Op::PRelu(a, _) => a,
                _ => continue,
            };
            for &v in self.nodes[input.index].value.data() {
                word |= u64::from(v > T::zero()) << used;
                used += 1;
                if used == 64 {
                    bits.push(word);
                    (word, used) = (0, 0);
                }
            }
        }
        if used > 0 {
            bits.push(word);
        }
        bits
    }

    /// In checked mode every op rejects non-finite outputs.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(TensorError::ForeignVar)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("variable from another tape").value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op<T>, inputs: &[Var]) -> Result<Var> {
        for &i in inputs {
            self.node(i)?;
        }
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the existing variable.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.by_name.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        };
        self.params.push((name.to_string(), v));
        self.by_name.insert(name.to_string(), v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn batch_stats(&self) -> &[BatchStats<T>] {
        &self.batch_stats
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.node(a)?.value.add(&self.node(b)?.value)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.node(a)?.value.sub(&self.node(b)?.value)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.node(a)?.value.mul(&self.node(b)?.value)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let v = self.node(a)?.value.scale(k);
        self.push("scale", v, Op::Scale(a, k), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.node(a)?.value.reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.node(a)?.value.permute(axes)?;
        self.push("permute", v, Op::Permute(a, axes.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        for &p in parts {
            self.node(p)?;
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat(&tensors, axis)?;
        self.push("concat", v, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.node(a)?;
        self.node(b)?;
        let v = kernels::matmul_batched(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.node(input)?;
        self.node(weight)?;
        if let Some(b) = bias {
            self.node(b)?;
        }
        let v = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            "conv2d",
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            &inputs,
        )
    }

    pub fn rotate90k(&mut self, a: Var, k: i32) -> Result<Var> {
        let v = self.node(a)?.value.rotate90k(k)?;
        self.push("rotate90k", v, Op::Rotate(a, k.rem_euclid(4)), &[a])
    }

    /// Sum of all elements as a single-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.node(a)?.value.sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x.max(T::zero()));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// Parametric ReLU with one slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let xs = &self.node(x)?.value;
        let ss = &self.node(slope)?.value;
        if xs.rank() < 2 || ss.shape() != [xs.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "prelu",
                lhs: xs.shape().to_vec(),
                rhs: ss.shape().to_vec(),
            });
        }
        let sl = ss.data();
        let v = kernels::map_channels(xs, |c, v| if v > T::zero() { v } else { sl[c] * v });
        self.push("prelu", v, Op::PRelu(x, slope), &[x, slope])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(kernels::sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    /// Per-slice standardisation of a rank-4 tensor over its last two axes.
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (v, inv_std) = kernels::instance_norm(&self.node(a)?.value, eps)?;
        self.push("instance_norm", v, Op::InstanceNorm { input: a, inv_std }, &[a])
    }

    /// Training-mode batch norm over `(b, h, w)` per channel. The observed
    /// statistics are recorded under `layer` for the caller to fold into
    /// running estimates.
    pub fn batch_norm(&mut self, layer: &str, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = &self.node(x)?.value;
        let (g, b) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let c = channel_count("batch_norm", xs, g, b)?;
        let (mean, var) = kernels::channel_mean_var(xs)?;
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let xhat = kernels::map_channels(xs, |ch, v| (v - mean[ch]) * inv_std[ch]);
        let (gd, bd) = (g.data(), b.data());
        let out = kernels::map_channels(&xhat, |ch, v| gd[ch] * v + bd[ch]);
        let count = xs.len() / c;
        self.batch_stats.push(BatchStats {
            layer: layer.to_string(),
            mean,
            var,
            count,
        });
        self.push(
            "batch_norm",
            out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Inference-mode batch norm using frozen statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let xs = &self.node(x)?.value;
        let (g, b) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let c = channel_count("batch_norm", xs, g, b)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: xs.shape().to_vec(),
                rhs: running_mean.shape().to_vec(),
            });
        }
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<T> = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let (gd, bd) = (g.data(), b.data());
        let out = kernels::map_channels(xs, |ch, v| gd[ch] * (v - mean[ch]) * inv_std[ch] + bd[ch]);
        self.push(
            "batch_norm",
            out,
            Op::BatchNormEval {
                input: x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let v = kernels::global_avg_pool(&self.node(a)?.value)?;
        self.push("global_avg_pool", v, Op::GlobalAvgPool(a), &[a])
    }

    pub fn channel_conv1d(&mut self, g: Var, kernel: Var) -> Result<Var> {
        let v = kernels::channel_conv1d(&self.node(g)?.value, &self.node(kernel)?.value)?;
        self.push("channel_conv1d", v, Op::ChannelConv1d(g, kernel), &[g, kernel])
    }

    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let v = kernels::channel_scale(&self.node(x)?.value, &self.node(scale)?.value)?;
        self.push("channel_scale", v, Op::ChannelScale(x, scale), &[x, scale])
    }

    /// Reverse sweep from `loss`; returns one gradient per registered parameter.
    /// Parameters the loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.index + 1, || None);
        grads[loss.index] = Some(Tensor::from_parts(
            root.value.shape().to_vec(),
            vec![T::one()],
        ));
        let mut leaf_grads: HashMap<usize, Tensor<T>> = HashMap::new();

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, t: Tensor<T>| {
                if !self.nodes[v.index].needs_grad {
                    return;
                }
                match &mut grads[v.index] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads.insert(i, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.scale(-T::one()));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    send(*a, g.mul(vb)?);
                    send(*b, g.mul(va)?);
                }
                Op::Scale(a, k) => send(*a, g.scale(*k)),
                Op::Reshape(a) => send(*a, g.reshape(self.value(*a).shape())?),
                Op::Permute(a, axes) => send(*a, g.permute(&inverse_permutation(axes))?),
                Op::Concat(parts, axis) => {
                    let sizes: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[*axis]).collect();
                    for (p, piece) in parts.iter().zip(kernels::split(&g, *axis, &sizes)?) {
                        send(*p, piece);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (batch, m, k, n) = kernels::matmul_dims(va, vb)?;
                    if self.needs(*a) {
                        let da = kernels::bmm(g.data(), false, vb.data(), true, batch, m, n, k);
                        send(*a, Tensor::from_parts(va.shape().to_vec(), da));
                    }
                    if self.needs(*b) {
                        let db = kernels::bmm(va.data(), true, g.data(), false, batch, k, m, n);
                        send(*b, Tensor::from_parts(vb.shape().to_vec(), db));
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let needs = (
                        self.needs(*input),
                        self.needs(*weight),
                        bias.is_some_and(|b| self.needs(b)),
                    );
                    let cg = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *stride,
                        *padding,
                        needs,
                    )?;
                    if let Some(t) = cg.input {
                        send(*input, t);
                    }
                    if let Some(t) = cg.weight {
                        send(*weight, t);
                    }
                    if let (Some(b), Some(t)) = (bias, cg.bias) {
                        send(*b, t);
                    }
                }
                Op::Rotate(a, k) => send(*a, g.rotate90k(4 - k)?),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    send(*a, self.value(*a).map(|_| s));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                        .collect();
                    send(*a, Tensor::from_parts(x.shape().to_vec(), d));
                }
                Op::PRelu(x, slope) => {
                    let xs = self.value(*x);
                    let sl = self.value(*slope).data();
                    let c = sl.len();
                    let plane = xs.len() / (xs.shape()[0] * c);
                    let mut dx = Vec::with_capacity(xs.len());
                    let mut ds = vec![T::zero(); c];
                    for (idx, (xc, gc)) in xs.data().chunks(plane).zip(g.data().chunks(plane)).enumerate() {
                        let ch = idx % c;
                        for (&xv, &gv) in xc.iter().zip(gc) {
                            if xv > T::zero() {
                                dx.push(gv);
                            } else {
                                dx.push(sl[ch] * gv);
                                ds[ch] = ds[ch] + xv * gv;
                            }
                        }
                    }
                    send(*x, Tensor::from_parts(xs.shape().to_vec(), dx));
                    send(*slope, Tensor::from_parts(vec![c], ds));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &d)| d * y * (T::one() - y))
                        .collect();
                    send(*a, Tensor::from_parts(y.shape().to_vec(), d));
                }
                Op::InstanceNorm { input, inv_std } => {
                    send(*input, kernels::instance_norm_backward(&node.value, inv_std, &g));
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gd = self.value(*gamma).data();
                    let c = gd.len();
                    let (dgamma, dbeta) = channel_sums(&g, xhat, c);
                    if self.needs(*input) {
                        let count = T::from_f64((xhat.len() / c) as f64);
                        let dx = map_channels2(xhat, &g, c, |ch, xh, d| {
                            gd[ch] * inv_std[ch] * (d - dbeta[ch] / count - xh * dgamma[ch] / count)
                        });
                        send(*input, dx);
                    }
                    send(*gamma, Tensor::from_parts(vec![c], dgamma));
                    send(*beta, Tensor::from_parts(vec![c], dbeta));
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let x = self.value(*input);
                    let gd = self.value(*gamma).data();
                    let c = gd.len();
                    let xhat = kernels::map_channels(x, |ch, v| (v - mean[ch]) * inv_std[ch]);
                    let (dgamma, dbeta) = channel_sums(&g, &xhat, c);
                    if self.needs(*input) {
                        send(*input, kernels::map_channels(&g, |ch, d| d * gd[ch] * inv_std[ch]));
                    }
                    send(*gamma, Tensor::from_parts(vec![c], dgamma));
                    send(*beta, Tensor::from_parts(vec![c], dbeta));
                }
                Op::GlobalAvgPool(a) => {
                    let x = self.value(*a);
                    let plane = x.shape()[2] * x.shape()[3];
                    let inv = T::one() / T::from_f64(plane as f64);
                    let d = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v * inv, plane))
                        .collect();
                    send(*a, Tensor::from_parts(x.shape().to_vec(), d));
                }
                Op::ChannelConv1d(x, k) => {
                    let (dx, dk) = kernels::channel_conv1d_backward(self.value(*x), self.value(*k), &g);
                    send(*x, dx);
                    send(*k, dk);
                }
                Op::ChannelScale(x, s) => {
                    let (xs, ss) = (self.value(*x), self.value(*s));
                    let plane = xs.shape()[2] * xs.shape()[3];
                    send(*x, kernels::channel_scale(&g, ss)?);
                    let ds = xs
                        .data()
                        .chunks(plane)
                        .zip(g.data().chunks(plane))
                        .map(|(a, b)| a.iter().zip(b).fold(T::zero(), |acc, (&u, &v)| acc + u * v))
                        .collect();
                    send(*s, Tensor::from_parts(ss.shape().to_vec(), ds));
                }
            }
        }

        Ok(self
            .params
            .iter()
            .map(|(name, v)| {
                let g = leaf_grads
                    .remove(&v.index)
                    .unwrap_or_else(|| self.nodes[v.index].value.zeros_like());
                (name.clone(), g)
            })
            .collect())
    }
}

fn channel_count<T: Scalar>(op: &'static str, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    if x.rank() != 4 {
        return Err(TensorError::Rank {
            op,
            expected: 4,
            shape: x.shape().to_vec(),
        });
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok(c)
}

/// Per-channel `(Σ g·xhat, Σ g)`.
fn channel_sums<T: Scalar>(g: &Tensor<T>, xhat: &Tensor<T>, c: usize) -> (Vec<T>, Vec<T>) {
    let plane = g.len() / (g.shape()[0] * c);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (idx, (gc, xc)) in g.data().chunks(plane).zip(xhat.data().chunks(plane)).enumerate() {
        let ch = idx % c;
        for (&d, &xh) in gc.iter().zip(xc) {
            dgamma[ch] = dgamma[ch] + d * xh;
            dbeta[ch] = dbeta[ch] + d;
        }
    }
    (dgamma, dbeta)
}

fn map_channels2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, c: usize, f: impl Fn(usize, T, T) -> T) -> Tensor<T> {
    let plane = a.len() / (a.shape()[0] * c);
    let mut out = Vec::with_capacity(a.len());
    for (idx, (ac, bc)) in a.data().chunks(plane).zip(b.data().chunks(plane)).enumerate() {
        let ch = idx % c;
        out.extend(ac.iter().zip(bc).map(|(&x, &y)| f(ch, x, y)));
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::gaussian(&[3, 4], 0.0, 1.0, 1).unwrap();
        let v = tape.param("x", &x);
        let loss = tape.sum(v).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g["x"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::gaussian(&[5], 0.0, 1.0, 2).unwrap();
        let v = tape.param("x", &x);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        for (gv, xv) in g["x"].data().iter().zip(x.data()) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn unused_parameter_gets_zeros() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param("a", &Tensor::full(&[2], 1.0).unwrap());
        tape.param("unused", &Tensor::full(&[3, 2], 1.0).unwrap());
        let loss = tape.sum(a).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g["unused"], Tensor::zeros(&[3, 2]).unwrap());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param("a", &Tensor::full(&[2], 1.0).unwrap());
        assert!(matches!(tape.backward(a), Err(TensorError::NotScalar(_))));
        let mut other = Tape::<f32>::new();
        let b = other.constant(Tensor::scalar(1.0));
        assert_eq!(tape.backward(b).unwrap_err(), TensorError::ForeignVar);
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn param_registration_dedupes() {
        let mut tape = Tape::<f32>::new();
        let t = Tensor::full(&[2], 1.0).unwrap();
        let a = tape.param("w", &t);
        let b = tape.param("w", &t);
        assert_eq!(a, b);
        assert_eq!(tape.param_names().count(), 1);
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut tape = Tape::<f32>::new().checked(true);
        let a = tape.constant(Tensor::full(&[2], f32::MAX as f64).unwrap());
        assert_eq!(
            tape.add(a, a).unwrap_err(),
            TensorError::NonFinite { op: "add" }
        );
    }
}
