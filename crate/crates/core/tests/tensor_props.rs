//! Kernel oracles, per-op finite-difference checks and layout identities.

use indexmap::IndexMap;
use mhcnn::rng::{derive_seed, SplitMix64};
use mhcnn::tensor::{gradcheck, kernels, GradcheckOptions, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect()).unwrap()
}

/// Direct six-loop convolution with zero padding.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Vec<f64> {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * co * oh * ow);
    for bn in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bn * ci + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * ci + c) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn naive_bmm(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let r = a.rank();
    let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
    let batch = a.len() / (m * k);
    let mut out = Vec::with_capacity(batch * m * n);
    for t in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out.push((0..k).map(|l| a.data()[t * m * k + i * k + l] * b.data()[t * k * n + l * n + j]).sum());
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn conv2d_matches_naive_oracle(
        n in 1usize..3, ci in 1usize..4, co in 1usize..4, h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2,
        bias in any::<bool>(), seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = uniform(&[n, ci, h, w], seed);
        let wt = uniform(&[co, ci, k, k], seed ^ 1);
        let b = bias.then(|| uniform(&[co], seed ^ 2));
        let want = naive_conv(&x, &wt, b.as_ref(), stride, pad);
        let got64 = kernels::conv2d(&x, &wt, b.as_ref(), stride, pad).unwrap();
        prop_assert!(max_abs_diff(got64.data(), &want) <= 1e-5);
        let got32 = kernels::conv2d(&x.cast::<f32>(), &wt.cast(), b.as_ref().map(|b| b.cast()).as_ref(), stride, pad).unwrap();
        prop_assert!(max_abs_diff(got32.cast::<f64>().data(), &want) <= 1e-5);
    }

    #[test]
    fn matmul_batched_matches_naive_oracle(
        lead in prop::collection::vec(1usize..4, 0..3), m in 1usize..7, k in 1usize..7, n in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut sa = lead.clone();
        sa.extend([m, k]);
        let mut sb = lead;
        sb.extend([k, n]);
        let a = uniform(&sa, seed);
        let b = uniform(&sb, seed ^ 3);
        let want = naive_bmm(&a, &b);
        let got64 = kernels::matmul_batched(&a, &b).unwrap();
        prop_assert!(max_abs_diff(got64.data(), &want) <= 1e-5);
        let got32 = kernels::matmul_batched(&a.cast::<f32>(), &b.cast()).unwrap();
        prop_assert!(max_abs_diff(got32.cast::<f64>().data(), &want) <= 1e-5);
    }

    #[test]
    fn rotation_identities(h in 1usize..7, w in 1usize..7, k in -5i32..6, seed in any::<u64>()) {
        let t = uniform(&[2, 2, h, w], seed);
        prop_assert_eq!(&t.rotate90k(4).unwrap(), &t);
        prop_assert_eq!(&t.rotate90k(k).unwrap().rotate90k(-k).unwrap(), &t);
        prop_assert_eq!(t.rotate90k(k).unwrap(), t.rotate90k(k.rem_euclid(4)).unwrap());
        let once = t.rotate90k(1).unwrap();
        prop_assert_eq!(once.shape(), &[2, 2, w, h]);
    }

    #[test]
    fn permute_and_reshape_round_trip(
        dims in prop::collection::vec(1usize..5, 1..5), seed in any::<u64>(), shuffle in any::<u64>(),
    ) {
        let t = uniform(&dims, seed);
        let mut axes: Vec<usize> = (0..dims.len()).collect();
        SplitMix64::new(shuffle).shuffle(&mut axes);
        let p = t.permute(&axes).unwrap();
        let back = p.permute(&kernels::inverse_permutation(&axes)).unwrap();
        prop_assert_eq!(&back, &t);
        let flat = t.reshape(&[t.len()]).unwrap();
        prop_assert_eq!(flat.data(), t.data());
        prop_assert_eq!(&flat.reshape(&dims).unwrap(), &t);
    }
}

/// Parameters handed to a per-op check, registered on the tape under their names.
type Params = IndexMap<String, Tensor<f64>>;

/// Gradchecks `Σ op(params) ⊙ r` for a fixed random probe `r`.
fn op_check<F>(params: Params, seed: u64, op: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let forward = |tape: &mut Tape<f64>, p: &Params| -> Result<Var, TensorError> {
        let vars: Vec<Var> = p.iter().map(|(k, v)| tape.param(k, v)).collect();
        op(tape, &vars)
    };
    let shape = {
        let mut tape = Tape::new();
        let y = forward(&mut tape, &params).unwrap();
        tape.value(y).shape().to_vec()
    };
    let probe = Tensor::<f64>::gaussian(&shape, 0.0, 1.0, derive_seed(seed, 77)).unwrap();
    let report = gradcheck(
        |tape, p| -> Result<Var, TensorError> {
            let y = forward(tape, p)?;
            let r = tape.constant(probe.clone());
            let z = tape.mul(y, r)?;
            tape.sum(z)
        },
        &params,
        GradcheckOptions {
            seed,
            ..GradcheckOptions::default()
        },
    )
    .unwrap();
    report.max_rel_error
}

fn params(entries: &[(&str, &[usize])], seed: u64) -> Params {
    entries
        .iter()
        .enumerate()
        .map(|(i, (name, shape))| (name.to_string(), Tensor::gaussian(shape, 0.0, 1.0, derive_seed(seed, i as u64)).unwrap()))
        .collect()
}

const SEEDS: u64 = 24;
const TOL: f64 = 1e-5;

fn every_seed(name: &str, f: impl Fn(u64) -> f64) {
    for seed in 0..SEEDS {
        let err = f(seed);
        assert!(err <= TOL, "{name}: seed {seed} relative error {err:e}");
    }
}

#[test]
fn elementwise_ops_gradcheck() {
    let ab = |s| params(&[("a", &[2, 3, 4]), ("b", &[2, 3, 4])], s);
    every_seed("add", |s| op_check(ab(s), s, |t, v| t.add(v[0], v[1])));
    every_seed("sub", |s| op_check(ab(s), s, |t, v| t.sub(v[0], v[1])));
    every_seed("mul", |s| op_check(ab(s), s, |t, v| t.mul(v[0], v[1])));
    every_seed("scale", |s| op_check(params(&[("a", &[5, 3])], s), s, |t, v| t.scale(v[0], -1.7)));
    every_seed("sum", |s| op_check(params(&[("a", &[4, 2])], s), s, |t, v| t.sum(v[0])));
    every_seed("sigmoid", |s| op_check(params(&[("a", &[3, 5])], s), s, |t, v| t.sigmoid(v[0])));
}

#[test]
fn activation_ops_gradcheck() {
    every_seed("relu", |s| op_check(params(&[("a", &[2, 3, 4])], s), s, |t, v| t.relu(v[0])));
    every_seed("prelu", |s| {
        op_check(params(&[("x", &[2, 3, 4, 4]), ("slope", &[3])], s), s, |t, v| t.prelu(v[0], v[1]))
    });
}

#[test]
fn layout_ops_gradcheck() {
    every_seed("reshape", |s| op_check(params(&[("a", &[2, 3, 4])], s), s, |t, v| t.reshape(v[0], &[6, 4])));
    every_seed("permute", |s| {
        op_check(params(&[("a", &[2, 3, 4, 5])], s), s, |t, v| t.permute(v[0], &[0, 2, 3, 1]))
    });
    every_seed("concat", |s| {
        op_check(params(&[("a", &[2, 1, 3, 3]), ("b", &[2, 3, 3, 3])], s), s, |t, v| t.concat(&[v[0], v[1]], 1))
    });
    for k in 1..4 {
        every_seed("rotate90k", |s| op_check(params(&[("a", &[1, 2, 3, 5])], s), s, |t, v| t.rotate90k(v[0], k)));
    }
}

#[test]
fn matmul_gradcheck() {
    every_seed("matmul", |s| {
        op_check(params(&[("a", &[2, 3, 4, 5]), ("b", &[2, 3, 5, 2])], s), s, |t, v| t.matmul(v[0], v[1]))
    });
}

#[test]
fn conv2d_gradcheck() {
    for (k, stride, pad) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0)] {
        every_seed("conv2d", |s| {
            op_check(
                params(&[("x", &[2, 3, 7, 7]), ("w", &[4, 3, k, k]), ("b", &[4])], s),
                s,
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad),
            )
        });
    }
    every_seed("conv2d without bias", |s| {
        op_check(params(&[("x", &[1, 2, 5, 5]), ("w", &[3, 2, 3, 3])], s), s, |t, v| {
            t.conv2d(v[0], v[1], None, 1, 1)
        })
    });
}

#[test]
fn normalization_ops_gradcheck() {
    every_seed("instance_norm", |s| {
        op_check(params(&[("a", &[2, 3, 4, 4])], s), s, |t, v| t.instance_norm(v[0], 1e-5))
    });
    every_seed("batch_norm", |s| {
        op_check(params(&[("x", &[2, 3, 4, 4]), ("g", &[3]), ("b", &[3])], s), s, |t, v| {
            t.batch_norm("bn", v[0], v[1], v[2], 1e-5)
        })
    });
    every_seed("batch_norm_eval", |s| {
        let mean = uniform(&[3], s);
        let var = uniform(&[3], s ^ 9).map(|v| 0.5 + v.abs());
        op_check(params(&[("x", &[2, 3, 4, 4]), ("g", &[3]), ("b", &[3])], s), s, move |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
        })
    });
}

#[test]
fn channel_attention_ops_gradcheck() {
    every_seed("global_avg_pool", |s| {
        op_check(params(&[("a", &[2, 3, 4, 5])], s), s, |t, v| t.global_avg_pool(v[0]))
    });
    every_seed("channel_conv1d", |s| {
        op_check(params(&[("g", &[2, 7]), ("k", &[3])], s), s, |t, v| t.channel_conv1d(v[0], v[1]))
    });
    every_seed("channel_scale", |s| {
        op_check(params(&[("x", &[2, 4, 3, 3]), ("s", &[2, 4])], s), s, |t, v| t.channel_scale(v[0], v[1]))
    });
}
