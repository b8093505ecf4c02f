//! End-to-end acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches the terminal even
//! when all criteria pass. Exits non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use mhcnn::data::{add_awgn, from_float, read_pnm, to_float, write_pnm, ImageBuffer, NoiseSpec};
use mhcnn::metrics::{psnr, psnr_unclamped, ssim};
use mhcnn::nn::{Mhcnn, Mode, ModelConfig};
use mhcnn::rng::SplitMix64;
use mhcnn::runtime::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, Checkpoint, RunConfig};
use mhcnn::tensor::{kernels, Tape, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mhcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mhcnn"))
        .args(args)
        .output()
        .expect("running the mhcnn binary")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn uniform(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| 2.0 * rng.next_f64() - 1.0).collect()).unwrap()
}

fn c1_gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let out = mhcnn(&["gradcheck"]);
    let elapsed = start.elapsed();
    let stdout = text(&out.stdout);
    let mut worst = 0f64;
    let mut blocks = Vec::new();
    for line in stdout.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        ensure(cols.len() == 5, || format!("malformed row `{line}`"))?;
        let err: f64 = cols[1].parse().map_err(|e| format!("{e}: `{line}`"))?;
        ensure(err <= 1e-5, || format!("{} max relative error {err:e} > 1e-5", cols[0]))?;
        worst = worst.max(err);
        blocks.push(cols[0].to_string());
    }
    let expected = ["DenseBlock", "PathBlock", "MPA", "ECA", "Tail", "MHCNN"];
    ensure(blocks == expected, || format!("blocks reported: {blocks:?}"))?;
    ensure(out.status.success(), || format!("exit status {}", out.status))?;
    ensure(elapsed <= Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("6 blocks, worst {worst:.2e} <= 1e-5, {:.1}s", elapsed.as_secs_f64()))
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, k, _] = w.shape().try_into().unwrap();
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let mut out = Vec::new();
    for bn in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if (0..h as isize).contains(&iy) && (0..wd as isize).contains(&ix) {
                                    acc += x.data()[((bn * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
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

fn naive_bmm(a: &Tensor<f64>, b: &Tensor<f64>, m: usize, k: usize, n: usize) -> Vec<f64> {
    let batch = a.len() / (m * k);
    let mut out = Vec::new();
    for t in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out.push((0..k).map(|l| a.data()[t * m * k + i * k + l] * b.data()[t * k * n + l * n + j]).sum());
            }
        }
    }
    out
}

fn max_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

fn c2_oracle_equivalence() -> Outcome {
    const CASES: usize = 250;
    let mut rng = SplitMix64::new(2);
    let mut worst = 0f64;
    for case in 0..CASES {
        let (n, ci, co) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(4));
        let (h, w) = (3 + rng.below(6), 3 + rng.below(6));
        let k = if rng.below(2) == 0 { 1 } else { 3 };
        let (stride, pad) = (1 + rng.below(2), rng.below(2));
        let x = uniform(&mut rng, &[n, ci, h, w]);
        let wt = uniform(&mut rng, &[co, ci, k, k]);
        let b = uniform(&mut rng, &[co]);
        let want = naive_conv(&x, &wt, &b, stride, pad);
        let got = kernels::conv2d(&x.cast::<f32>(), &wt.cast(), Some(&b.cast()), stride, pad).map_err(|e| e.to_string())?;
        let d = max_diff(got.data(), &want);
        ensure(d <= 1e-5, || format!("conv2d case {case}: max abs diff {d:e}"))?;
        worst = worst.max(d);
    }
    for case in 0..CASES {
        let lead: Vec<usize> = (0..rng.below(3)).map(|_| 1 + rng.below(3)).collect();
        let (m, k, n) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
        let a = uniform(&mut rng, &[lead.as_slice(), &[m, k]].concat());
        let b = uniform(&mut rng, &[lead.as_slice(), &[k, n]].concat());
        let want = naive_bmm(&a, &b, m, k, n);
        let got = kernels::matmul_batched(&a.cast::<f32>(), &b.cast()).map_err(|e| e.to_string())?;
        let d = max_diff(got.data(), &want);
        ensure(d <= 1e-5, || format!("matmul case {case}: max abs diff {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("{CASES} conv2d + {CASES} matmul_batched cases, worst {worst:.2e} <= 1e-5 (f32 vs f64 oracle)"))
}

fn c3_residual_identity() -> Outcome {
    let mut models = [1usize, 3].map(|c| {
        let mut m = Mhcnn::<f32>::new(&ModelConfig::desk(4, c, 30 + c as u64)).unwrap();
        m.zero_tail_output();
        m
    });
    let sizes = [8, 16, 32];
    for i in 0..50u64 {
        let model = &mut models[(i % 2) as usize];
        let c = model.config().in_channels;
        let s = sizes[(i / 2 % 3) as usize];
        let input = Tensor::<f32>::gaussian(&[1 + (i % 3 == 0) as usize, c, s, s], 0.5, 0.3, 300 + i).unwrap();
        let mode = if i % 4 < 2 { Mode::Eval } else { Mode::Train };
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = model.forward(&mut tape, x, mode).map_err(|e| e.to_string())?;
        let same = tape.value(y).data().iter().zip(input.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("input {i} ({c}x{s}x{s}, {mode:?}) is not reproduced bit-exactly"))?;
    }
    Ok("50 inputs (gray/color, sizes 8/16/32, eval and train) reproduced bit-exactly".into())
}

fn c4_structural_contract() -> Outcome {
    for (heads, angles) in [(1, vec![0]), (2, vec![0, 1]), (3, vec![0, 1, 2])] {
        for width in [4, 8] {
            let cfg = ModelConfig {
                heads,
                angles: angles.clone(),
                ..ModelConfig::desk(width, 1, 4)
            };
            let model = Mhcnn::<f32>::new(&cfg).map_err(|e| e.to_string())?;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::gaussian(&[1, 1, 8, 8], 0.5, 0.2, 5).unwrap());
            let taps = model.forward_taps(&mut tape, &model.store.params, x, Mode::Train).map_err(|e| e.to_string())?;
            let ch = tape.value(taps.mpa).shape()[1];
            ensure(ch == heads * width, || format!("heads {heads} width {width}: MPA emits {ch} channels"))?;
        }
    }
    let mut cases = 0;
    for width in [4, 8] {
        for cin in [1, 3] {
            let model = Mhcnn::<f32>::new(&ModelConfig::desk(width, cin, 40)).map_err(|e| e.to_string())?;
            for b in [1, 2] {
                for s in [8, 16, 24] {
                    let mut tape = Tape::new();
                    let shape = [b, cin, s, s];
                    let x = tape.constant(Tensor::gaussian(&shape, 0.5, 0.2, cases).unwrap());
                    let y = model.forward(&mut tape, x, Mode::Train).map_err(|e| e.to_string())?;
                    ensure(tape.value(y).shape() == shape, || format!("{shape:?} -> {:?}", tape.value(y).shape()))?;
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("MPA channels = heads x width for heads 1-3; {cases}-point shape grid preserved"))
}

fn c5_awgn_statistics() -> Outcome {
    let clean = Tensor::<f32>::full(&[1, 1000, 1000], 0.5).unwrap();
    let mut parts = Vec::new();
    for sigma in [15.0, 25.0, 50.0] {
        let noisy = add_awgn(&clean, &NoiseSpec::new(sigma, 55).map_err(|e| e.to_string())?);
        let r: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(&a, &b)| a as f64 - b as f64).collect();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let std = (r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let target = sigma / 255.0;
        let rel = (std / target - 1.0).abs();
        ensure(rel <= 0.02, || format!("sigma {sigma}: std {std:.5} vs {target:.5} ({:.2}%)", rel * 100.0))?;
        let p = psnr_unclamped(&clean, &noisy).map_err(|e| e.to_string())?;
        let expect = 20.0 * (255.0 / sigma).log10();
        ensure((p - expect).abs() <= 0.15, || format!("sigma {sigma}: PSNR {p:.3} vs {expect:.3} dB"))?;
        parts.push(format!("σ={sigma}: std {:+.2}%, PSNR {p:.2} dB", (std / target - 1.0) * 100.0));
    }
    Ok(format!("10^6 samples each; {}", parts.join("; ")))
}

fn c6_desk_learning() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = repo_root().join("configs/desk.json");
    let cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
    ensure(
        cfg.model.width == 8 && cfg.model.heads == 3 && cfg.patch_size == 32 && cfg.batch_size == 8 && cfg.sigma == 25.0,
        || "configs/desk.json is not the desk setting".into(),
    )?;
    ensure(cfg.iterations_per_epoch() * cfg.epochs == 200, || "desk budget is not 200 iterations".into())?;
    let start = Instant::now();
    let out = mhcnn(&["train", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    let elapsed = start.elapsed();
    ensure(out.status.success(), || format!("train failed: {}", text(&out.stderr)))?;
    let losses: Vec<f64> = text(&out.stdout)
        .lines()
        .map(|l| l.split('\t').nth(2).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
        .collect();
    ensure(losses.len() == 200, || format!("{} log lines", losses.len()))?;
    let first = losses[0];
    let tail = losses[190..].iter().sum::<f64>() / 10.0;
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("eval.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let noisy = report["noisy"]["mean_psnr_db"].as_f64().ok_or("eval.json lacks noisy PSNR")?;
    let denoised = report["denoised"]["mean_psnr_db"].as_f64().ok_or("eval.json lacks denoised PSNR")?;
    let gain = denoised - noisy;
    ensure(tail <= 0.5 * first, || format!("loss {first:.4} -> {tail:.4} did not halve"))?;
    ensure(gain >= 0.5, || format!("held-out gain {gain:+.3} dB < 0.5 dB"))?;
    ensure(elapsed <= Duration::from_secs(600), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "loss {first:.3} -> {tail:.3} (x{:.3}), held-out {noisy:.2} -> {denoised:.2} dB ({gain:+.2} dB), {:.0}s",
        tail / first,
        elapsed.as_secs_f64()
    ))
}

fn c7_ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = repo_root().join("configs/smoke.json");
    let report = dir.path().join("ablation.json");
    let out = mhcnn(&["ablate", "--config", config.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    ensure(out.status.success(), || format!("ablate failed: {}", text(&out.stderr)))?;
    let rows: Vec<String> = text(&out.stdout).lines().skip(1).map(str::to_string).collect();
    let table: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&report).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let labels: Vec<&str> = table["rows"].as_array().ok_or("no rows")?.iter().filter_map(|r| r["label"].as_str()).collect();
    let expected = [
        "MHCNN",
        "MHCNN with 2 heads",
        "MHCNN with 1 head",
        "MHCNN (0°, 0°, 0°)",
        "MHCNN (0°, 90°, 270°)",
        "MHCNN (0°, 180°, 270°)",
        "MHCNN without MPA",
    ];
    ensure(rows.len() == 7, || format!("{} printed rows", rows.len()))?;
    ensure(labels == expected, || format!("labels {labels:?}"))?;
    for r in table["rows"].as_array().unwrap() {
        let p = r["psnr_db"].as_f64().unwrap_or(f64::NAN);
        ensure(p.is_finite() && r["final_train_loss"].as_f64().is_some(), || format!("row {r} incomplete"))?;
    }
    let digests: Vec<_> = table["rows"].as_array().unwrap().iter().map(|r| r["data_digest"].clone()).collect();
    ensure(digests.windows(2).all(|w| w[0] == w[1]), || "variants saw different data".into())?;
    Ok(format!(
        "7 variant rows, shared seed {} and {} iterations each, identical training batches",
        table["seed"], table["iterations"]
    ))
}

fn c8_metric_correctness() -> Outcome {
    let zero = Tensor::<f32>::zeros(&[1, 16, 16]).unwrap();
    let tenth = Tensor::<f32>::full(&[1, 16, 16], 0.1).unwrap();
    let p = psnr(&zero, &tenth).map_err(|e| e.to_string())?;
    ensure((p - 20.0).abs() <= 1e-6, || format!("uniform 0.1 error gives {p} dB"))?;
    let img = Tensor::<f32>::gaussian(&[1, 32, 32], 0.5, 0.2, 8).unwrap();
    let cap = psnr(&img, &img).map_err(|e| e.to_string())?;
    ensure((cap - 100.0).abs() <= 1e-6, || format!("identity gives {cap} dB"))?;
    let mut worst = 0f64;
    for seed in 0..10 {
        let c = if seed % 2 == 0 { 1 } else { 3 };
        let a = Tensor::<f32>::gaussian(&[c, 24, 24], 0.5, 0.2, seed).unwrap();
        let b = Tensor::<f32>::gaussian(&[c, 24, 24], 0.5, 0.2, seed + 100).unwrap();
        let self_sim = ssim(&a, &a).map_err(|e| e.to_string())?;
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        worst = worst.max((self_sim - 1.0).abs()).max((ab - ba).abs());
        ensure((self_sim - 1.0).abs() <= 1e-9, || format!("SSIM(x,x) = {self_sim}"))?;
        ensure((ab - ba).abs() <= 1e-9, || format!("SSIM asymmetric: {ab} vs {ba}"))?;
    }
    Ok(format!("PSNR 20 dB and 100 dB cap within 1e-6; SSIM identity/symmetry worst {worst:.1e}"))
}

fn c9_persistence() -> Outcome {
    let cfg = RunConfig {
        model: ModelConfig::desk(4, 1, 9),
        ..RunConfig::desk(9)
    };
    let model = Mhcnn::<f32>::new(&cfg.model).map_err(|e| e.to_string())?;
    let bytes = checkpoint_to_bytes(&Checkpoint::new(&model, &cfg));
    let back = checkpoint_from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(back.config == cfg, || "config changed in round trip".into())?;
    let exact = model.store.params.iter().chain(&model.store.buffers).all(|(k, v)| {
        let other = back.store.params.get(k).or_else(|| back.store.buffers.get(k));
        other.is_some_and(|o| o.shape() == v.shape() && o.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()))
    });
    ensure(exact, || "parameters changed in round trip".into())?;
    ensure(checkpoint_to_bytes(&back) == bytes, || "re-encoding differs".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.mhck");
    save_checkpoint(&model, &cfg, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(checkpoint_to_bytes(&loaded) == bytes, || "file round trip differs".into())?;

    let mut rng = SplitMix64::new(9);
    let mut positions: Vec<usize> = (0..64.min(bytes.len())).collect();
    positions.extend((0..2000).map(|_| rng.below(bytes.len())));
    positions.push(bytes.len() - 1);
    for &pos in &positions {
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << rng.below(8);
        ensure(checkpoint_from_bytes(&bad).is_err(), || format!("flip at byte {pos} accepted"))?;
    }
    for cut in [0, 3, 8, bytes.len() / 2, bytes.len() - 1] {
        ensure(checkpoint_from_bytes(&bytes[..cut]).is_err(), || format!("truncation to {cut} accepted"))?;
    }

    for (c, seed) in [(1usize, 1u64), (3, 2), (1, 3), (3, 4)] {
        let (h, w) = (1 + rng.below(40), 1 + rng.below(40));
        let pixels = (0..h * w * c).map(|_| rng.below(256) as u8).collect();
        let img = ImageBuffer::new(h, w, c, pixels).map_err(|e| e.to_string())?;
        let round = read_pnm(&write_pnm(&img)).map_err(|e| e.to_string())?;
        ensure(round == img, || format!("PNM round trip differs ({c} channels, seed {seed})"))?;
        let via_float = from_float(&to_float(&img)).map_err(|e| e.to_string())?;
        ensure(via_float == img, || "8-bit -> float -> 8-bit differs".into())?;
    }
    Ok(format!(
        "checkpoint ({} bytes) bit-exact; {} single-byte corruptions and 5 truncations rejected; P5/P6 bit-exact",
        bytes.len(),
        positions.len()
    ))
}

fn c10_determinism() -> Outcome {
    let config = repo_root().join("configs/smoke.json");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut logs = Vec::new();
    let mut ckpts = Vec::new();
    for d in &dirs {
        let out = mhcnn(&["train", "--config", config.to_str().unwrap(), "--out", d.path().to_str().unwrap(), "--quiet"]);
        ensure(out.status.success(), || format!("train failed: {}", text(&out.stderr)))?;
        let log = std::fs::read_to_string(d.path().join("train.log")).map_err(|e| e.to_string())?;
        let det: Vec<String> = log.lines().map(|l| l.rsplit_once('\t').map_or("", |(det, _)| det).to_string()).collect();
        logs.push(det);
        let pair = ["last.mhck", "best.mhck"].map(|f| std::fs::read(d.path().join(f)).unwrap_or_default());
        ckpts.push(pair);
    }
    ensure(!logs[0].is_empty() && logs[0] == logs[1], || "loss logs differ".into())?;
    ensure(!ckpts[0][0].is_empty() && ckpts[0] == ckpts[1], || "checkpoints differ".into())?;
    Ok(format!("{} log lines identical (seconds column excluded); last/best checkpoints bit-identical", logs[0].len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient fidelity", c1_gradient_fidelity),
        ("oracle equivalence", c2_oracle_equivalence),
        ("residual identity", c3_residual_identity),
        ("structural contract", c4_structural_contract),
        ("AWGN statistics", c5_awgn_statistics),
        ("desk-scale learning", c6_desk_learning),
        ("ablation harness", c7_ablation_harness),
        ("metric correctness", c8_metric_correctness),
        ("persistence", c9_persistence),
        ("determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
