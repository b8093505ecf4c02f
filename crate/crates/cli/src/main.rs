use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mhcnn::data::{self, read_pnm_file, to_float, write_pnm_file};
use mhcnn::metrics::psnr;
use mhcnn::nn::check;
use mhcnn::runtime::{self, load_checkpoint, Corpus, DataSource, FeatureStage, RunConfig};

/// Multi-head CNN denoiser with multi-path attention.
#[derive(Parser, Debug)]
#[command(name = "mhcnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress the per-iteration log on stdout.
        #[arg(long)]
        quiet: bool,
    },
    /// Denoise one PGM/PPM image.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Clean reference: print PSNR of the input and of the result against it.
        #[arg(long)]
        dump_psnr: Option<PathBuf>,
    },
    /// Score a checkpoint on a folder of clean images (AWGN added) or a
    /// paired clean/noisy folder.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and score the seven head/angle/MPA variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Also write the JSON table here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every block in 64-bit mode.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the channels of an intermediate stage as a tiled PGM.
    DumpFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// head0, head1, head2 or mpa_out.
        #[arg(long)]
        stage: FeatureStage,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a procedural image corpus as PGM (or PPM with --color).
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long, value_parser = clap::value_parser!(u32).range(16..))]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        color: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out, quiet } => train(&config, out, quiet),
        Command::Denoise {
            model,
            input,
            output,
            dump_psnr,
        } => denoise(&model, &input, &output, dump_psnr.as_deref()),
        Command::Eval {
            model,
            data,
            sigma,
            seed,
            report,
        } => eval(&model, &data, sigma, seed, report.as_deref()),
        Command::Ablate { config, report } => ablate(&config, report.as_deref()),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::DumpFeatures {
            model,
            input,
            stage,
            out,
        } => dump_features(&model, &input, stage, &out),
        Command::GenData {
            count,
            size,
            seed,
            out,
            color,
        } => gen_data(count, size as usize, seed, &out, color),
    }
}

fn train(config: &Path, out: Option<PathBuf>, quiet: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if out.is_some() {
        cfg.output_dir = out;
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("runs/mhcnn"));
    }
    let start = Instant::now();
    let mut stdout = std::io::stdout().lock();
    let sink: Option<&mut dyn Write> = if quiet { None } else { Some(&mut stdout) };
    let outcome = runtime::train_with_log(&cfg, sink)?;
    let dir = cfg.output_dir.as_deref().expect("set above");
    eprintln!(
        "trained {} iterations in {:.1}s; {} parameters; checkpoints in {}",
        outcome.log.len(),
        start.elapsed().as_secs_f64(),
        outcome.model.param_count(),
        dir.display()
    );
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        eprintln!("loss {:.6} -> {:.6}", first.loss, last.loss);
    }
    if let Some(source) = &cfg.eval_data {
        let corpus = source.load(cfg.model.in_channels)?;
        let report = corpus.evaluate(&outcome.model, cfg.sigma, cfg.seed)?;
        eprintln!(
            "held-out PSNR {:.3} dB (noisy {:.3} dB, gain {:+.3} dB), SSIM {:.4}",
            report.denoised.mean_psnr_db,
            report.noisy.mean_psnr_db,
            report.gain_db(),
            report.denoised.mean_ssim
        );
        let path = dir.join("eval.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn denoise(model: &Path, input: &Path, output: &Path, clean: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(model)?.model()?;
    let noisy = read_pnm_file(input)?;
    let restored = runtime::denoise_image(&model, &noisy)?;
    write_pnm_file(output, &restored)?;
    if let Some(clean) = clean {
        let clean = to_float(&read_pnm_file(clean)?);
        let before = psnr(&clean, &to_float(&noisy))?;
        let after = psnr(&clean, &to_float(&restored))?;
        println!("input PSNR {before:.3} dB\noutput PSNR {after:.3} dB");
    }
    Ok(())
}

fn eval(model: &Path, data: &Path, sigma: f64, seed: u64, report_path: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(model)?;
    let model = ckpt.model()?;
    let paired = data.join("clean").is_dir() && data.join("noisy").is_dir();
    let source = if paired {
        DataSource::Paired { path: data.into() }
    } else {
        DataSource::Folder { path: data.into() }
    };
    let corpus = source.load(model.config().in_channels)?;
    let report = corpus.evaluate(&model, sigma, seed)?;
    println!("# {}", report.convention);
    match (&corpus, report.sigma) {
        (Corpus::Clean(_), Some(s)) => println!("# sigma {s}"),
        _ => println!("# paired clean/noisy data"),
    }
    println!("image\tnoisy_psnr\tpsnr\tssim");
    for (n, d) in report.noisy.images.iter().zip(&report.denoised.images) {
        println!("{}\t{:.4}\t{:.4}\t{:.5}", d.name, n.psnr_db, d.psnr_db, d.ssim);
    }
    println!(
        "mean\t{:.4}\t{:.4}\t{:.5}",
        report.noisy.mean_psnr_db, report.denoised.mean_psnr_db, report.denoised.mean_ssim
    );
    if let Some(p) = report_path {
        std::fs::write(p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn ablate(config: &Path, report_path: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let table = runtime::run_ablation(&cfg)?;
    print!("{}", table.render());
    if !table.shared_data() {
        bail!("variants did not consume identical training data");
    }
    if let Some(p) = report_path {
        std::fs::write(p, serde_json::to_string_pretty(&table)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let start = Instant::now();
    let results = check::suite(seed)?;
    println!("block\tmax_rel_error\tchecked\tkink_crossings\tstatus");
    for r in &results {
        println!(
            "{}\t{:.3e}\t{}\t{}\t{}",
            r.block,
            r.report.max_rel_error,
            r.report.checked,
            r.report.kink_crossings,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    eprintln!("gradient suite finished in {:.1}s (tolerance {:.0e})", start.elapsed().as_secs_f64(), check::TOLERANCE);
    if let Some(bad) = results.iter().find(|r| !r.passed()) {
        bail!("{} exceeds the gradient tolerance", bad.block);
    }
    Ok(())
}

fn dump_features(model: &Path, input: &Path, stage: FeatureStage, out: &Path) -> Result<()> {
    let model = load_checkpoint(model)?.model()?;
    let image = read_pnm_file(input)?;
    let grid = runtime::dump_features(&model, &image, stage)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{stage}.pgm"));
    write_pnm_file(&path, &grid)?;
    println!("{}", path.display());
    Ok(())
}

fn gen_data(count: usize, size: usize, seed: u64, out: &Path, color: bool) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (images, ext) = if color {
        (data::gen_synthetic_color(count, size, seed), "ppm")
    } else {
        (data::gen_synthetic(count, size, seed), "pgm")
    };
    for (i, img) in images.iter().enumerate() {
        write_pnm_file(&out.join(format!("synthetic{i:03}.{ext}")), img)?;
    }
    println!("wrote {count} images to {}", out.display());
    Ok(())
}
