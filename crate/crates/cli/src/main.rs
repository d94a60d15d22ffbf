use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spmomamba::bench::{self, ScanBench, SpSsmBench, Timing};
use spmomamba::certify;
use spmomamba::io::{load_model, png_read, png_write, save_model, RunConfig};
use spmomamba::metrics::{bicubic_resize, psnr_y, ssim_y, Direction, ImageU8};
use spmomamba::model::{self, Model, ModelConfig};
use spmomamba::superpixel::overlay;
use spmomamba::train::{self, ToyConfig, DEFAULT_LAMBDA_FREQ};
use spmomamba::{Elem, Mode, Tensor};

#[derive(Parser)]
#[command(name = "spmomamba", version, about = "Superpixel mixture-of-experts SSM super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upscale a PNG with a saved model.
    Sr(SrArgs),
    /// Render a superpixel segmentation overlay.
    Superpixels(SuperpixelArgs),
    /// Overfit a model on one HR image and its bicubic LR version.
    TrainToy(TrainToyArgs),
    /// Run the finite-difference gradient certification suite.
    Gradcheck(GradcheckArgs),
    /// Time the recurrent and parallel scans over sequence lengths (CSV).
    BenchScan(BenchScanArgs),
    /// Compare superpixel and per-pixel scan cost for one block (CSV).
    BenchSpssm(BenchSpssmArgs),
    /// Y-channel PSNR and SSIM between two PNGs.
    Metrics(MetricsArgs),
    /// Exact parameter count of a preset.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SrArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
    /// Average the eight flips/rotations.
    #[arg(long)]
    self_ensemble: bool,
}

#[derive(Args)]
struct SuperpixelArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 5)]
    t: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long)]
    hr: PathBuf,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Loss trace CSV (`step,loss`).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "T-mini")]
    preset: String,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_freq: Option<f64>,
    /// TOML run config; explicit flags above still take precedence for steps and seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Save the trained model as an SPMM weights file.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Expert usage CSV (`layer,expert,count`).
    #[arg(long)]
    usage: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to one module (or `module/name`).
    #[arg(long)]
    module: Option<String>,
}

#[derive(Args)]
struct BenchScanArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096, 16384])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    d_state: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 9)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchSpssmArgs {
    #[arg(long, default_value_t = 64)]
    h: usize,
    #[arg(long, default_value_t = 64)]
    w: usize,
    #[arg(long, default_value_t = 1)]
    s: usize,
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 9)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Border cropped from each side before scoring.
    #[arg(long, default_value_t = 0)]
    scale: usize,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    preset: String,
    #[arg(long)]
    scale: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Sr(a) => sr(a),
        Command::Superpixels(a) => superpixels(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::BenchScan(a) => bench_scan(a),
        Command::BenchSpssm(a) => bench_spssm(a),
        Command::Metrics(a) => metrics(a),
        Command::Params(a) => params(a),
    }
}

fn usage_error(msg: impl std::fmt::Display) -> Result<ExitCode> {
    eprintln!("error: {msg}");
    Ok(ExitCode::from(2))
}

fn sr(a: SrArgs) -> Result<ExitCode> {
    let model: Model<Elem> = load_model(&a.weights).with_context(|| format!("loading {}", a.weights.display()))?;
    if model.config.upscale != a.scale {
        bail!("weights are for x{}, not x{}", model.config.upscale, a.scale);
    }
    let img = png_read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let lr: Tensor<Elem> = img.to_tensor();
    let sr = if a.self_ensemble {
        model.self_ensemble(&lr)?
    } else {
        model.forward(&lr, Mode::Infer, 0)?
    };
    png_write(&a.out, &ImageU8::from_tensor(&sr)?)?;
    Ok(ExitCode::SUCCESS)
}

fn superpixels(a: SuperpixelArgs) -> Result<ExitCode> {
    let img = png_read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let seg = overlay::segment(&img, a.m, a.t)?;
    png_write(&a.out, &overlay::render(&img, &seg)?)?;
    Ok(ExitCode::SUCCESS)
}

fn train_toy(a: TrainToyArgs) -> Result<ExitCode> {
    let run_cfg = match &a.config {
        Some(p) => Some(RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let config = match &run_cfg {
        Some(r) if r.scale != a.scale => bail!("config scale {} disagrees with --scale {}", r.scale, a.scale),
        Some(r) => r.model_config()?,
        None => ModelConfig::preset(&a.preset, a.scale)?,
    };
    let defaults = ToyConfig::default();
    let toy = ToyConfig {
        steps: a.steps,
        seed: a.seed,
        lr: a.lr.or(run_cfg.as_ref().map(|r| r.train.lr)).unwrap_or(defaults.lr),
        lambda_freq: a
            .lambda_freq
            .or(run_cfg.as_ref().map(|r| r.train.lambda_freq))
            .unwrap_or(DEFAULT_LAMBDA_FREQ),
    };
    let img = png_read(&a.hr).with_context(|| format!("reading {}", a.hr.display()))?;
    let full: Tensor<Elem> = img.to_tensor();
    let (h, w) = (img.height / a.scale * a.scale, img.width / a.scale * a.scale);
    if h == 0 || w == 0 {
        bail!("{}x{} image is smaller than the scale factor", img.height, img.width);
    }
    let hr = full.narrow(2, 0, h)?.narrow(3, 0, w)?;
    let lr = bicubic_resize(&hr, a.scale, Direction::Down)?;

    let mut model = Model::<Elem>::build(config, toy.seed)?;
    let trace = train::train_toy(&mut model, &lr, &hr, &toy)?;
    if let Some(p) = &a.trace {
        std::fs::write(p, trace.to_csv())?;
    }
    if let Some(p) = &a.usage {
        std::fs::write(p, trace.usage.to_csv())?;
    }
    if let Some(p) = &a.save {
        save_model(&model, p)?;
    }
    if let (Some(first), Some(last)) = (trace.losses.first(), trace.losses.last()) {
        println!("initial loss: {first:.6}");
        println!("final loss: {last:.6}");
        println!("ratio: {:.4}", last / first);
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let checks = certify::select(a.module.as_deref());
    if checks.is_empty() {
        return usage_error(format!(
            "unknown module `{}` (available: {})",
            a.module.unwrap_or_default(),
            certify::modules().join(", ")
        ));
    }
    let mut ok = true;
    let mut out = std::io::stdout().lock();
    for c in checks {
        match c.run() {
            Ok(r) => {
                let pass = r.passes(certify::TOLERANCE);
                ok &= pass;
                writeln!(
                    out,
                    "{} {:<40} max_rel_err={:.3e} coords={}",
                    if pass { "PASS" } else { "FAIL" },
                    c.id(),
                    r.max_rel_err,
                    r.checked
                )?;
            }
            Err(e) => {
                ok = false;
                writeln!(out, "FAIL {:<40} {e}", c.id())?;
            }
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn timing(trials: usize, threads: usize) -> Timing {
    Timing {
        trials,
        threads,
        ..Timing::default()
    }
}

fn bench_scan(a: BenchScanArgs) -> Result<ExitCode> {
    let cfg = ScanBench {
        lengths: a.lengths,
        d_state: a.d_state,
        channels: a.channels,
        timing: timing(a.trials, a.threads),
        seed: a.seed,
    };
    let report = bench::bench_scan::<Elem>(&cfg)?;
    print!("{}", report.to_csv());
    if cfg.lengths.len() >= 2 {
        let (slope, r2) = bench::recurrent_scaling(&report)?;
        eprintln!("recurrent log-log slope {slope:.3}, r2 {r2:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_spssm(a: BenchSpssmArgs) -> Result<ExitCode> {
    let mut cfg = SpSsmBench::new(a.h, a.w, a.s, a.m);
    cfg.channels = a.channels;
    cfg.timing = timing(a.trials, a.threads);
    print!("{}", bench::bench_spssm::<Elem>(&cfg)?.to_csv());
    Ok(ExitCode::SUCCESS)
}

fn metrics(a: MetricsArgs) -> Result<ExitCode> {
    let x = png_read(&a.a).with_context(|| format!("reading {}", a.a.display()))?;
    let y = png_read(&a.b).with_context(|| format!("reading {}", a.b.display()))?;
    if (x.height, x.width) != (y.height, y.width) {
        bail!("image sizes differ: {}x{} vs {}x{}", x.height, x.width, y.height, y.width);
    }
    let p = psnr_y(&x, &y, a.scale)?;
    let s = ssim_y(&x, &y, a.scale)?;
    if p.is_infinite() {
        println!("PSNR: inf dB");
    } else {
        println!("PSNR: {p:.2} dB");
    }
    println!("SSIM: {s:.4}");
    Ok(ExitCode::SUCCESS)
}

fn params(a: ParamsArgs) -> Result<ExitCode> {
    let cfg = match ModelConfig::preset(&a.preset, a.scale) {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    println!("{}", model::param_count(&cfg));
    Ok(ExitCode::SUCCESS)
}
