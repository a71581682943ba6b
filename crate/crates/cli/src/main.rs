use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lrdenoise::bench::{self, BenchSpec};
use lrdenoise::noisest;
use lrdenoise::pipeline::{self, window_for_radius, DenoiseConfig, GeomSource, Mode, SEARCH_RADIUS};
use lrdenoise::{imgio, Image};

#[derive(Parser)]
#[command(name = "lrd", version, about = "Low-rank patch-based image denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Denoise a single 8-bit PGM image.
    Denoise(DenoiseArgs),
    /// Run every (image, noise level, mode) cell over a corpus and report PSNR.
    Bench(BenchArgs),
    /// Estimate the Gaussian noise level of an image from weak-texture patches.
    EstimateNoise(EstimateArgs),
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be a positive number"))
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} must lie in [0, 1]"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be non-negative"))
    }
}

/// Overrides applied on top of the noise-banded defaults.
#[derive(Args, Clone, Default)]
struct Tuning {
    /// Iteration count L (the loop runs L-1 times).
    #[arg(long, short = 'L', value_parser = clap::value_parser!(u64).range(1..))]
    iterations: Option<u64>,
    /// Regularization step towards the noisy input.
    #[arg(long, value_parser = unit_interval)]
    delta: Option<f64>,
    /// High-minus-low feedback step.
    #[arg(long, value_parser = non_negative)]
    eta: Option<f64>,
    /// Residual noise scaling factor.
    #[arg(long, value_parser = positive)]
    gamma: Option<f64>,
    /// Fixed mixing weight between filtered and weak-texture estimates.
    #[arg(long, value_parser = unit_interval)]
    alpha: Option<f64>,
    /// Spectrum split threshold.
    #[arg(long, value_parser = non_negative)]
    tau: Option<f64>,
    /// Weight constant.
    #[arg(long, value_parser = positive)]
    c: Option<f64>,
    /// Division guard in the weights.
    #[arg(long, value_parser = positive)]
    eps: Option<f64>,
    /// Patch side d.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    patch: Option<u64>,
    /// Step between key patches.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    stride: Option<u64>,
    /// Patches per group m.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    matches: Option<u64>,
    /// Search range in pixels on each side of a key patch (30 suits fingerprints).
    #[arg(long, default_value_t = SEARCH_RADIUS as u64)]
    window: u64,
    /// Image for the weak-texture estimate: residual or iterate.
    #[arg(long, value_parser = |s: &str| s.parse::<GeomSource>())]
    geom_source: Option<GeomSource>,
    /// Clamp the noisy input to [0, 255] first.
    #[arg(long)]
    clip_input: bool,
}

impl Tuning {
    fn config(&self, sigma: f64, mode: Mode, seed: u64) -> DenoiseConfig {
        let mut cfg = pipeline::parameter_defaults(sigma);
        cfg.mode = mode;
        cfg.seed = seed;
        if let Some(v) = self.iterations {
            cfg.iterations = v as usize;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        cfg.alpha_override = self.alpha;
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.c {
            cfg.c = v;
        }
        if let Some(v) = self.eps {
            cfg.eps = v;
        }
        if let Some(v) = self.patch {
            cfg.patch.d = v as usize;
        }
        if let Some(v) = self.stride {
            cfg.patch.stride = v as usize;
        }
        if let Some(v) = self.matches {
            cfg.patch.m = v as usize;
        }
        cfg.patch.window = window_for_radius(cfg.patch.d, self.window as usize);
        if let Some(g) = self.geom_source {
            cfg.geom_source = g;
        }
        cfg.clip_input = self.clip_input;
        cfg
    }
}

#[derive(Args)]
struct DenoiseArgs {
    /// Noisy input PGM (clean input when --add-noise is given).
    #[arg(long, short)]
    input: PathBuf,
    /// Noise standard deviation on the 0-255 scale.
    #[arg(long, short, value_parser = positive)]
    sigma: f64,
    #[arg(long, short, default_value = "gwnnm", value_parser = |s: &str| s.parse::<Mode>())]
    mode: Mode,
    /// Output PGM.
    #[arg(long, short, default_value = "denoised.pgm")]
    out: PathBuf,
    /// Corrupt the input with synthetic Gaussian noise of level --sigma first.
    #[arg(long)]
    add_noise: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clean reference; prints the PSNR of the result.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Also write the high and low feedback components (offset by 128).
    #[arg(long)]
    emit_components: bool,
    /// Noise-trace CSV (defaults to <out>_trace.csv).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args)]
struct BenchArgs {
    /// Clean PGM images.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Comma-separated noise levels.
    #[arg(long, required = true, value_delimiter = ',', value_parser = positive)]
    sigmas: Vec<f64>,
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',', default_value = "wnnm,gwnnm", value_parser = |s: &str| s.parse::<Mode>())]
    modes: Vec<Mode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "bench_out")]
    out_dir: PathBuf,
    /// Leave the seconds column empty so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Patch side.
    #[arg(long, default_value_t = 7, value_parser = clap::value_parser!(u64).range(2..))]
    patch: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn with_suffix(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn offset_component(img: &Image) -> Image {
    let mut out = img.clone();
    out.pixels_mut().iter_mut().for_each(|p| *p += 128.0);
    out
}

fn run_denoise(args: &DenoiseArgs) -> Result<()> {
    let input = imgio::load_image(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let noisy = if args.add_noise {
        imgio::add_gaussian_noise(&input, args.sigma, args.seed)
    } else {
        input
    };
    let clean = match &args.clean {
        Some(p) => Some(imgio::load_image(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let config = args.tuning.config(args.sigma, args.mode, args.seed);
    let out = pipeline::denoise(&noisy, &config)?;

    imgio::save_image(&out.image, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let trace_path = args.trace.clone().unwrap_or_else(|| with_suffix(&args.out, "_trace", "csv"));
    let file = fs::File::create(&trace_path).with_context(|| format!("writing {}", trace_path.display()))?;
    pipeline::write_trace_csv(&out.trace, BufWriter::new(file))?;
    if args.emit_components {
        imgio::save_image(&offset_component(&out.high), with_suffix(&args.out, "_high", "pgm"))?;
        imgio::save_image(&offset_component(&out.low), with_suffix(&args.out, "_low", "pgm"))?;
    }
    if let Some(clean) = clean {
        let before = imgio::psnr(&noisy, &clean)?;
        let after = imgio::psnr(&out.image, &clean)?;
        println!("noisy PSNR: {before:.4} dB");
        println!("denoised PSNR: {after:.4} dB");
    }
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let spec = BenchSpec {
        corpus: args.corpus.clone(),
        sigmas: args.sigmas.clone(),
        modes: args.modes.clone(),
        seed: args.seed,
        out_dir: args.out_dir.clone(),
        record_timing: !args.no_timing,
    };
    let report = bench::run_bench(&spec, |sigma, mode| args.tuning.config(sigma, mode, 0))?;
    for row in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: {} sigma={} {}: {}",
            row.image,
            row.sigma,
            row.mode,
            row.error.as_deref().unwrap_or_default()
        );
    }
    print!("{}", report.to_table());
    Ok(())
}

fn run_estimate(args: &EstimateArgs) -> Result<()> {
    let img = imgio::load_image(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let est = noisest::estimate_noise_level(&img, args.patch as usize, args.seed)?;
    if est.fell_back {
        log::warn!("too few weak-texture patches; reporting the all-patch estimate");
    }
    println!("weak-texture sigma: {:.4}", est.sigma);
    println!("all-patch sigma: {:.4}", est.all_patch_sigma);
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LRD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LRD_THREADS='{v}' is not a count"))?;
        if n == 0 {
            bail!("LRD_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match &cli.command {
        Command::Denoise(a) => run_denoise(a),
        Command::Bench(a) => run_bench(a),
        Command::EstimateNoise(a) => run_estimate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
