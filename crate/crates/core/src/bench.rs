//! Corpus benchmarking: synthesize noise, denoise every (image, σ, mode)
//! cell and collect PSNR into a CSV report.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imgio::{self, Image};
use crate::pipeline::{self, DenoiseConfig, Mode};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error("every benchmark cell failed")]
    AllFailed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub corpus: Vec<PathBuf>,
    pub sigmas: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Write wall-clock seconds; disable for byte-reproducible reports.
    pub record_timing: bool,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.corpus.is_empty() {
            return Err(BenchError::InvalidSpec("empty corpus".into()));
        }
        if self.sigmas.is_empty() {
            return Err(BenchError::InvalidSpec("no noise levels".into()));
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(BenchError::InvalidSpec(format!("noise level {s} must be positive")));
        }
        if self.modes.is_empty() {
            return Err(BenchError::InvalidSpec("no modes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub image: String,
    pub sigma: f64,
    pub mode: Mode,
    /// PSNR of the unclamped output against the clean image.
    pub psnr: Option<f64>,
    /// PSNR after clamping the output to `[0, 255]`.
    pub psnr_clamped: Option<f64>,
    pub seconds: Option<f64>,
    pub trace_path: Option<PathBuf>,
    pub output_path: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

fn derive_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Seed of the synthetic noise for an (image, σ) pair. Shared by all modes so
/// they denoise the same realization.
pub fn noise_seed(master: u64, image: &str, sigma: f64) -> u64 {
    derive_seed(&[&master.to_string(), image, &sigma.to_string()])
}

/// Seed handed to the denoiser for one (image, σ, mode) cell.
pub fn cell_seed(master: u64, image: &str, sigma: f64, mode: Mode) -> u64 {
    derive_seed(&[&master.to_string(), image, &sigma.to_string(), mode.as_str()])
}

fn image_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cell_stem(image: &str, sigma: f64, mode: Mode) -> String {
    format!("{image}_s{sigma}_{mode}")
}

struct Cell<'a> {
    image: &'a str,
    clean: &'a Result<Image, String>,
    sigma: f64,
    mode: Mode,
}

/// Runs every cell; `configure` builds the denoiser configuration for a
/// (σ, mode) pair (its seed is replaced by the cell seed).
pub fn run_bench<F>(spec: &BenchSpec, configure: F) -> Result<BenchReport, BenchError>
where
    F: Fn(f64, Mode) -> DenoiseConfig + Sync,
{
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;
    let images: Vec<(String, Result<Image, String>)> = spec
        .corpus
        .iter()
        .map(|p| {
            let loaded = imgio::load_image(p).map_err(|e| format!("{}: {e}", p.display()));
            if let Err(e) = &loaded {
                log::warn!("skipping unreadable image {e}");
            }
            (image_name(p), loaded)
        })
        .collect();

    let mut cells = Vec::new();
    for (name, clean) in &images {
        for &sigma in &spec.sigmas {
            for &mode in &spec.modes {
                cells.push(Cell {
                    image: name,
                    clean,
                    sigma,
                    mode,
                });
            }
        }
    }

    let rows: Vec<BenchRow> = cells
        .par_iter()
        .map(|cell| run_cell(spec, cell, &configure))
        .collect();
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(BenchError::AllFailed);
    }
    let report = BenchReport { rows };
    report.write_csv(spec.out_dir.join("bench.csv"), spec.record_timing)?;
    Ok(report)
}

fn run_cell<F>(spec: &BenchSpec, cell: &Cell<'_>, configure: &F) -> BenchRow
where
    F: Fn(f64, Mode) -> DenoiseConfig,
{
    let mut row = BenchRow {
        image: cell.image.to_string(),
        sigma: cell.sigma,
        mode: cell.mode,
        psnr: None,
        psnr_clamped: None,
        seconds: None,
        trace_path: None,
        output_path: None,
        error: None,
    };
    let clean = match cell.clean {
        Ok(img) => img,
        Err(e) => {
            row.error = Some(e.clone());
            return row;
        }
    };
    let noisy = imgio::add_gaussian_noise(clean, cell.sigma, noise_seed(spec.seed, cell.image, cell.sigma));
    let mut config = configure(cell.sigma, cell.mode);
    config.sigma_n = cell.sigma;
    config.mode = cell.mode;
    config.seed = cell_seed(spec.seed, cell.image, cell.sigma, cell.mode);

    let started = Instant::now();
    let result = pipeline::denoise(&noisy, &config);
    let elapsed = started.elapsed().as_secs_f64();
    let out = match result {
        Ok(out) => out,
        Err(e) => {
            log::warn!("{} sigma={} {}: {e}", cell.image, cell.sigma, cell.mode);
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.psnr = imgio::psnr(&out.image, clean).ok();
    row.psnr_clamped = imgio::psnr(&out.image.clamped(), clean).ok();
    row.seconds = Some(elapsed);

    let stem = cell_stem(cell.image, cell.sigma, cell.mode);
    let image_path = spec.out_dir.join(format!("{stem}.pgm"));
    let trace_path = spec.out_dir.join(format!("{stem}_trace.csv"));
    let written = imgio::save_image(&out.image, &image_path)
        .map_err(|e| e.to_string())
        .and_then(|_| {
            let file = fs::File::create(&trace_path).map_err(|e| e.to_string())?;
            pipeline::write_trace_csv(&out.trace, io::BufWriter::new(file)).map_err(|e| e.to_string())
        });
    match written {
        Ok(()) => {
            row.output_path = Some(image_path);
            row.trace_path = Some(trace_path);
        }
        Err(e) => row.error = Some(e),
    }
    log::info!(
        "{} sigma={} {}: {:.2} dB in {:.1}s",
        cell.image,
        cell.sigma,
        cell.mode,
        row.psnr.unwrap_or(f64::NAN),
        elapsed
    );
    row
}

fn fmt_db(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

impl BenchReport {
    /// CSV with header `image,sigma,mode,psnr,psnr_clamped,seconds,status`.
    /// The `seconds` column is left empty when `timing` is off.
    pub fn to_csv(&self, timing: bool) -> Result<Vec<u8>, BenchError> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        wtr.write_record(["image", "sigma", "mode", "psnr", "psnr_clamped", "seconds", "status"])?;
        for r in &self.rows {
            let seconds = match (timing, r.seconds) {
                (true, Some(s)) => format!("{s:.3}"),
                _ => String::new(),
            };
            let status = r.error.clone().unwrap_or_else(|| "ok".into());
            wtr.write_record([
                r.image.clone(),
                r.sigma.to_string(),
                r.mode.to_string(),
                fmt_db(r.psnr),
                fmt_db(r.psnr_clamped),
                seconds,
                status,
            ])?;
        }
        wtr.into_inner().map_err(|e| BenchError::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, timing: bool) -> Result<(), BenchError> {
        fs::write(path, self.to_csv(timing)?)?;
        Ok(())
    }

    pub fn psnr_of(&self, image: &str, sigma: f64, mode: Mode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.image == image && r.sigma == sigma && r.mode == mode)
            .and_then(|r| r.psnr)
    }

    /// Images as rows, one column per (σ, mode) pair, PSNR to 2 d.p.
    pub fn to_table(&self) -> String {
        let mut columns: Vec<(f64, Mode)> = Vec::new();
        let mut images: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !columns.iter().any(|&(s, m)| s == r.sigma && m == r.mode) {
                columns.push((r.sigma, r.mode));
            }
            if !images.contains(&r.image.as_str()) {
                images.push(&r.image);
            }
        }
        let width = images.iter().map(|s| s.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:width$}", "image");
        for (s, m) in &columns {
            let _ = write!(out, " | {:>11}", format!("s={s} {}", m.as_str().to_uppercase()));
        }
        out.push('\n');
        out.push_str(&"-".repeat(width + columns.len() * 14));
        out.push('\n');
        for img in images {
            let _ = write!(out, "{img:width$}");
            for &(s, m) in &columns {
                let cell = self.psnr_of(img, s, m).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
                let _ = write!(out, " | {cell:>11}");
            }
            out.push('\n');
        }
        out
    }
}
