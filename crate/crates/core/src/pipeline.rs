//! Iterative low-rank denoising: regularization with edge/texture feedback,
//! per-group spectral shrinkage and triple aggregation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::imgio::{Image, ImageError};
use crate::lowrank::{self, LowRankError, Mat, SvdFactors};
use crate::noisest::{self, NoiseError, NoiseState};
use crate::patchgrid::{self, Aggregator, PatchError, PatchMatrix, PatchRef, PatchSpec};

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// Shrinkage rule applied to every patch group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    /// One soft threshold for every singular value.
    Nnm,
    /// Reweighted thresholds, filtered-noise residual estimate.
    Wnnm,
    /// Reweighted thresholds, geometry-aware residual estimate and
    /// high/low spectrum feedback.
    Gwnnm,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Nnm, Mode::Wnnm, Mode::Gwnnm];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Nnm => "nnm",
            Mode::Wnnm => "wnnm",
            Mode::Gwnnm => "gwnnm",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nnm" => Ok(Mode::Nnm),
            "wnnm" => Ok(Mode::Wnnm),
            "gwnnm" => Ok(Mode::Gwnnm),
            other => Err(format!("unknown mode '{other}' (expected nnm, wnnm or gwnnm)")),
        }
    }
}

/// Image on which the weak-texture noise level is measured each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeomSource {
    /// The removed component `y − y^(k)`.
    Residual,
    /// The current iterate `y^(k)` itself.
    Iterate,
}

impl FromStr for GeomSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "residual" => Ok(GeomSource::Residual),
            "iterate" => Ok(GeomSource::Iterate),
            other => Err(format!("unknown geometry source '{other}' (expected residual or iterate)")),
        }
    }
}

/// Default search range around each key patch, in pixels per direction.
pub const SEARCH_RADIUS: usize = 15;
/// Search range used for pseudo-periodic images such as fingerprints.
pub const PERIODIC_SEARCH_RADIUS: usize = 30;

/// Search-window side covering `radius` pixel offsets on each side of a
/// `d × d` key patch.
pub fn window_for_radius(d: usize, radius: usize) -> usize {
    d + 2 * radius
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    /// Known standard deviation of the additive noise.
    pub sigma_n: f64,
    pub mode: Mode,
    /// `L`; the outer loop runs `L − 1` times.
    pub iterations: usize,
    /// Step towards the noisy input in the regularization step.
    pub delta: f64,
    /// Step of the high-minus-low feedback. Only used in GWNNM mode.
    pub eta: f64,
    /// Residual-noise scaling factor.
    pub gamma: f64,
    /// Replaces the noise-level rule for the mixing weight (GWNNM mode).
    pub alpha_override: Option<f64>,
    /// Spectrum split threshold; values strictly above go to the high part.
    pub tau: f64,
    /// Weight constant.
    pub c: f64,
    /// Division guard in the weights.
    pub eps: f64,
    pub patch: PatchSpec,
    pub seed: u64,
    /// Clamp the noisy input to `[0, 255]` before denoising.
    pub clip_input: bool,
    pub geom_source: GeomSource,
}

/// Patch side, group size and `L` for a noise level.
pub fn noise_band(sigma_n: f64) -> (usize, usize, usize) {
    if sigma_n <= 20.0 {
        (6, 70, 8)
    } else if sigma_n <= 40.0 {
        (7, 90, 12)
    } else if sigma_n <= 60.0 {
        (8, 120, 14)
    } else {
        (9, 140, 14)
    }
}

/// Defaults banded by noise level, GWNNM mode.
pub fn parameter_defaults(sigma_n: f64) -> DenoiseConfig {
    let (d, m, iterations) = noise_band(sigma_n);
    DenoiseConfig {
        sigma_n,
        mode: Mode::Gwnnm,
        iterations,
        delta: 0.1,
        eta: 0.01,
        gamma: 0.6,
        alpha_override: None,
        tau: 0.5,
        c: 2.0 * 2f64.sqrt(),
        eps: 1e-16,
        patch: PatchSpec {
            d,
            stride: 4,
            m,
            window: window_for_radius(d, SEARCH_RADIUS),
        },
        seed: 0,
        clip_input: false,
        geom_source: GeomSource::Residual,
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<(), DenoiseError> {
        let bad = |msg: String| Err(DenoiseError::InvalidConfig(msg));
        if !(self.sigma_n > 0.0 && self.sigma_n.is_finite()) {
            return bad(format!("sigma_n must be positive, got {}", self.sigma_n));
        }
        if self.iterations < 1 {
            return bad("iteration count L must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return bad(format!("delta {} outside [0, 1]", self.delta));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be non-negative", self.eta));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be positive", self.gamma));
        }
        if let Some(a) = self.alpha_override {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("alpha {a} outside [0, 1]"));
            }
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be non-negative", self.tau));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad(format!("c {} must be positive", self.c));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        self.patch.validate()?;
        Ok(())
    }

    /// Mixing weight in effect: the override or the noise-level rule in GWNNM
    /// mode, and 1 (filtered-noise estimate only) otherwise.
    pub fn alpha(&self) -> f64 {
        match self.mode {
            Mode::Gwnnm => self.alpha_override.unwrap_or_else(|| noisest::alpha_for(self.sigma_n)),
            Mode::Nnm | Mode::Wnnm => 1.0,
        }
    }

    /// Feedback step in effect; zero outside GWNNM mode.
    pub fn effective_eta(&self) -> f64 {
        match self.mode {
            Mode::Gwnnm => self.eta,
            Mode::Nnm | Mode::Wnnm => 0.0,
        }
    }
}

/// `y_k + δ·(y − y_k) + η·(y_high − y_low)`, per pixel.
pub fn regularize_step(
    y: &Image,
    y_k: &Image,
    y_high: &Image,
    y_low: &Image,
    delta: f64,
    eta: f64,
) -> Result<Image, ImageError> {
    y.check_dims(y_k)?;
    y.check_dims(y_high)?;
    y.check_dims(y_low)?;
    let pixels = y
        .pixels()
        .iter()
        .zip(y_k.pixels())
        .zip(y_high.pixels().iter().zip(y_low.pixels()))
        .map(|((&yv, &kv), (&hv, &lv))| kv + delta * (yv - kv) + eta * (hv - lv))
        .collect();
    Image::new(y.width(), y.height(), pixels)
}

/// Singular-value bookkeeping for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkOutcome {
    /// Shrunk values.
    pub shrunk: Vec<f64>,
    /// Thresholds that were subtracted.
    pub weights: Vec<f64>,
    /// Noise-adjusted signal singular value estimates.
    pub adjusted: Vec<f64>,
}

/// Low-rank estimate of one patch group.
#[derive(Debug, Clone)]
pub struct GroupEstimate {
    pub refs: Vec<PatchRef>,
    /// Column-wise mean patch removed before the SVD.
    pub mean: Vec<f64>,
    /// `mean + U·diag(shrunk)·Vᵀ`, one estimated patch per column.
    pub full: Mat,
    /// `U·diag(high)·Vᵀ` (zero-mean structure part).
    pub high: Mat,
    /// `U·diag(low)·Vᵀ` (zero-mean detail part).
    pub low: Mat,
    pub spectrum: Vec<f64>,
    pub shrink: ShrinkOutcome,
}

/// Soft threshold used in NNM mode: the largest singular value expected
/// from a pure-noise group of the same shape.
pub fn nnm_threshold(sigma_hat: f64, rows: usize, cols: usize) -> f64 {
    sigma_hat * ((rows as f64).sqrt() + (cols as f64).sqrt())
}

/// Shrinks the centered spectrum of one group.
pub fn shrink_spectrum(sigma: &[f64], m: usize, rows: usize, sigma_hat: f64, config: &DenoiseConfig) -> ShrinkOutcome {
    let adjusted = lowrank::adjust_singulars(sigma, m, sigma_hat);
    match config.mode {
        Mode::Nnm => {
            let theta = nnm_threshold(sigma_hat, rows, m);
            ShrinkOutcome {
                shrunk: lowrank::nnm_shrink(sigma, theta),
                weights: vec![theta; sigma.len()],
                adjusted,
            }
        }
        Mode::Wnnm | Mode::Gwnnm => {
            // thresholds carry the data-term scale 2σ̂²
            let scale = 2.0 * sigma_hat * sigma_hat;
            let weights: Vec<f64> = lowrank::wnnm_weights(&adjusted, config.c, m, config.eps)
                .into_iter()
                .map(|w| scale * w)
                .collect();
            let shrunk = lowrank::wnnm_shrink(sigma, &weights).expect("weights sized from sigma");
            ShrinkOutcome {
                shrunk,
                weights,
                adjusted,
            }
        }
    }
}

/// Estimates one group: center, SVD, shrink, split at `tau`, recompose.
pub fn process_patch(matrix: &PatchMatrix, sigma_hat: f64, config: &DenoiseConfig) -> Result<GroupEstimate, DenoiseError> {
    let data = &matrix.data;
    let rows = data.rows();
    let m = data.cols();
    let mut mean = vec![0.0; rows];
    for j in 0..m {
        for (acc, v) in mean.iter_mut().zip(data.col(j)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let centered = Mat::from_fn(rows, m, |i, j| data.get(i, j) - mean[i]);

    let factors: SvdFactors = lowrank::svd(&centered)?;
    let shrink = shrink_spectrum(&factors.sigma, m, rows, sigma_hat, config);
    let (high_vals, low_vals) = lowrank::split_spectrum(&shrink.shrunk, config.tau);

    let mut full = lowrank::recompose(&factors, &shrink.shrunk)?;
    for j in 0..m {
        for (v, mu) in full.col_mut(j).iter_mut().zip(&mean) {
            *v += mu;
        }
    }
    let high = lowrank::recompose(&factors, &high_vals)?;
    let low = lowrank::recompose(&factors, &low_vals)?;
    Ok(GroupEstimate {
        refs: matrix.refs.clone(),
        mean,
        full,
        high,
        low,
        spectrum: factors.sigma,
        shrink,
    })
}

/// Images carried between outer iterations.
#[derive(Debug, Clone)]
pub struct IterationState {
    /// Noisy input (after optional clipping); never modified.
    pub y: Image,
    pub y_k: Image,
    pub y_low: Image,
    pub y_high: Image,
    pub noise: NoiseState,
    /// Index of `y_k`; starts at 1.
    pub k: usize,
}

impl IterationState {
    pub fn new(y: Image, config: &DenoiseConfig) -> Self {
        Self {
            y_k: y.clone(),
            y_low: y.clone(),
            y_high: y.clone(),
            noise: NoiseState::initial(config.sigma_n, config.gamma, config.alpha()),
            y,
            k: 1,
        }
    }

    /// Residual noise estimate for denoising `regularized`.
    fn estimate_noise(&self, regularized: &Image, config: &DenoiseConfig) -> Result<NoiseState, DenoiseError> {
        let alpha = config.alpha();
        if self.k == 1 {
            return Ok(NoiseState::initial(config.sigma_n, config.gamma, alpha));
        }
        let sigma_n = config.sigma_n;
        let sigma_flt = noisest::filtered_noise_std(&self.y, regularized)?;
        let sigma_res = noisest::residual_std(sigma_n, sigma_flt, config.gamma);
        let (sigma_geom, sigma_res_geom) = if alpha < 1.0 {
            let source = match config.geom_source {
                GeomSource::Residual => difference(&self.y, regularized)?,
                GeomSource::Iterate => regularized.clone(),
            };
            match noisest::weak_texture_sigma(&source, config.patch.d, config.seed) {
                Ok(geom) => (geom, noisest::geometric_residual_std(sigma_n, geom, config.gamma)),
                Err(NoiseError::TooFewPatches { found, .. }) => {
                    log::warn!("weak-texture estimate unavailable ({found} patches); using filtered noise");
                    (sigma_flt, sigma_res)
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            (sigma_flt, sigma_res)
        };
        Ok(NoiseState {
            sigma_n,
            sigma_flt,
            sigma_res,
            sigma_geom,
            sigma_res_geom,
            sigma_hat: noisest::combined_estimate(sigma_res, sigma_res_geom, alpha),
            gamma: config.gamma,
            alpha,
        })
    }

    /// Runs one outer iteration, producing `y^(k+1)` and its components.
    pub fn advance(&mut self, config: &DenoiseConfig) -> Result<(), DenoiseError> {
        let regularized = regularize_step(
            &self.y,
            &self.y_k,
            &self.y_high,
            &self.y_low,
            config.delta,
            config.effective_eta(),
        )?;
        let noise = self.estimate_noise(&regularized, config)?;
        if noise.sigma_hat > self.noise.sigma_hat && self.k > 1 {
            log::debug!(
                "residual estimate rose from {:.4} to {:.4} at iteration {}",
                self.noise.sigma_hat,
                noise.sigma_hat,
                self.k
            );
        }

        let spec = config.patch;
        let keys = patchgrid::key_patch_grid(&regularized, &spec)?;
        let (w, h) = (regularized.width(), regularized.height());
        let mut full = Aggregator::new(w, h, spec.d);
        let mut high = Aggregator::new(w, h, spec.d);
        let mut low = Aggregator::new(w, h, spec.d);

        // groups are computed in parallel and folded in key order
        const CHUNK: usize = 64;
        for chunk in keys.chunks(CHUNK) {
            let groups: Vec<GroupEstimate> = chunk
                .par_iter()
                .map(|&key| {
                    let matrix = patchgrid::block_match(&regularized, key, &spec)?;
                    process_patch(&matrix, noise.sigma_hat, config)
                })
                .collect::<Result<_, DenoiseError>>()?;
            for g in &groups {
                for (j, &at) in g.refs.iter().enumerate() {
                    full.add(at, g.full.col(j), 1.0)?;
                    high.add(at, g.high.col(j), 1.0)?;
                    low.add(at, g.low.col(j), 1.0)?;
                }
            }
        }

        let zeros = Image::filled(w, h, 0.0);
        self.y_k = full.finish(&regularized)?;
        self.y_high = high.finish(&zeros)?;
        self.y_low = low.finish(&zeros)?;
        self.noise = noise;
        self.k += 1;
        log::info!(
            "iteration {}: sigma_flt={:.4} sigma_geom={:.4} sigma_hat={:.4}",
            self.k,
            noise.sigma_flt,
            noise.sigma_geom,
            noise.sigma_hat
        );
        Ok(())
    }
}

fn difference(a: &Image, b: &Image) -> Result<Image, ImageError> {
    a.check_dims(b)?;
    let pixels = a.pixels().iter().zip(b.pixels()).map(|(x, y)| x - y).collect();
    Image::new(a.width(), a.height(), pixels)
}

/// Noise state used to produce iterate `iteration + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub noise: NoiseState,
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    /// `y^(L)`.
    pub image: Image,
    pub high: Image,
    pub low: Image,
    pub trace: Vec<IterationRecord>,
}

/// Denoises `y` with `L − 1` outer iterations.
pub fn denoise(y: &Image, config: &DenoiseConfig) -> Result<DenoiseOutput, DenoiseError> {
    config.validate()?;
    let d = config.patch.d;
    if y.width() < d || y.height() < d {
        return Err(PatchError::ImageTooSmall {
            width: y.width(),
            height: y.height(),
            d,
        }
        .into());
    }
    let input = if config.clip_input { y.clamped() } else { y.clone() };
    let mut state = IterationState::new(input, config);
    let mut trace = Vec::with_capacity(config.iterations.saturating_sub(1));
    while state.k < config.iterations {
        let k = state.k;
        state.advance(config)?;
        trace.push(IterationRecord {
            iteration: k,
            noise: state.noise,
        });
    }
    Ok(DenoiseOutput {
        image: state.y_k,
        high: state.y_high,
        low: state.y_low,
        trace,
    })
}

/// Writes the noise trace as CSV (one row per outer iteration).
pub fn write_trace_csv<W: std::io::Write>(trace: &[IterationRecord], out: W) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    wtr.write_record([
        "iteration",
        "sigma_n",
        "sigma_flt",
        "sigma_res",
        "sigma_geom",
        "sigma_res_geom",
        "sigma_hat",
        "gamma",
        "alpha",
    ])?;
    for rec in trace {
        let n = rec.noise;
        wtr.write_record(
            std::iter::once(rec.iteration.to_string()).chain(
                [
                    n.sigma_n,
                    n.sigma_flt,
                    n.sigma_res,
                    n.sigma_geom,
                    n.sigma_res_geom,
                    n.sigma_hat,
                    n.gamma,
                    n.alpha,
                ]
                .iter()
                .map(|v| format!("{v:.6}")),
            ),
        )?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::add_gaussian_noise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(sigma: f64, mode: Mode) -> DenoiseConfig {
        let mut cfg = parameter_defaults(sigma);
        cfg.mode = mode;
        cfg.iterations = 3;
        cfg.patch = PatchSpec { d: 5, stride: 3, m: 16, window: 15 };
        cfg
    }

    #[test]
    fn defaults_follow_bands() {
        let cfg = parameter_defaults(50.0);
        assert_eq!(cfg.alpha(), 0.8);
        assert_eq!((cfg.eta, cfg.tau, cfg.eps), (0.01, 0.5, 1e-16));
        assert_eq!((cfg.patch.d, cfg.patch.m, cfg.iterations), (8, 120, 14));
        assert_eq!(cfg.patch.window, 38);
        assert_eq!(parameter_defaults(10.0).alpha(), 0.9);
        assert_eq!(noise_band(20.0), (6, 70, 8));
        assert_eq!(noise_band(40.0), (7, 90, 12));
        assert_eq!(noise_band(100.0), (9, 140, 14));
        assert!((parameter_defaults(30.0).c - 2.0 * 2f64.sqrt()).abs() < 1e-15);
        for s in [5.0, 25.0, 45.0, 75.0] {
            parameter_defaults(s).validate().unwrap();
        }
    }

    #[test]
    fn ablation_modes_pin_alpha_and_eta() {
        let mut cfg = parameter_defaults(50.0);
        cfg.mode = Mode::Wnnm;
        cfg.alpha_override = Some(0.3);
        assert_eq!((cfg.alpha(), cfg.effective_eta()), (1.0, 0.0));
        cfg.mode = Mode::Gwnnm;
        assert_eq!((cfg.alpha(), cfg.effective_eta()), (0.3, 0.01));
    }

    #[test]
    fn config_validation() {
        let base = parameter_defaults(30.0);
        let cases: [fn(&mut DenoiseConfig); 8] = [
            |c| c.sigma_n = -5.0,
            |c| c.iterations = 0,
            |c| c.delta = 1.5,
            |c| c.eta = -0.1,
            |c| c.tau = -1.0,
            |c| c.eps = 0.0,
            |c| c.alpha_override = Some(1.2),
            |c| c.patch.window = 2,
        ];
        for mutate in cases {
            let mut cfg = base.clone();
            mutate(&mut cfg);
            assert!(matches!(cfg.validate(), Err(DenoiseError::InvalidConfig(_)) | Err(DenoiseError::Patch(_))));
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("GWNNM".parse::<Mode>().unwrap(), Mode::Gwnnm);
        assert_eq!("nnm".parse::<Mode>().unwrap(), Mode::Nnm);
        assert!("bm3d".parse::<Mode>().is_err());
        assert_eq!(Mode::Wnnm.to_string(), "wnnm");
    }

    #[test]
    fn regularize_examples() {
        let y = Image::new(2, 2, vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let yk = Image::new(2, 2, vec![12.0, 18.0, 33.0, 35.0]).unwrap();
        let hi = Image::new(2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let lo = Image::new(2, 2, vec![0.0, 1.0, -0.5, 2.0]).unwrap();
        assert_eq!(regularize_step(&y, &yk, &hi, &lo, 0.0, 0.0).unwrap(), yk);
        assert_eq!(regularize_step(&y, &yk, &hi, &lo, 1.0, 0.0).unwrap(), y);
        let out = regularize_step(&y, &yk, &hi, &lo, 0.1, 0.01).unwrap();
        let want = [
            12.0 + 0.1 * (10.0 - 12.0) + 0.01 * (1.0 - 0.0),
            18.0 + 0.1 * (20.0 - 18.0) + 0.01 * (-2.0 - 1.0),
            33.0 + 0.1 * (30.0 - 33.0) + 0.01 * (0.5 + 0.5),
            35.0 + 0.1 * (40.0 - 35.0) + 0.01 * (4.0 - 2.0),
        ];
        for (got, w) in out.pixels().iter().zip(want) {
            assert!((got - w).abs() < 1e-12);
        }
        assert!(regularize_step(&y, &Image::filled(1, 1, 0.0), &hi, &lo, 0.1, 0.0).is_err());
    }

    fn matrix_from(data: Mat) -> PatchMatrix {
        let refs = (0..data.cols()).map(|j| PatchRef::new(0, j)).collect();
        PatchMatrix { data, refs, key: PatchRef::new(0, 0) }
    }

    #[test]
    fn clean_rank_one_is_a_fixed_point() {
        let u: Vec<f64> = (0..25).map(|i| 50.0 + (i as f64 * 0.7).sin() * 20.0).collect();
        let v: Vec<f64> = (0..16).map(|j| 1.0 + 0.05 * j as f64).collect();
        let m = Mat::from_fn(25, 16, |i, j| u[i] * v[j]);
        let cfg = small_config(30.0, Mode::Gwnnm);
        let est = process_patch(&matrix_from(m.clone()), 0.0, &cfg).unwrap();
        assert!(est.full.sub(&m).frobenius_norm() <= 1e-8 * m.frobenius_norm());
        assert!(est.low.frobenius_norm() < 1e-8);
    }

    #[test]
    fn zero_group_gives_zero_estimates() {
        let cfg = small_config(30.0, Mode::Gwnnm);
        let est = process_patch(&matrix_from(Mat::zeros(25, 16)), 12.0, &cfg).unwrap();
        for part in [&est.full, &est.high, &est.low] {
            assert!(part.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn high_and_low_partition_the_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Mat::from_fn(25, 2, |_, _| rng.random_range(-40.0..40.0));
        let b = Mat::from_fn(2, 16, |_, _| rng.random_range(-1.0..1.0));
        let noisy = Mat::from_fn(25, 16, |i, j| a.matmul(&b).get(i, j) + rng.random_range(-3.0..3.0));
        let mut cfg = small_config(30.0, Mode::Gwnnm);
        cfg.tau = 5.0;
        let est = process_patch(&matrix_from(noisy), 2.0, &cfg).unwrap();
        let mean = Mat::from_fn(25, 16, |i, _| est.mean[i]);
        let parts = mean.add(&est.high).add(&est.low);
        assert!(parts.sub(&est.full).frobenius_norm() <= 1e-10);
        assert!(est.low.frobenius_norm() > 0.0);
        assert!(est.shrink.shrunk.iter().zip(&est.spectrum).all(|(s, l)| *s <= *l && *s >= 0.0));
    }

    #[test]
    fn nnm_matches_wnnm_with_constant_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma: Vec<f64> = {
            let mut v: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..300.0)).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v
        };
        let cfg = small_config(30.0, Mode::Nnm);
        let out = shrink_spectrum(&sigma, 16, 25, 7.0, &cfg);
        let theta = nnm_threshold(7.0, 25, 16);
        assert_eq!(out.shrunk, lowrank::wnnm_shrink(&sigma, &[theta; 10]).unwrap());
    }

    #[test]
    fn denoise_is_deterministic_and_improves() {
        let clean = Image::from_fn(40, 40, |r, c| 80.0 + 60.0 * (((r / 8) + (c / 8)) % 2) as f64);
        let noisy = add_gaussian_noise(&clean, 30.0, 2);
        let cfg = small_config(30.0, Mode::Gwnnm);
        let a = denoise(&noisy, &cfg).unwrap();
        let b = denoise(&noisy, &cfg).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 2);
        assert_eq!(a.trace[0].noise.sigma_hat, 30.0);
        let before = crate::imgio::psnr(&noisy, &clean).unwrap();
        let after = crate::imgio::psnr(&a.image, &clean).unwrap();
        assert!(after > before + 3.0, "{before} -> {after}");
        assert!(a.image.pixels().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_iteration_returns_input() {
        let noisy = add_gaussian_noise(&Image::filled(20, 20, 100.0), 10.0, 1);
        let mut cfg = small_config(10.0, Mode::Wnnm);
        cfg.iterations = 1;
        let out = denoise(&noisy, &cfg).unwrap();
        assert_eq!(out.image, noisy);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn too_small_image() {
        let cfg = small_config(10.0, Mode::Wnnm);
        assert!(matches!(
            denoise(&Image::filled(4, 4, 0.0), &cfg),
            Err(DenoiseError::Patch(PatchError::ImageTooSmall { .. }))
        ));
    }

    #[test]
    fn trace_csv_layout() {
        let rec = IterationRecord { iteration: 1, noise: NoiseState::initial(20.0, 0.6, 0.9) };
        let mut buf = Vec::new();
        write_trace_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("iteration,sigma_n,sigma_flt"));
        assert!(lines.next().unwrap().starts_with("1,20.000000,0.000000,20.000000"));
        assert!(!text.contains('\r'));
    }
}
