//! Noise-level machinery: filtered-noise RMS, residual noise estimates,
//! gradient-covariance texture analysis and weak-texture PCA estimation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::imgio::{Image, ImageError};
use crate::lowrank::{self, LowRankError, Mat};
use crate::patchgrid::{extract_patch, PatchRef};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("only {found} patches available, at least {needed} required")]
    TooFewPatches { found: usize, needed: usize },
    #[error("patch side {0} too small for gradient analysis")]
    PatchTooSmall(usize),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
}

/// Estimates carried through one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseState {
    pub sigma_n: f64,
    pub sigma_flt: f64,
    pub sigma_res: f64,
    pub sigma_geom: f64,
    pub sigma_res_geom: f64,
    pub sigma_hat: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl NoiseState {
    /// State before any filtering: every residual estimate equals `sigma_n`.
    pub fn initial(sigma_n: f64, gamma: f64, alpha: f64) -> Self {
        Self {
            sigma_n,
            sigma_flt: 0.0,
            sigma_res: sigma_n,
            sigma_geom: 0.0,
            sigma_res_geom: sigma_n,
            sigma_hat: sigma_n,
            gamma,
            alpha,
        }
    }
}

/// RMS of `y − y_k`, normalized by pixel count so it carries intensity units.
pub fn filtered_noise_std(y: &Image, y_k: &Image) -> Result<f64, ImageError> {
    y.check_dims(y_k)?;
    let sum: f64 = y
        .pixels()
        .iter()
        .zip(y_k.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sum / y.pixels().len() as f64).sqrt())
}

/// `γ·sqrt(max(σ_n² − σ_flt², 0))`.
pub fn residual_std(sigma_n: f64, sigma_flt: f64, gamma: f64) -> f64 {
    gamma * (sigma_n * sigma_n - sigma_flt * sigma_flt).max(0.0).sqrt()
}

/// Same form as [`residual_std`] with the weak-texture estimate in place of
/// the filtered-noise RMS.
pub fn geometric_residual_std(sigma_n: f64, sigma_geom: f64, gamma: f64) -> f64 {
    residual_std(sigma_n, sigma_geom, gamma)
}

pub fn combined_estimate(sigma_res: f64, sigma_res_geom: f64, alpha: f64) -> f64 {
    alpha * sigma_res + (1.0 - alpha) * sigma_res_geom
}

/// Mixing weight: 0.9 below a noise level of 30, 0.8 from 30 upwards.
pub fn alpha_for(sigma_n: f64) -> f64 {
    if sigma_n < 30.0 {
        0.9
    } else {
        0.8
    }
}

/// Summed gradient outer products over a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCovariance {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl GradientCovariance {
    /// `(larger, smaller)` eigenvalue.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let mid = 0.5 * (self.xx + self.yy);
        let half = 0.5 * (self.xx - self.yy);
        let rad = (half * half + self.xy * self.xy).sqrt();
        (mid + rad, mid - rad)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues().0
    }
}

/// Gradient covariance of a row-major `d × d` patch, with forward
/// differences sampled on the `(d−1) × (d−1)` interior grid.
pub fn gradient_covariance(patch: &[f64], d: usize) -> GradientCovariance {
    assert!(d >= 2, "patch side must be at least 2");
    assert_eq!(patch.len(), d * d);
    let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
    for r in 0..d - 1 {
        for c in 0..d - 1 {
            let here = patch[r * d + c];
            let gx = patch[r * d + c + 1] - here;
            let gy = patch[(r + 1) * d + c] - here;
            xx += gx * gx;
            xy += gx * gy;
            yy += gy * gy;
        }
    }
    GradientCovariance { xx, xy, yy }
}

/// Monte Carlo texture threshold for pure-noise patches of a given side.
///
/// The 99th percentile of the largest gradient-covariance eigenvalue over
/// 2000 unit-variance noise patches; thresholds for other noise levels scale
/// with `σ²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureThreshold {
    pub d: usize,
    pub seed: u64,
    unit: f64,
}

pub const CALIBRATION_PATCHES: usize = 2000;
pub const CALIBRATION_PERCENTILE: f64 = 0.99;

impl TextureThreshold {
    pub fn calibrate(d: usize, seed: u64) -> Self {
        assert!(d >= 2, "patch side must be at least 2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut patch = vec![0.0; d * d];
        let mut responses: Vec<f64> = (0..CALIBRATION_PATCHES)
            .map(|_| {
                patch
                    .iter_mut()
                    .for_each(|v| *v = StandardNormal.sample(&mut rng));
                gradient_covariance(&patch, d).max_eigenvalue()
            })
            .collect();
        responses.sort_by(f64::total_cmp);
        let rank = (CALIBRATION_PERCENTILE * CALIBRATION_PATCHES as f64).ceil() as usize;
        Self {
            d,
            seed,
            unit: responses[rank - 1],
        }
    }

    pub fn threshold(&self, sigma: f64) -> f64 {
        self.unit * sigma * sigma
    }
}

/// Minimum number of patches an image must provide.
pub const MIN_PATCHES: usize = 50;
const SOURCE_STRIDE: usize = 2;
const MAX_ROUNDS: usize = 10;
const CONVERGENCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct WeakTextureEstimate {
    /// Final weak-texture noise estimate.
    pub sigma: f64,
    /// PCA estimate over every patch (the starting point).
    pub all_patch_sigma: f64,
    pub patches_total: usize,
    pub patches_selected: usize,
    pub rounds: usize,
    /// Selection became too small and the all-patch estimate was returned.
    pub fell_back: bool,
}

struct PatchBank {
    dim: usize,
    /// Row-major patch vectors, `dim` values each.
    data: Vec<f64>,
    texture: Vec<f64>,
}

impl PatchBank {
    fn collect(img: &Image, d: usize) -> Self {
        let dim = d * d;
        let rows: Vec<usize> = (0..=img.height() - d).step_by(SOURCE_STRIDE).collect();
        let cols: Vec<usize> = (0..=img.width() - d).step_by(SOURCE_STRIDE).collect();
        let mut data = vec![0.0; rows.len() * cols.len() * dim];
        let mut texture = Vec::with_capacity(rows.len() * cols.len());
        let mut chunks = data.chunks_exact_mut(dim);
        for &r in &rows {
            for &c in &cols {
                let out = chunks.next().expect("sized above");
                extract_patch(img, PatchRef::new(r, c), d, out);
                texture.push(gradient_covariance(out, d).max_eigenvalue());
            }
        }
        Self { dim, data, texture }
    }

    fn len(&self) -> usize {
        self.texture.len()
    }

    fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Noise std from the smallest eigenvalue of the sample covariance of
    /// the chosen patches, scaled up by `1/(1 − sqrt(dim/n))` for the
    /// downward bias of the smallest sample eigenvalue at finite `n`.
    fn pca_sigma(&self, chosen: &[usize]) -> Result<f64, LowRankError> {
        let dim = self.dim;
        let n = chosen.len();
        let mut mean = vec![0.0; dim];
        for &i in chosen {
            for (m, v) in mean.iter_mut().zip(self.patch(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for &i in chosen {
            for ((c, v), m) in centered.iter_mut().zip(self.patch(i)).zip(&mean) {
                *c = v - m;
            }
            for a in 0..dim {
                let ca = centered[a];
                let row = &mut cov[a * dim..a * dim + a + 1];
                for (dst, cb) in row.iter_mut().zip(&centered[..=a]) {
                    *dst += ca * cb;
                }
            }
        }
        let denom = (n.max(2) - 1) as f64;
        let full = Mat::from_fn(dim, dim, |i, j| {
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            cov[hi * dim + lo] / denom
        });
        // symmetric PSD: singular values are the eigenvalues
        let lambda_min = lowrank::svd(&full)?.sigma.last().copied().unwrap_or(0.0);
        let ratio = (dim as f64 / n as f64).sqrt();
        let correction = if ratio < 1.0 { 1.0 - ratio } else { 1.0 };
        Ok(lambda_min.max(0.0).sqrt() / correction)
    }
}

/// Noise level of `img` estimated from its weak-texture patches.
///
/// Patches of side `d` are taken on a stride-2 grid. Starting from the PCA
/// estimate over all patches, each round keeps the patches whose texture
/// response stays below the noise-only threshold for the current estimate
/// and re-runs PCA on them, until the estimate moves by less than `1e-3` or
/// ten rounds have run.
pub fn estimate_noise_level(img: &Image, d: usize, seed: u64) -> Result<WeakTextureEstimate, NoiseError> {
    if d < 2 {
        return Err(NoiseError::PatchTooSmall(d));
    }
    if img.width() < d || img.height() < d {
        return Err(NoiseError::TooFewPatches {
            found: 0,
            needed: MIN_PATCHES,
        });
    }
    let bank = PatchBank::collect(img, d);
    if bank.len() < MIN_PATCHES {
        return Err(NoiseError::TooFewPatches {
            found: bank.len(),
            needed: MIN_PATCHES,
        });
    }
    let thresholds = TextureThreshold::calibrate(d, seed);
    let all: Vec<usize> = (0..bank.len()).collect();
    let all_patch_sigma = bank.pca_sigma(&all)?;
    // below this the covariance of the selection is too poorly conditioned
    let min_selected = (2 * bank.dim).max(10);

    let mut sigma = all_patch_sigma;
    let mut selected = bank.len();
    let mut rounds = 0;
    let mut fell_back = false;
    while rounds < MAX_ROUNDS {
        rounds += 1;
        let limit = thresholds.threshold(sigma);
        let chosen: Vec<usize> = (0..bank.len()).filter(|&i| bank.texture[i] <= limit).collect();
        if chosen.len() < min_selected {
            log::warn!(
                "weak-texture selection kept {} of {} patches; using all-patch estimate",
                chosen.len(),
                bank.len()
            );
            sigma = all_patch_sigma;
            selected = bank.len();
            fell_back = true;
            break;
        }
        selected = chosen.len();
        let next = bank.pca_sigma(&chosen)?;
        let step = (next - sigma).abs();
        sigma = next;
        if step < CONVERGENCE {
            break;
        }
    }
    Ok(WeakTextureEstimate {
        sigma,
        all_patch_sigma,
        patches_total: bank.len(),
        patches_selected: selected,
        rounds,
        fell_back,
    })
}

/// Weak-texture noise estimate with patch side `d`.
pub fn weak_texture_sigma(img: &Image, d: usize, seed: u64) -> Result<f64, NoiseError> {
    Ok(estimate_noise_level(img, d, seed)?.sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::add_gaussian_noise;

    #[test]
    fn filtered_noise_examples() {
        let y = Image::from_fn(6, 5, |r, c| (r * 7 + c) as f64);
        assert_eq!(filtered_noise_std(&y, &y).unwrap(), 0.0);
        let shifted = Image::from_fn(6, 5, |r, c| (r * 7 + c) as f64 - 3.0);
        assert!((filtered_noise_std(&y, &shifted).unwrap() - 3.0).abs() < 1e-12);
        assert!(filtered_noise_std(&y, &Image::filled(5, 5, 0.0)).is_err());
    }

    #[test]
    fn filtered_noise_tracks_added_noise() {
        let clean = Image::from_fn(512, 512, |r, c| ((r / 32 + c / 32) % 2) as f64 * 100.0);
        let noisy = add_gaussian_noise(&clean, 20.0, 5);
        let s = filtered_noise_std(&noisy, &clean).unwrap();
        assert!((s / 20.0 - 1.0).abs() < 0.02, "{s}");
    }

    #[test]
    fn residual_examples() {
        assert!((residual_std(30.0, 18.0, 1.0) - 24.0).abs() < 1e-12);
        assert_eq!(residual_std(30.0, 0.0, 0.6), 0.6 * 30.0);
        assert_eq!(residual_std(30.0, 31.0, 1.0), 0.0);
        assert!((geometric_residual_std(50.0, 30.0, 1.0) - 40.0).abs() < 1e-12);
        assert_eq!(geometric_residual_std(50.0, 0.0, 0.5), 25.0);
        assert_eq!(geometric_residual_std(50.0, 50.0, 1.0), 0.0);
    }

    #[test]
    fn combination_and_alpha_rule() {
        assert_eq!(combined_estimate(10.0, 8.0, 1.0), 10.0);
        assert_eq!(combined_estimate(10.0, 8.0, 0.0), 8.0);
        assert!((combined_estimate(10.0, 8.0, 0.8) - 9.6).abs() < 1e-12);
        assert_eq!(alpha_for(10.0), 0.9);
        assert_eq!(alpha_for(29.999), 0.9);
        assert_eq!(alpha_for(30.0), 0.8);
        assert_eq!(alpha_for(100.0), 0.8);
    }

    #[test]
    fn gradient_covariance_examples() {
        let flat = vec![4.0; 16];
        assert_eq!(
            gradient_covariance(&flat, 4),
            GradientCovariance { xx: 0.0, xy: 0.0, yy: 0.0 }
        );
        let ramp: Vec<f64> = (0..25).map(|i| (i % 5) as f64).collect();
        assert_eq!(
            gradient_covariance(&ramp, 5),
            GradientCovariance { xx: 16.0, xy: 0.0, yy: 0.0 }
        );
        let (hi, lo) = GradientCovariance { xx: 2.0, xy: 1.0, yy: 2.0 }.eigenvalues();
        assert!((hi - 3.0).abs() < 1e-12 && (lo - 1.0).abs() < 1e-12);
    }

    #[test]
    fn threshold_scales_with_variance() {
        let t = TextureThreshold::calibrate(7, 3);
        assert!(t.threshold(1.0) > 0.0);
        assert!((t.threshold(10.0) / t.threshold(1.0) - 100.0).abs() < 1e-9);
        assert_eq!(t, TextureThreshold::calibrate(7, 3));
    }

    #[test]
    fn constant_image_has_no_noise() {
        let img = Image::filled(64, 64, 90.0);
        let est = estimate_noise_level(&img, 7, 0).unwrap();
        assert!(est.sigma <= 1e-6);
        assert!(!est.fell_back);
    }

    #[test]
    fn tiny_image_is_rejected() {
        let img = Image::filled(12, 12, 1.0);
        assert!(matches!(
            estimate_noise_level(&img, 7, 0),
            Err(NoiseError::TooFewPatches { .. })
        ));
    }

    #[test]
    fn textured_image_falls_back_when_nothing_is_flat() {
        // strong checkerboard at pixel scale, tiny noise: no patch looks like noise
        let clean = Image::from_fn(64, 64, |r, c| if (r + c) % 2 == 0 { 0.0 } else { 200.0 });
        let noisy = add_gaussian_noise(&clean, 0.5, 1);
        let est = estimate_noise_level(&noisy, 5, 0).unwrap();
        assert!(est.fell_back);
        assert_eq!(est.sigma, est.all_patch_sigma);
    }

    #[test]
    fn stripes_do_not_inflate_estimate() {
        let clean = Image::from_fn(128, 128, |r, _| if (r / 16) % 2 == 0 { 60.0 } else { 180.0 });
        let noisy = add_gaussian_noise(&clean, 10.0, 8);
        let s = weak_texture_sigma(&noisy, 7, 0).unwrap();
        assert!((s / 10.0 - 1.0).abs() < 0.08, "{s}");
    }
}
