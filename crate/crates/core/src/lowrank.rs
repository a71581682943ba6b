//! Thin SVD and the singular-value manipulations used per patch group:
//! soft thresholding, noise-adjusted signal estimates, reweighted
//! thresholds, high/low spectrum split and recomposition.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LowRankError {
    #[error("SVD did not converge within {0} sweeps")]
    ConvergenceFailure(usize),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Dense column-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wrap column-major storage.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "storage does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.rows + i] = v;
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    fn col_pair_mut(&mut self, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
        debug_assert!(i < j);
        let (head, tail) = self.data.split_at_mut(j * self.rows);
        (&mut head[i * self.rows..(i + 1) * self.rows], &mut tail[..self.rows])
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "inner dimensions differ");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for j in 0..rhs.cols {
            let dst = &mut out.data[j * self.rows..(j + 1) * self.rows];
            for k in 0..self.cols {
                let w = rhs.get(k, j);
                if w != 0.0 {
                    axpy(w, self.col(k), dst);
                }
            }
        }
        out
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add(&self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// Largest absolute entry of `selfᵀ·self − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.cols {
            for j in i..self.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot(self.col(i), self.col(j)) - target).abs());
            }
        }
        worst
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let o = 4 * k;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let a = *xi;
        let b = *yi;
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

/// Thin SVD `M = U·diag(sigma)·Vᵀ` with `r = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `rows × r`, orthonormal columns.
    pub u: Mat,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `cols × r`, orthonormal columns.
    pub v: Mat,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
}

const MAX_SWEEPS: usize = 80;

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// The rotation order is fixed and the result is normalized so every column
/// of `U` has a non-negative first nonzero entry, which makes the
/// factorization fully reproducible.
pub fn svd(matrix: &Mat) -> Result<SvdFactors, LowRankError> {
    if matrix.data.iter().any(|v| !v.is_finite()) {
        return Err(LowRankError::NonFinite);
    }
    let (mut u, sigma, mut v) = if matrix.rows >= matrix.cols {
        let (w, sigma, v) = hestenes(matrix.clone())?;
        (w, sigma, v)
    } else {
        // M = Aᵀ with A = U_a Σ V_aᵀ, so U = V_a and V = U_a
        let (w, sigma, v) = hestenes(matrix.transpose())?;
        (v, sigma, w)
    };
    for j in 0..sigma.len() {
        let flip = u.col(j).iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0);
        if flip {
            u.col_mut(j).iter_mut().for_each(|x| *x = -*x);
            v.col_mut(j).iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(SvdFactors { u, sigma, v })
}

/// Orthogonalizes the columns of a tall `a` (rows ≥ cols). Returns the
/// normalized left vectors, singular values (sorted), and right vectors.
fn hestenes(mut a: Mat) -> Result<(Mat, Vec<f64>, Mat), LowRankError> {
    let n = a.cols;
    let len = a.rows;
    let mut v = Mat::identity(n);
    let tol = f64::EPSILON * (len.max(1) as f64);
    let mut norms = vec![0.0; n];

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(LowRankError::ConvergenceFailure(MAX_SWEEPS));
        }
        sweeps += 1;
        for (j, nj) in norms.iter_mut().enumerate() {
            let c = a.col(j);
            *nj = dot(c, c);
        }
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = norms[i];
                let beta = norms[j];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(a.col(i), a.col(j));
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (ci, cj) = a.col_pair_mut(i, j);
                rotate(ci, cj, c, s);
                let (vi, vj) = v.col_pair_mut(i, j);
                rotate(vi, vj, c, s);
                norms[i] = alpha - t * gamma;
                norms[j] = beta + t * gamma;
            }
        }
        converged = !rotated;
    }

    let lengths: Vec<f64> = (0..n).map(|j| dot(a.col(j), a.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| lengths[y].total_cmp(&lengths[x]).then(x.cmp(&y)));

    let mut u = Mat::zeros(len, n);
    let mut vs = Mat::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut null = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = lengths[src];
        vs.col_mut(dst).copy_from_slice(v.col(src));
        if s > f64::MIN_POSITIVE {
            let inv = 1.0 / s;
            for (o, x) in u.col_mut(dst).iter_mut().zip(a.col(src)) {
                *o = x * inv;
            }
            sigma.push(s);
        } else {
            sigma.push(0.0);
            null.push(dst);
        }
    }
    if !null.is_empty() {
        complete_basis(&mut u, &null);
    }
    Ok((u, sigma, vs))
}

/// Fills the listed (zero) columns of `u` with unit vectors orthogonal to
/// every other column, drawn from the standard basis by Gram–Schmidt.
fn complete_basis(u: &mut Mat, missing: &[usize]) {
    let len = u.rows;
    let mut filled: Vec<usize> = (0..u.cols).filter(|j| !missing.contains(j)).collect();
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < len, "basis completion ran out of candidates");
            let mut e = vec![0.0; len];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &k in &filled {
                    let proj = dot(u.col(k), &e);
                    axpy(-proj, u.col(k), &mut e);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                e.iter_mut().for_each(|x| *x /= norm);
                u.col_mut(slot).copy_from_slice(&e);
                filled.push(slot);
                break;
            }
        }
    }
}

/// `U·diag(values)·Vᵀ`.
pub fn recompose(factors: &SvdFactors, values: &[f64]) -> Result<Mat, LowRankError> {
    let r = factors.rank();
    if values.len() != r {
        return Err(LowRankError::LengthMismatch {
            expected: r,
            found: values.len(),
        });
    }
    let rows = factors.u.rows;
    let cols = factors.v.rows;
    let mut out = Mat::zeros(rows, cols);
    for (k, &val) in values.iter().enumerate() {
        if val == 0.0 {
            continue;
        }
        let uk = factors.u.col(k);
        for j in 0..cols {
            let w = val * factors.v.get(j, k);
            axpy(w, uk, out.col_mut(j));
        }
    }
    Ok(out)
}

/// Soft thresholding `max(λ_i − θ, 0)` with one threshold for all values.
pub fn nnm_shrink(sigma: &[f64], theta: f64) -> Vec<f64> {
    debug_assert!(theta >= 0.0);
    sigma.iter().map(|&l| (l - theta).max(0.0)).collect()
}

/// Signal singular values implied by noisy ones:
/// `sqrt(max(λ_i² − m·σ_res², 0))`.
pub fn adjust_singulars(sigma: &[f64], m: usize, sigma_res: f64) -> Vec<f64> {
    let noise_energy = m as f64 * sigma_res * sigma_res;
    sigma
        .iter()
        .map(|&l| (l * l - noise_energy).max(0.0).sqrt())
        .collect()
}

/// Reweighting thresholds `w_i = c·sqrt(m) / (λ̂_i + eps)`; small singular
/// values receive large thresholds.
pub fn wnnm_weights(adjusted: &[f64], c: f64, m: usize, eps: f64) -> Vec<f64> {
    let scale = c * (m as f64).sqrt();
    adjusted.iter().map(|&l| scale / (l + eps)).collect()
}

/// Per-index soft thresholding `max(λ_i − w_i, 0)`.
pub fn wnnm_shrink(sigma: &[f64], weights: &[f64]) -> Result<Vec<f64>, LowRankError> {
    if sigma.len() != weights.len() {
        return Err(LowRankError::LengthMismatch {
            expected: sigma.len(),
            found: weights.len(),
        });
    }
    Ok(sigma
        .iter()
        .zip(weights)
        .map(|(&l, &w)| (l - w).max(0.0))
        .collect())
}

/// Splits shrunk values into a high part (strictly above `tau`) and the low
/// remainder, so that `high + low == shrunk` element-wise.
pub fn split_spectrum(shrunk: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    shrunk
        .iter()
        .map(|&s| if s > tau { (s, 0.0) } else { (0.0, s) })
        .unzip()
}
