//! TC ("tuned/correlated") kernel prior for FIR impulse responses.
//!
//! The prior covariance is `K = lambda * K_beta` with
//! `K_beta(i, j) = beta^max(i, j)` for 1-based lags `i, j = 1..=n`.
//!
//! Any matrix whose entries depend only on `max(i, j)` can be written as
//! `U diag(w) U^T`, where `U` is the upper-triangular all-ones matrix and
//! `w_k = f(k) - f(k + 1)` (with `f(n + 1) = 0`). For the TC kernel every
//! `w_k` is nonnegative on the whole feasible box, so `U diag(sqrt(w))` is an
//! exact square-root factor that stays well defined when `K` is singular
//! (`lambda = 0`, `beta in {0, 1}`). The likelihood code works in this basis.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SysIdError};

/// Interior margin applied to `beta` wherever derivatives are needed.
pub const BETA_EPS: f64 = 1e-6;

/// Kernel hyperparameters `eta = [lambda, beta]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub lambda: f64,
    pub beta: f64,
}

impl Hyperparameters {
    /// Validated constructor; rejects points outside `lambda >= 0, 0 <= beta <= 1`.
    pub fn new(lambda: f64, beta: f64) -> Result<Self> {
        let eta = Self { lambda, beta };
        if eta.is_feasible() {
            Ok(eta)
        } else {
            Err(SysIdError::InfeasibleHyperparameters { lambda, beta })
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.lambda.is_finite()
            && self.beta.is_finite()
            && self.lambda >= 0.0
            && (0.0..=1.0).contains(&self.beta)
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.lambda, self.beta]
    }

    /// Same point with `beta` pulled into `[BETA_EPS, 1 - BETA_EPS]`.
    pub fn clamp_beta_interior(self) -> Self {
        Self {
            lambda: self.lambda,
            beta: self.beta.clamp(BETA_EPS, 1.0 - BETA_EPS),
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.is_feasible() {
            Ok(())
        } else {
            Err(SysIdError::InfeasibleHyperparameters {
                lambda: self.lambda,
                beta: self.beta,
            })
        }
    }
}

/// Dense TC kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub eta: Hyperparameters,
    pub entries: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        chol_logdet_solve(self)
    }
}

/// `K = lambda * beta^max(i, j)`, 1-based.
pub fn build_tc_kernel(n: usize, eta: Hyperparameters) -> Result<KernelMatrix> {
    if n == 0 {
        return Err(SysIdError::ZeroOrder);
    }
    eta.check()?;
    let powers: Vec<f64> = (1..=n).map(|m| eta.beta.powi(m as i32)).collect();
    let entries = DMatrix::from_fn(n, n, |i, j| eta.lambda * powers[i.max(j)]);
    Ok(KernelMatrix { eta, entries })
}

/// `d/dbeta beta^max(i, j) = max(i, j) * beta^(max(i, j) - 1)`.
///
/// The scale `lambda` is not applied. At `beta = 0` this is the right limit:
/// only entry (1, 1) is nonzero.
pub fn kernel_dbeta(n: usize, eta: Hyperparameters) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(SysIdError::ZeroOrder);
    }
    eta.check()?;
    let vals: Vec<f64> = (1..=n)
        .map(|m| m as f64 * eta.beta.powi(m as i32 - 1))
        .collect();
    Ok(DMatrix::from_fn(n, n, |i, j| vals[i.max(j)]))
}

/// Cholesky factorization of a kernel matrix together with its log-determinant.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    chol: Cholesky<f64, Dyn>,
    pub logdet: f64,
}

impl CholeskyFactor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }
}

/// Relative pivot floor below which a symmetric matrix is treated as singular.
const PIVOT_FLOOR: f64 = 1e-14;

/// Factor `K = L L^T`; fails on singular or indefinite input.
pub fn chol_logdet_solve(k: &KernelMatrix) -> Result<CholeskyFactor> {
    let chol = checked_cholesky(&k.entries).ok_or(SysIdError::NotPositiveDefinite)?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(CholeskyFactor { chol, logdet })
}

/// Cholesky with a relative pivot check, so exactly singular PSD matrices are
/// rejected instead of producing a factor with a denormal pivot.
pub(crate) fn checked_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let scale = m.diagonal().iter().fold(0.0_f64, |a, &d| a.max(d.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let chol = Cholesky::new(m.clone())?;
    let floor = (PIVOT_FLOOR * scale).sqrt();
    if chol.l_dirty().diagonal().iter().all(|&d| d.is_finite() && d > floor) {
        Some(chol)
    } else {
        None
    }
}

/// Symmetric matrix with entries `f(max(i, j))`, stored as the increments
/// `w_k = f(k) - f(k + 1)` so that `M = U diag(w) U^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxIndexForm {
    pub weights: Vec<f64>,
}

impl MaxIndexForm {
    /// Increments of `beta^max(i, j)`: `beta^k (1 - beta)` for `k < n`, `beta^n` last.
    pub fn tc(n: usize, beta: f64) -> Self {
        let weights = (1..=n)
            .map(|k| {
                let p = beta.powi(k as i32);
                if k < n {
                    p * (1.0 - beta)
                } else {
                    p
                }
            })
            .collect();
        Self { weights }
    }

    /// Increments of `max(i, j) * beta^(max(i, j) - 1)`. Not sign definite.
    pub fn tc_dbeta(n: usize, beta: f64) -> Self {
        let f = |m: usize| -> f64 {
            if m > n {
                0.0
            } else {
                m as f64 * beta.powi(m as i32 - 1)
            }
        };
        let weights = (1..=n).map(|k| f(k) - f(k + 1)).collect();
        Self { weights }
    }

    /// Natural log of the TC increments, finite for `0 < beta < 1`.
    pub fn tc_log_weights(n: usize, beta: f64) -> Vec<f64> {
        let lb = beta.ln();
        let l1b = (-beta).ln_1p();
        (1..=n)
            .map(|k| if k < n { k as f64 * lb + l1b } else { n as f64 * lb })
            .collect()
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        // f(m) = sum_{k >= m} w_k
        let mut f = vec![0.0; n];
        let mut acc = 0.0;
        for k in (0..n).rev() {
            acc += self.weights[k];
            f[k] = acc;
        }
        DMatrix::from_fn(n, n, |i, j| f[i.max(j)])
    }

    /// Split into nonnegative parts `M = M_plus - M_minus`.
    pub fn split_signs(&self) -> (Self, Self) {
        let plus = self.weights.iter().map(|w| w.max(0.0)).collect();
        let minus = self.weights.iter().map(|w| (-w).max(0.0)).collect();
        (Self { weights: plus }, Self { weights: minus })
    }
}

/// `U^T x`: running prefix sums.
pub fn prefix_sums(x: &DVector<f64>) -> DVector<f64> {
    let mut out = x.clone();
    for i in 1..out.len() {
        out[i] += out[i - 1];
    }
    out
}

/// `U x`: running suffix sums.
pub fn suffix_sums(x: &DVector<f64>) -> DVector<f64> {
    let mut out = x.clone();
    for i in (0..out.len().saturating_sub(1)).rev() {
        out[i] += out[i + 1];
    }
    out
}

/// `U^T R U`: two-dimensional prefix sums of `R`, O(n^2).
pub fn prefix_transform(r: &DMatrix<f64>) -> DMatrix<f64> {
    let mut t = r.clone();
    let (rows, cols) = t.shape();
    for j in 0..cols {
        for i in 1..rows {
            t[(i, j)] += t[(i - 1, j)];
        }
    }
    for j in 1..cols {
        for i in 0..rows {
            t[(i, j)] += t[(i, j - 1)];
        }
    }
    t
}
