//! Negative log marginal likelihood of the FIR model under the TC prior,
//! evaluated from sufficient statistics only.
//!
//! With `K = L L^T` and `sigma^2 I + L^T R L = S S^T`,
//!
//! ```text
//! L(eta) = (Nbar - n) ln sigma^2 + 2 ln det S
//!          + (Ybar - Ytilde^T L S^-T S^-1 L^T Ytilde) / sigma^2
//! ```
//!
//! which equals `Y^T Sigma_y^-1 Y + ln det Sigma_y` with the `Nbar ln 2 pi`
//! constant dropped. The factor used is `L = U diag(sqrt(lambda w))` (see
//! [`crate::kernel`]), so `L^T R L = D^(1/2) (U^T R U) D^(1/2)` costs O(n^2)
//! once `U^T R U` is cached, and the expression stays finite for singular `K`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SysIdError};
use crate::kernel::{prefix_sums, prefix_transform, suffix_sums, Hyperparameters, MaxIndexForm, BETA_EPS};
use crate::stats::SufficientStats;

/// Likelihood inputs: statistics snapshot plus the plug-in noise variance.
#[derive(Debug, Clone)]
pub struct MLContext {
    stats: SufficientStats,
    sigma2: f64,
    /// `U^T R U`
    t_mat: DMatrix<f64>,
    /// `U^T Ytilde`
    t_vec: DVector<f64>,
}

/// `grad = v - u` with `v > 0`, `u >= 0`; index 0 is `lambda`, 1 is `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSplit {
    pub v: [f64; 2],
    pub u: [f64; 2],
    pub grad: [f64; 2],
}

impl GradientSplit {
    fn from_parts(v: [f64; 2], u: [f64; 2]) -> Self {
        Self {
            v,
            u,
            grad: [v[0] - u[0], v[1] - u[1]],
        }
    }
}

/// Posterior mean and covariance of the impulse response.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MLContext {
    pub fn new(stats: SufficientStats, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(SysIdError::InvalidNoiseVariance(sigma2));
        }
        let t_mat = prefix_transform(stats.r());
        let t_vec = prefix_sums(stats.y_tilde());
        Ok(Self {
            stats,
            sigma2,
            t_mat,
            t_vec,
        })
    }

    pub fn stats(&self) -> &SufficientStats {
        &self.stats
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn n(&self) -> usize {
        self.stats.n()
    }

    pub(crate) fn factorize(&self, eta: Hyperparameters) -> Result<Factorization> {
        eta.check()?;
        let n = self.n();
        let weights = MaxIndexForm::tc(n, eta.beta).weights;
        let sc: Vec<f64> = weights.iter().map(|w| (eta.lambda * w).sqrt()).collect();
        let s2 = self.sigma2;
        let a = DMatrix::from_fn(n, n, |i, j| {
            let base = sc[i] * self.t_mat[(i, j)] * sc[j];
            if i == j {
                base + s2
            } else {
                base
            }
        });
        let chol = Cholesky::new(a).ok_or(SysIdError::NonFinite("likelihood factor"))?;
        let b = DVector::from_fn(n, |i, _| sc[i] * self.t_vec[i]);
        let mut v = b.clone();
        chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let logdet_a = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let value = (self.stats.nbar() as f64 - n as f64) * s2.ln()
            + logdet_a
            + (self.stats.y_bar() - v.norm_squared()) / s2;
        if !value.is_finite() {
            return Err(SysIdError::NonFinite("negative log marginal likelihood"));
        }
        Ok(Factorization {
            eta,
            weights,
            sc,
            chol,
            v,
            value,
        })
    }
}

/// Cholesky factor `S` of `sigma^2 I + L^T R L` at one `eta`.
#[derive(Debug, Clone)]
pub(crate) struct Factorization {
    pub eta: Hyperparameters,
    /// TC increments at `eta.beta` (without `lambda`).
    pub weights: Vec<f64>,
    /// `sqrt(lambda * weights)`
    pub sc: Vec<f64>,
    pub chol: Cholesky<f64, Dyn>,
    /// `S^-1 L^T Ytilde`
    pub v: DVector<f64>,
    pub value: f64,
}

impl Factorization {
    /// `A^-1 L^T Ytilde`, with `A = S S^T`.
    pub fn solved(&self) -> DVector<f64> {
        let mut x = self.v.clone();
        self.chol.l_dirty().tr_solve_lower_triangular_mut(&mut x);
        x
    }

    /// `S^-1`, by column sweeps over the lower-triangular factor.
    pub fn inverse_factor(&self) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let ls = l.as_slice();
        let mut x = DMatrix::zeros(n, n);
        for (j, col) in x.as_mut_slice().chunks_exact_mut(n).enumerate() {
            col[j] = 1.0;
            for k in j..n {
                let lk = &ls[k * n..(k + 1) * n];
                let xk = col[k] / lk[k];
                col[k] = xk;
                if xk != 0.0 {
                    for (c, lik) in col[k + 1..].iter_mut().zip(&lk[k + 1..]) {
                        *c -= xk * lik;
                    }
                }
            }
        }
        x
    }

    /// Posterior mean `L A^-1 L^T Ytilde`.
    pub fn posterior_mean(&self) -> DVector<f64> {
        let x = self.solved();
        let scaled = DVector::from_fn(x.len(), |i, _| self.sc[i] * x[i]);
        suffix_sums(&scaled)
    }
}

/// `L(eta)` from the compressed Cholesky formula.
pub fn neg_log_ml(ctx: &MLContext, eta: Hyperparameters) -> Result<f64> {
    Ok(ctx.factorize(eta)?.value)
}

fn check_gradient_point(eta: Hyperparameters) -> Result<()> {
    eta.check()?;
    if eta.beta < BETA_EPS || eta.beta > 1.0 - BETA_EPS {
        return Err(SysIdError::InfeasibleHyperparameters {
            lambda: eta.lambda,
            beta: eta.beta,
        });
    }
    Ok(())
}

/// Gradient of `L` with its positive/negative split.
///
/// For a kernel derivative `M = U diag(m) U^T`, `dL = Tr(M G) - g^T M g` with
/// `G = Phi^T Sigma_y^-1 Phi` and `g = Phi^T Sigma_y^-1 Y`. Only the diagonal of
/// `U^T G U` and the vector `U^T g` are needed. The `beta` derivative is not
/// sign definite, so its increments are split as `m = m+ - m-` and
/// `V_beta = Tr(M+ G) + g^T M- g`, `U_beta = Tr(M- G) + g^T M+ g`.
pub fn grad_neg_log_ml(ctx: &MLContext, eta: Hyperparameters) -> Result<GradientSplit> {
    check_gradient_point(eta)?;
    let f = ctx.factorize(eta)?;
    Ok(full_gradient(ctx, &f))
}

pub(crate) fn full_gradient(ctx: &MLContext, f: &Factorization) -> GradientSplit {
    let n = ctx.n();
    let s2 = ctx.sigma2;
    // W = S^-1 D^(1/2) T
    let mut w = DMatrix::from_fn(n, n, |i, j| f.sc[i] * ctx.t_mat[(i, j)]);
    f.chol.l_dirty().solve_lower_triangular_mut(&mut w);
    let g_diag: Vec<f64> = (0..n)
        .map(|k| (ctx.t_mat[(k, k)] - w.column(k).norm_squared()) / s2)
        .collect();
    let g_vec = (&ctx.t_vec - w.tr_mul(&f.v)) / s2;

    let lam_w = &f.weights;
    let v_l: f64 = lam_w.iter().zip(&g_diag).map(|(m, g)| m * g).sum();
    let u_l: f64 = lam_w.iter().zip(g_vec.iter()).map(|(m, g)| m * g * g).sum();

    let dbeta = MaxIndexForm::tc_dbeta(n, f.eta.beta);
    let (plus, minus) = dbeta.split_signs();
    let lambda = f.eta.lambda;
    let mut v_b = 0.0;
    let mut u_b = 0.0;
    for k in 0..n {
        let gd = g_diag[k];
        let gv2 = g_vec[k] * g_vec[k];
        v_b += lambda * (plus.weights[k] * gd + minus.weights[k] * gv2);
        u_b += lambda * (minus.weights[k] * gd + plus.weights[k] * gv2);
    }
    GradientSplit::from_parts([v_l, v_b], [u_l, u_b])
}

/// `lambda` component only; the `beta` entries of the returned split are zero.
///
/// Uses `lambda V_lambda = n - sigma^2 Tr(A^-1)` and
/// `lambda U_lambda = |A^-1 L^T Ytilde|^2` when the prior is not negligible
/// against the noise, falling back to the general path otherwise.
pub(crate) fn lambda_gradient(ctx: &MLContext, f: &Factorization) -> GradientSplit {
    let lambda = f.eta.lambda;
    let n = ctx.n();
    let signal = (0..n)
        .map(|k| f.sc[k] * f.sc[k] * ctx.t_mat[(k, k)])
        .fold(0.0_f64, f64::max);
    if lambda > 0.0 && signal >= ctx.sigma2 {
        let xinv = f.inverse_factor();
        let tr = xinv.norm_squared();
        let x = f.solved();
        let v = (n as f64 - ctx.sigma2 * tr) / lambda;
        let u = x.norm_squared() / lambda;
        GradientSplit::from_parts([v, 0.0], [u, 0.0])
    } else {
        let full = full_gradient(ctx, f);
        GradientSplit::from_parts([full.v[0], 0.0], [full.u[0], 0.0])
    }
}

/// Posterior mean `(R + sigma^2 K^-1)^-1 Ytilde` and covariance
/// `(R / sigma^2 + K^-1)^-1`; both are zero when `lambda = 0`.
pub fn posterior_moments(ctx: &MLContext, eta: Hyperparameters) -> Result<PosteriorMoments> {
    let f = ctx.factorize(eta)?;
    let n = ctx.n();
    let mean = f.posterior_mean();
    // cov = sigma^2 U D^(1/2) A^-1 D^(1/2) U^T
    let xinv = f.inverse_factor();
    let a_inv = xinv.tr_mul(&xinv);
    let mut cov = DMatrix::from_fn(n, n, |i, j| ctx.sigma2 * f.sc[i] * a_inv[(i, j)] * f.sc[j]);
    for j in 0..n {
        for i in (0..n - 1).rev() {
            cov[(i, j)] += cov[(i + 1, j)];
        }
    }
    for j in (0..n - 1).rev() {
        for i in 0..n {
            cov[(i, j)] += cov[(i, j + 1)];
        }
    }
    Ok(PosteriorMoments { mean, cov })
}

/// Posterior mean only (the empirical Bayes estimate).
pub fn posterior_mean(ctx: &MLContext, eta: Hyperparameters) -> Result<DVector<f64>> {
    Ok(ctx.factorize(eta)?.posterior_mean())
}
