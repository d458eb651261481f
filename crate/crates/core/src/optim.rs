//! One-step hyperparameter updaters for the marginal likelihood.
//!
//! Gradient family: a projected quasi-Newton step `z = P(eta - B grad)` onto
//! the feasible box followed by Armijo backtracking, where `B` is a
//! Barzilai-Borwein step (`Bb`), a gradient-split scaled BB step (`Sgp`) or a
//! BFGS inverse-Hessian model (`Bfgs`). EM family: one E-step/M-step pair,
//! either over both hyperparameters (`Em`) or over `lambda` only (`Em1`
//! without the posterior trace term, `Em2` with it).

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Result, SysIdError};
use crate::kernel::{Hyperparameters, MaxIndexForm, BETA_EPS};
use crate::likelihood::{full_gradient, lambda_gradient, neg_log_ml, Factorization, GradientSplit, MLContext};

/// Relative perturbation used to seed the secant pair when no previous iterate exists.
pub const BOOTSTRAP_PERTURBATION: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Updater {
    Bb,
    Sgp,
    Bfgs,
    Em,
    Em1,
    Em2,
}

impl Updater {
    pub fn is_gradient(self) -> bool {
        matches!(self, Updater::Bb | Updater::Sgp | Updater::Bfgs)
    }

    /// EM1 and EM2 never touch `beta`.
    pub fn is_lambda_only_em(self) -> bool {
        matches!(self, Updater::Em1 | Updater::Em2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Updater::Bb => "BB",
            Updater::Sgp => "SGP",
            Updater::Bfgs => "BFGS",
            Updater::Em => "EM",
            Updater::Em1 => "EM1",
            Updater::Em2 => "EM2",
        }
    }
}

impl fmt::Display for Updater {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Updater {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bb" => Ok(Updater::Bb),
            "sgp" => Ok(Updater::Sgp),
            "bfgs" => Ok(Updater::Bfgs),
            "em" => Ok(Updater::Em),
            "em1" => Ok(Updater::Em1),
            "em2" => Ok(Updater::Em2),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Tunable constants of the updaters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub tau0: f64,
    pub armijo_c: f64,
    pub armijo_delta: f64,
    pub max_backtracks: usize,
    pub opt_tol: f64,
    pub opt_max_iter: usize,
    pub em_beta_tol: f64,
    pub em_max_evals: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            alpha_min: 1e-7,
            alpha_max: 1e7,
            d_min: 1e-10,
            d_max: 1e10,
            tau0: 0.5,
            armijo_c: 1e-4,
            armijo_delta: 0.5,
            max_backtracks: 20,
            opt_tol: 1e-6,
            opt_max_iter: 500,
            em_beta_tol: 1e-6,
            em_max_evals: 100,
        }
    }
}

/// Quantities carried from one update to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub eta_prev: Option<Hyperparameters>,
    pub grad_prev: Option<Vector2<f64>>,
    /// BFGS inverse-Hessian model; `None` until the first curvature pair.
    pub b_prev: Option<Matrix2<f64>>,
    /// Last accepted BB step length, reused when the curvature pair is unusable.
    pub alpha_prev: Option<f64>,
    pub tau: f64,
    pub lambda_only: bool,
    pub config: OptimConfig,
}

impl OptimizerState {
    pub fn new(config: OptimConfig, lambda_only: bool) -> Self {
        Self {
            eta_prev: None,
            grad_prev: None,
            b_prev: None,
            alpha_prev: None,
            tau: config.tau0,
            lambda_only,
            config,
        }
    }

    /// Online state seeded from an optimizer run: keeps its last secant point.
    pub fn seeded_from(previous: &OptimizerState, lambda_only: bool) -> Self {
        let mut state = Self::new(previous.config, lambda_only);
        state.eta_prev = previous.eta_prev;
        state.grad_prev = previous.grad_prev.map(|g| {
            if lambda_only {
                Vector2::new(g[0], 0.0)
            } else {
                g
            }
        });
        state.tau = previous.tau;
        state.alpha_prev = previous.alpha_prev;
        state
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub eta_new: Hyperparameters,
    pub ml_before: f64,
    pub ml_after: f64,
    pub backtracks: usize,
    /// Accepted step fraction; zero when the line search gave up.
    pub gamma: f64,
    /// `grad^T (z - eta)` for gradient steps, zero for EM.
    pub slope: f64,
    pub method: Updater,
}

fn to_vec(eta: Hyperparameters) -> Vector2<f64> {
    Vector2::new(eta.lambda, eta.beta)
}

/// `r = eta_k - eta_{k-1}`, `w = grad_k - grad_{k-1}`.
pub fn secant_pair(
    eta_k: Hyperparameters,
    eta_km1: Hyperparameters,
    grad_k: Vector2<f64>,
    grad_km1: Vector2<f64>,
) -> (Vector2<f64>, Vector2<f64>) {
    (to_vec(eta_k) - to_vec(eta_km1), grad_k - grad_km1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BbStep {
    pub alpha: f64,
    pub tau_next: f64,
}

/// Alternating Barzilai-Borwein step length.
pub fn bb_stepsize(state: &OptimizerState, r: &Vector2<f64>, w: &Vector2<f64>) -> BbStep {
    scaled_bb_stepsize(state, r, w, &Vector2::new(1.0, 1.0))
}

/// BB rules in the metric of a diagonal scaling `d`:
/// `alpha1 = r^T D^-2 r / r^T D^-1 w`, `alpha2 = r^T D w / w^T D^2 w`.
/// With `d = 1` these are the plain rules.
fn scaled_bb_stepsize(state: &OptimizerState, r: &Vector2<f64>, w: &Vector2<f64>, d: &Vector2<f64>) -> BbStep {
    let cfg = &state.config;
    let dinv_r = r.component_div(d);
    let d_w = w.component_mul(d);
    let rw1 = dinv_r.dot(w);
    let rw2 = r.dot(&d_w);
    let clamp = |a: f64| a.max(cfg.alpha_min).min(cfg.alpha_max);
    if !(rw1 > 0.0) || !(rw2 > 0.0) {
        // negative curvature: geometric mean of the two BB lengths
        let gm = dinv_r.norm() / d_w.norm();
        let alpha = if gm.is_finite() && gm > 0.0 {
            gm
        } else {
            state.alpha_prev.unwrap_or(1.0)
        };
        return BbStep {
            alpha: clamp(alpha),
            tau_next: state.tau,
        };
    }
    let alpha1 = dinv_r.norm_squared() / rw1;
    let alpha2 = rw2 / d_w.norm_squared();
    let (a1, a2) = (clamp(alpha1), clamp(alpha2));
    if a2 / a1 <= state.tau {
        BbStep {
            alpha: a2,
            tau_next: 0.9 * state.tau,
        }
    } else {
        BbStep {
            alpha: a1,
            tau_next: 1.1 * state.tau,
        }
    }
}

/// Diagonal SGP scaling from the gradient split:
/// `D_lambda = clamp(lambda / V_lambda)`, `D_beta = clamp(beta / V_beta)`.
pub fn sgp_scaling(eta: Hyperparameters, split: &GradientSplit, d_bounds: (f64, f64)) -> Vector2<f64> {
    let clamp = |x: f64| {
        if x.is_nan() {
            d_bounds.1
        } else {
            x.max(d_bounds.0).min(d_bounds.1)
        }
    };
    Vector2::new(clamp(eta.lambda / split.v[0]), clamp(eta.beta / split.v[1]))
}

/// Relative accuracy required of `B w = r` for an accepted BFGS update.
pub const SECANT_TOL: f64 = 1e-10;

/// BFGS inverse-Hessian update; returns `b_prev` when `r^T w` is not
/// sufficiently positive or the update cannot satisfy `B w = r` to
/// `SECANT_TOL`.
pub fn bfgs_update(b_prev: &Matrix2<f64>, r: &Vector2<f64>, w: &Vector2<f64>) -> Matrix2<f64> {
    let rw = r.dot(w);
    if !(rw > 1e-12 * r.norm() * w.norm()) || rw == 0.0 {
        return *b_prev;
    }
    // expanded form of rho r r^T + (I - rho r w^T) B (I - rho w r^T); it
    // avoids the rho^2 products and keeps B w = r accurate for small r^T w
    let v = b_prev * w;
    let q = w.dot(&v);
    let b = b_prev + (r * r.transpose()) * ((rw + q) / (rw * rw)) - (v * r.transpose() + r * v.transpose()) / rw;
    let b = (b + b.transpose()) * 0.5;
    // nearly orthogonal pairs give a B too ill-conditioned to reproduce the
    // secant equation in floating point; such updates are skipped as well
    if (b * w - r).norm() > SECANT_TOL * r.norm() || !b.iter().all(|x| x.is_finite()) {
        return *b_prev;
    }
    b
}

/// Weighted projection onto the feasible box.
///
/// The box is axis aligned and the weight diagonal, so the minimizer of
/// `(x - z)^T W (x - z)` separates per coordinate and is the plain clamp for
/// every positive diagonal `W`.
pub fn project(eta_raw: Vector2<f64>, weights: Vector2<f64>) -> Hyperparameters {
    debug_assert!(weights.iter().all(|&w| w > 0.0));
    let lambda = if eta_raw[0].is_nan() { 0.0 } else { eta_raw[0].max(0.0) };
    let beta = if eta_raw[1].is_nan() { 0.0 } else { eta_raw[1].clamp(0.0, 1.0) };
    Hyperparameters { lambda, beta }
}

fn gradient_of(ctx: &MLContext, f: &Factorization, lambda_only: bool) -> GradientSplit {
    if lambda_only {
        lambda_gradient(ctx, f)
    } else {
        full_gradient(ctx, f)
    }
}

fn bootstrap_point(eta: Hyperparameters) -> Hyperparameters {
    Hyperparameters {
        lambda: eta.lambda * (1.0 + BOOTSTRAP_PERTURBATION),
        beta: eta.beta * (1.0 + BOOTSTRAP_PERTURBATION),
    }
    .clamp_beta_interior()
}

/// One projected quasi-Newton step with Armijo backtracking.
pub fn gradient_step(
    ctx: &MLContext,
    state: &mut OptimizerState,
    eta_k: Hyperparameters,
    method: Updater,
) -> Result<StepReport> {
    if !method.is_gradient() {
        return em_like_step(ctx, eta_k, method, &state.config);
    }
    eta_k.check()?;
    let cfg = state.config;
    let lambda_only = state.lambda_only;
    let eta_k = eta_k.clamp_beta_interior();
    let f = ctx.factorize(eta_k)?;
    let ml_before = f.value;
    let split = gradient_of(ctx, &f, lambda_only);
    let grad = Vector2::new(split.grad[0], if lambda_only { 0.0 } else { split.grad[1] });
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(SysIdError::NonFinite("gradient"));
    }

    let (eta_prev, grad_prev) = match (state.eta_prev, state.grad_prev) {
        (Some(e), Some(g)) => (e, g),
        _ => {
            let mut seed = bootstrap_point(eta_k);
            if lambda_only {
                seed.beta = eta_k.beta;
            }
            let fs = ctx.factorize(seed)?;
            let gs = gradient_of(ctx, &fs, lambda_only);
            (seed, Vector2::new(gs.grad[0], if lambda_only { 0.0 } else { gs.grad[1] }))
        }
    };
    let (r, w) = secant_pair(eta_k, eta_prev, grad, grad_prev);

    let x = to_vec(eta_k);
    let unit = Vector2::new(1.0, 1.0);
    let (mut direction, weights) = match method {
        Updater::Bb => {
            let bb = bb_stepsize(state, &r, &w);
            state.tau = bb.tau_next;
            state.alpha_prev = Some(bb.alpha);
            (-bb.alpha * grad, unit)
        }
        Updater::Sgp => {
            let mut d = sgp_scaling(eta_k, &split, (cfg.d_min, cfg.d_max));
            if lambda_only {
                d[1] = 1.0;
            }
            let bb = scaled_bb_stepsize(state, &r, &w, &d);
            state.tau = bb.tau_next;
            state.alpha_prev = Some(bb.alpha);
            (-bb.alpha * d.component_mul(&grad), d.map(|v| 1.0 / v))
        }
        Updater::Bfgs => {
            let b0 = state.b_prev.unwrap_or_else(|| {
                let rw = r.dot(&w);
                let scale = if rw > 0.0 { rw / w.norm_squared() } else { cfg.alpha_min };
                Matrix2::identity() * scale.max(cfg.alpha_min).min(cfg.alpha_max)
            });
            let b = bfgs_update(&b0, &r, &w);
            state.b_prev = Some(b);
            (-(b * grad), unit)
        }
        _ => unreachable!(),
    };
    if lambda_only {
        direction[1] = 0.0;
    }

    let mut z = project(x + direction, weights).clamp_beta_interior();
    if lambda_only {
        z.beta = eta_k.beta;
    }
    let mut delta = to_vec(z) - x;
    let mut slope = grad.dot(&delta);
    if slope > 0.0 && method == Updater::Bfgs {
        // projected BFGS direction is not a descent direction: restart the model
        let bb = bb_stepsize(state, &r, &w);
        state.b_prev = Some(Matrix2::identity() * bb.alpha);
        z = project(x - bb.alpha * grad, unit).clamp_beta_interior();
        if lambda_only {
            z.beta = eta_k.beta;
        }
        delta = to_vec(z) - x;
        slope = grad.dot(&delta);
    }

    state.eta_prev = Some(eta_k);
    state.grad_prev = Some(grad);

    let mut report = StepReport {
        eta_new: eta_k,
        ml_before,
        ml_after: ml_before,
        backtracks: cfg.max_backtracks,
        gamma: 0.0,
        slope,
        method,
    };
    if delta == Vector2::zeros() {
        report.backtracks = 0;
        report.gamma = 1.0;
        return Ok(report);
    }
    let mut gamma = 1.0;
    for j in 0..=cfg.max_backtracks {
        let cand = x + gamma * delta;
        let cand = Hyperparameters {
            lambda: cand[0].max(0.0),
            beta: cand[1].clamp(0.0, 1.0),
        };
        if let Ok(value) = neg_log_ml(ctx, cand) {
            if value <= ml_before + cfg.armijo_c * gamma * slope {
                report.eta_new = cand;
                report.ml_after = value;
                report.backtracks = j;
                report.gamma = gamma;
                return Ok(report);
            }
        }
        gamma *= cfg.armijo_delta;
    }
    Ok(report)
}

/// `ln sum exp(x_i)`, ignoring `-inf` terms.
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// E-step summary at `eta`: in the basis where the prior is diagonal,
/// `lambda * s_k * w_k(beta)` is the second moment `E[(h_k - h_{k+1})^2]`
/// (last coefficient alone), with `s_k = sigma^2 (A^-1)_kk + x_k^2` and
/// `x = A^-1 L^T Ytilde`.
struct EStep {
    eta: Hyperparameters,
    ml: f64,
    /// `x_k^2`
    mean_part: Vec<f64>,
    /// `sigma^2 (A^-1)_kk`
    cov_part: Vec<f64>,
}

fn e_step(ctx: &MLContext, eta: Hyperparameters, with_cov: bool) -> Result<EStep> {
    let f = ctx.factorize(eta)?;
    let x = f.solved();
    let mean_part: Vec<f64> = x.iter().map(|v| v * v).collect();
    let cov_part = if with_cov {
        let inv = f.inverse_factor();
        (0..ctx.n())
            .map(|k| ctx.sigma2() * inv.column(k).norm_squared())
            .collect()
    } else {
        vec![0.0; ctx.n()]
    };
    Ok(EStep {
        eta,
        ml: f.value,
        mean_part,
        cov_part,
    })
}

impl EStep {
    fn second_moment(&self) -> impl Iterator<Item = f64> + Clone + '_ {
        self.mean_part.iter().zip(&self.cov_part).map(|(a, b)| a + b)
    }

    /// `ln Tr(K_beta'^-1 (P + h h^T))` for a candidate `beta'`.
    fn log_trace(&self, beta: f64) -> f64 {
        let n = self.mean_part.len();
        let here = MaxIndexForm::tc_log_weights(n, self.eta.beta);
        let there = MaxIndexForm::tc_log_weights(n, beta);
        let terms: Vec<f64> = self
            .second_moment()
            .zip(here.iter().zip(&there))
            .map(|(s, (a, b))| s.ln() + a - b)
            .collect();
        self.eta.lambda.ln() + log_sum_exp(terms.iter().copied())
    }

    /// Negated profiled lower bound (up to constants): `n ln Q(beta) + ln det K_beta`.
    fn profile(&self, beta: f64) -> f64 {
        let n = self.mean_part.len();
        let logdet: f64 = MaxIndexForm::tc_log_weights(n, beta).iter().sum();
        let v = n as f64 * self.log_trace(beta) + logdet;
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Golden-section minimization of a unimodal-ish scalar function on `[lo, hi]`.
fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64, max_evals: usize) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut evals = 2;
    while (b - a) > tol && evals < max_evals {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        evals += 1;
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn em_like_step(ctx: &MLContext, eta_k: Hyperparameters, method: Updater, cfg: &OptimConfig) -> Result<StepReport> {
    match method {
        Updater::Em => em_step(ctx, eta_k, cfg),
        Updater::Em1 | Updater::Em2 => em_lambda_step(ctx, eta_k, method == Updater::Em2),
        _ => Err(SysIdError::NonFinite("unsupported updater")),
    }
}

/// One full EM iteration over `(lambda, beta)`.
///
/// The M-step profiles `lambda` out in closed form, `lambda*(beta) = Q(beta) / n`,
/// and searches `beta` on `[BETA_EPS, 1 - BETA_EPS]` by golden section; the
/// current `beta` is kept when the search does not improve on it.
pub fn em_step(ctx: &MLContext, eta_k: Hyperparameters, cfg: &OptimConfig) -> Result<StepReport> {
    eta_k.check()?;
    let eta_k = eta_k.clamp_beta_interior();
    if eta_k.lambda == 0.0 {
        return stationary_report(ctx, eta_k, Updater::Em);
    }
    let es = e_step(ctx, eta_k, true)?;
    let (mut beta, mut best) = golden_section(
        |b| es.profile(b),
        BETA_EPS,
        1.0 - BETA_EPS,
        cfg.em_beta_tol,
        cfg.em_max_evals,
    );
    let current = es.profile(eta_k.beta);
    if !(best < current) {
        beta = eta_k.beta;
        best = current;
    }
    let _ = best;
    let lambda = (es.log_trace(beta).exp() / ctx.n() as f64).max(0.0);
    let lambda = if lambda.is_finite() { lambda } else { eta_k.lambda };
    let eta_new = Hyperparameters { lambda, beta };
    let ml_after = neg_log_ml(ctx, eta_new)?;
    Ok(StepReport {
        eta_new,
        ml_before: es.ml,
        ml_after,
        backtracks: 0,
        gamma: 1.0,
        slope: 0.0,
        method: Updater::Em,
    })
}

fn stationary_report(ctx: &MLContext, eta: Hyperparameters, method: Updater) -> Result<StepReport> {
    let ml = neg_log_ml(ctx, eta)?;
    Ok(StepReport {
        eta_new: eta,
        ml_before: ml,
        ml_after: ml,
        backtracks: 0,
        gamma: 1.0,
        slope: 0.0,
        method,
    })
}

fn em_lambda_step(ctx: &MLContext, eta_k: Hyperparameters, with_trace: bool) -> Result<StepReport> {
    eta_k.check()?;
    let method = if with_trace { Updater::Em2 } else { Updater::Em1 };
    let eta_k = eta_k.clamp_beta_interior();
    if eta_k.lambda == 0.0 {
        return stationary_report(ctx, eta_k, method);
    }
    let es = e_step(ctx, eta_k, with_trace)?;
    let total: f64 = es.second_moment().sum();
    let eta_new = Hyperparameters {
        lambda: (eta_k.lambda * total / ctx.n() as f64).max(0.0),
        beta: eta_k.beta,
    };
    let ml_after = neg_log_ml(ctx, eta_new)?;
    Ok(StepReport {
        eta_new,
        ml_before: es.ml,
        ml_after,
        backtracks: 0,
        gamma: 1.0,
        slope: 0.0,
        method,
    })
}

/// `lambda <- h^T K_beta^-1 h / n`, `beta` unchanged.
pub fn em1_lambda(ctx: &MLContext, eta_k: Hyperparameters) -> Result<Hyperparameters> {
    Ok(em_lambda_step(ctx, eta_k, false)?.eta_new)
}

/// `lambda <- (h^T K_beta^-1 h + Tr(K_beta^-1 P)) / n`, `beta` unchanged.
pub fn em2_lambda(ctx: &MLContext, eta_k: Hyperparameters) -> Result<Hyperparameters> {
    Ok(em_lambda_step(ctx, eta_k, true)?.eta_new)
}

/// Dense form of the `lambda` M-step for given posterior moments:
/// `(h^T K_beta^-1 h + Tr(K_beta^-1 P)) / n`.
pub fn em_scale_update(
    h_hat: &nalgebra::DVector<f64>,
    p: &nalgebra::DMatrix<f64>,
    k_beta: &nalgebra::DMatrix<f64>,
) -> Result<f64> {
    let n = h_hat.len();
    let chol = nalgebra::Cholesky::new(k_beta.clone()).ok_or(SysIdError::NotPositiveDefinite)?;
    let quad = h_hat.dot(&chol.solve(h_hat));
    let trace = chol.solve(p).trace();
    Ok((quad + trace) / n as f64)
}

/// Result of iterating an updater to convergence.
#[derive(Debug, Clone)]
pub struct OptOutcome {
    pub eta: Hyperparameters,
    pub value: f64,
    pub iterations: usize,
    /// Final state of the gradient updaters (secant seed for online use).
    pub state: OptimizerState,
}

/// Iterate `method` until `|L_j - L_{j-1}| <= tol (1 + |L_j|)` or the iteration cap.
pub fn opt_until_convergence(
    ctx: &MLContext,
    eta0: Hyperparameters,
    method: Updater,
    config: &OptimConfig,
) -> Result<OptOutcome> {
    opt_until_convergence_with(ctx, eta0, method, config, method.is_lambda_only_em())
}

/// As [`opt_until_convergence`], optionally holding `beta` fixed for the
/// gradient updaters.
pub fn opt_until_convergence_with(
    ctx: &MLContext,
    eta0: Hyperparameters,
    method: Updater,
    config: &OptimConfig,
    lambda_only: bool,
) -> Result<OptOutcome> {
    eta0.check()?;
    let mut state = OptimizerState::new(*config, lambda_only || method.is_lambda_only_em());
    let mut eta = eta0.clamp_beta_interior();
    let mut value = neg_log_ml(ctx, eta)?;
    let mut iterations = 0;
    while iterations < config.opt_max_iter {
        let report = gradient_step(ctx, &mut state, eta, method)?;
        iterations += 1;
        let change = (report.ml_after - value).abs();
        eta = report.eta_new;
        value = report.ml_after;
        if change <= config.opt_tol * (1.0 + value.abs()) {
            break;
        }
    }
    Ok(OptOutcome {
        eta,
        value,
        iterations,
        state,
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::stats::{Batch, SufficientStats};
    use proptest::prelude::*;

    fn context(u: &[f64], e: &[f64], n: usize) -> Option<MLContext> {
        let y: Vec<f64> = (0..u.len())
            .map(|t| (0..n).filter(|&k| k <= t).map(|k| 0.7f64.powi(k as i32) * u[t - k]).sum::<f64>() + 0.3 * e[t])
            .collect();
        let stats = SufficientStats::new(n).ok()?.ingest(&Batch::new(u.to_vec(), y).ok()?).ok()?;
        let ls = stats.ls_estimate().ok()?;
        let s2 = stats.noise_variance(&ls).ok()?;
        MLContext::new(stats, s2).ok()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn steps_stay_feasible_and_satisfy_armijo(
            u in prop::collection::vec(-2.0f64..2.0, 40),
            e in prop::collection::vec(-2.0f64..2.0, 40),
            n in 2usize..6,
            lambda in 0.0f64..20.0,
            beta in 0.0f64..=1.0,
            which in 0usize..6,
            lambda_only in any::<bool>(),
        ) {
            let Some(ctx) = context(&u, &e, n) else { return Ok(()); };
            let methods = [Updater::Bb, Updater::Sgp, Updater::Bfgs, Updater::Em, Updater::Em1, Updater::Em2];
            let method = methods[which];
            let cfg = OptimConfig::default();
            let mut state = OptimizerState::new(cfg, lambda_only);
            let start = Hyperparameters { lambda, beta };
            let mut eta = start;
            for _ in 0..3 {
                let rep = gradient_step(&ctx, &mut state, eta, method).unwrap();
                prop_assert!(rep.eta_new.is_feasible());
                if method.is_gradient() {
                    prop_assert!(rep.ml_after <= rep.ml_before + cfg.armijo_c * rep.gamma * rep.slope + 1e-12 * (1.0 + rep.ml_before.abs()));
                    if lambda_only {
                        prop_assert_eq!(rep.eta_new.beta, eta.clamp_beta_interior().beta);
                    }
                }
                if method.is_lambda_only_em() {
                    prop_assert_eq!(rep.eta_new.beta, eta.clamp_beta_interior().beta);
                }
                if method == Updater::Em {
                    prop_assert!(rep.ml_after <= rep.ml_before + 1e-9 * (1.0 + rep.ml_before.abs()));
                }
                eta = rep.eta_new;
            }
        }
    }
}
