//! Online identification loop: per batch, update the statistics, refresh the
//! noise variance from least squares, move the hyperparameters and output the
//! posterior-mean impulse response.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::DVector;

use crate::error::{Result, SysIdError};
use crate::kernel::Hyperparameters;
use crate::likelihood::{posterior_mean, MLContext};
use crate::optim::{gradient_step, opt_until_convergence, opt_until_convergence_with, OptimConfig, OptimizerState, Updater};
use crate::stats::{Batch, SufficientStats, SIGMA2_FLOOR};

/// Decay seed for the warmup optimization.
pub const DEFAULT_BETA0: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    OneStep,
    Opt,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "onestep" | "one_step" | "1step" => Ok(Mode::OneStep),
            "opt" => Ok(Mode::Opt),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// An updater together with its `lambda`-only flag. EM1 and EM2 are always
/// `lambda`-only; EM with the flag set behaves as EM2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodSpec {
    pub updater: Updater,
    pub lambda_only: bool,
}

impl MethodSpec {
    pub fn new(updater: Updater, lambda_only: bool) -> Self {
        let updater = match (updater, lambda_only) {
            (Updater::Em, true) => Updater::Em2,
            (u, _) => u,
        };
        Self {
            updater,
            lambda_only: lambda_only || updater.is_lambda_only_em(),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lambda_only && self.updater.is_gradient() {
            write!(f, "{}:lambda", self.updater)
        } else {
            write!(f, "{}", self.updater)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    pub n: usize,
    pub method: MethodSpec,
    pub mode: Mode,
    pub optim: OptimConfig,
    pub beta0: f64,
}

impl EstimatorConfig {
    pub fn new(n: usize, method: MethodSpec, mode: Mode) -> Self {
        Self {
            n,
            method,
            mode,
            optim: OptimConfig::default(),
            beta0: DEFAULT_BETA0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSnapshot {
    pub h_hat: DVector<f64>,
    pub eta: Hyperparameters,
    pub sigma2: f64,
    /// Wall time of the `process_batch` call that produced this snapshot.
    pub elapsed: Duration,
    pub nbar: usize,
    /// Updater iterations spent on this batch.
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct OnlineEstimator {
    stats: SufficientStats,
    eta: Hyperparameters,
    sigma2: f64,
    opt_state: OptimizerState,
    /// Warmup optimizer state, kept to reseed under another method.
    warm_state: OptimizerState,
    config: EstimatorConfig,
    last: Option<EstimateSnapshot>,
}

/// Noise variance from the LS residual; while `Nbar <= n` the residual has no
/// degrees of freedom and the output power `Ybar / Nbar` stands in.
fn refresh_sigma2(stats: &SufficientStats) -> Result<f64> {
    if stats.nbar() <= stats.n() {
        let s2 = stats.y_bar() / stats.nbar().max(1) as f64;
        return if s2.is_finite() {
            Ok(s2.max(SIGMA2_FLOOR))
        } else {
            Err(SysIdError::NonFinite("noise variance"))
        };
    }
    let ls = stats.ls_estimate_regularized();
    stats.noise_variance(&ls.h)
}

impl OnlineEstimator {
    /// Ingest the warmup data and optimize the hyperparameters to convergence
    /// with SGP over both components, starting from `(Ybar / (Nbar n), beta0)`.
    pub fn initialize(warmup: &Batch, config: EstimatorConfig) -> Result<Self> {
        if warmup.is_empty() {
            return Err(SysIdError::EmptyBatch);
        }
        let stats = SufficientStats::new(config.n)?.ingest(warmup)?;
        let sigma2 = refresh_sigma2(&stats)?;
        let lambda0 = stats.y_bar() / (stats.nbar() as f64 * config.n as f64);
        let eta0 = Hyperparameters::new(lambda0, config.beta0)?;
        let ctx = MLContext::new(stats, sigma2)?;
        let outcome = opt_until_convergence(&ctx, eta0, Updater::Sgp, &config.optim)?;
        let stats = ctx.stats().clone();
        let opt_state = OptimizerState::seeded_from(&outcome.state, config.method.lambda_only);
        Ok(Self {
            stats,
            eta: outcome.eta,
            sigma2,
            opt_state,
            warm_state: outcome.state,
            config,
            last: None,
        })
    }

    /// Same warmup result, different updater or mode. Meant for estimators
    /// that have not processed any batch yet.
    pub fn with_method(&self, method: MethodSpec, mode: Mode) -> Self {
        let mut next = self.clone();
        next.config.method = method;
        next.config.mode = mode;
        next.opt_state = OptimizerState::seeded_from(&self.warm_state, method.lambda_only);
        next
    }

    pub fn eta(&self) -> Hyperparameters {
        self.eta
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn stats(&self) -> &SufficientStats {
        &self.stats
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    /// Run one identification cycle on `batch`. On error the estimator is
    /// left exactly as it was.
    pub fn process_batch(&mut self, batch: &Batch) -> Result<EstimateSnapshot> {
        let start = Instant::now();
        if batch.is_empty() {
            return Err(SysIdError::EmptyBatch);
        }
        let mut stats = self.stats.clone();
        if batch.len() == 1 {
            stats.track_inverse();
        }
        stats.ingest_in_place(batch)?;
        let sigma2 = refresh_sigma2(&stats)?;
        let ctx = MLContext::new(stats, sigma2)?;

        let method = self.config.method;
        let mut opt_state = self.opt_state.clone();
        let (eta, iterations) = match self.config.mode {
            Mode::OneStep => {
                let report = gradient_step(&ctx, &mut opt_state, self.eta, method.updater)?;
                (report.eta_new, 1)
            }
            Mode::Opt => {
                let outcome = opt_until_convergence_with(&ctx, self.eta, method.updater, &self.config.optim, method.lambda_only)?;
                (outcome.eta, outcome.iterations)
            }
        };
        let h_hat = posterior_mean(&ctx, eta)?;
        let nbar = ctx.stats().nbar();

        self.stats = ctx.stats().clone();
        self.sigma2 = sigma2;
        self.eta = eta;
        self.opt_state = opt_state;
        let snapshot = EstimateSnapshot {
            h_hat,
            eta,
            sigma2,
            elapsed: start.elapsed(),
            nbar,
            iterations,
        };
        self.last = Some(snapshot.clone());
        Ok(snapshot)
    }

    /// The snapshot of the last successful batch.
    pub fn current_estimate(&self) -> Result<EstimateSnapshot> {
        self.last.clone().ok_or(SysIdError::NoEstimate)
    }
}
