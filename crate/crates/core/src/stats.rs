//! Compressed sufficient statistics `{R, Ytilde, Ybar, Nbar}` of the FIR
//! regression, least-squares estimate and residual noise variance.
//!
//! Regressor row for output sample `y(t)` is `[u(t), u(t-1), ..., u(t-n+1)]`.
//! Inputs before the first sample are zero; the last `n - 1` inputs are kept
//! so that rows spanning a batch boundary are exact. State size depends on
//! `n` only.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SysIdError};
use crate::kernel::checked_cholesky;

/// Floor applied to the residual variance estimate.
pub const SIGMA2_FLOOR: f64 = 1e-12;
/// Rank-one inverse updates are rejected when `1 + x^T R^-1 x` falls below this.
pub const SM_DENOMINATOR_FLOOR: f64 = 1e-12;
/// Relative ridge used when the normal matrix is rank deficient.
pub const RIDGE_FACTOR: f64 = 1e-8;

/// One incoming dataset `{u(t), y(t)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl Batch {
    pub fn new(u: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let batch = Self { u, y };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Samples `range` of this batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        Batch {
            u: self.u[range.clone()].to_vec(),
            y: self.y[range].to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.u.len() != self.y.len() {
            return Err(SysIdError::LengthMismatch {
                u: self.u.len(),
                y: self.y.len(),
            });
        }
        if self.u.is_empty() {
            return Err(SysIdError::EmptyBatch);
        }
        if let Some(index) = self
            .u
            .iter()
            .zip(&self.y)
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(SysIdError::NonFiniteSample { index });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct InverseTracker {
    inv: DMatrix<f64>,
    updates: usize,
}

/// Running `R = Phi^T Phi`, `Ytilde = Phi^T Y`, `Ybar = Y^T Y`, `Nbar`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    n: usize,
    r: DMatrix<f64>,
    y_tilde: DVector<f64>,
    y_bar: f64,
    nbar: usize,
    /// Last `n - 1` inputs, oldest first.
    history: Vec<f64>,
    inverse: Option<InverseTracker>,
}

/// Least-squares estimate, flagged when the ridge fallback was needed.
#[derive(Debug, Clone, PartialEq)]
pub struct LsEstimate {
    pub h: DVector<f64>,
    pub provisional: bool,
}

impl SufficientStats {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SysIdError::ZeroOrder);
        }
        Ok(Self {
            n,
            r: DMatrix::zeros(n, n),
            y_tilde: DVector::zeros(n),
            y_bar: 0.0,
            nbar: 0,
            history: vec![0.0; n - 1],
            inverse: None,
        })
    }

    /// Statistics from raw parts, with zero input history.
    pub fn from_parts(
        r: DMatrix<f64>,
        y_tilde: DVector<f64>,
        y_bar: f64,
        nbar: usize,
    ) -> Result<Self> {
        let n = y_tilde.len();
        if n == 0 {
            return Err(SysIdError::ZeroOrder);
        }
        if r.nrows() != n || r.ncols() != n {
            return Err(SysIdError::DimensionMismatch {
                expected: n,
                got: r.nrows(),
            });
        }
        Ok(Self {
            n,
            r,
            y_tilde,
            y_bar,
            nbar,
            history: vec![0.0; n - 1],
            inverse: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn y_tilde(&self) -> &DVector<f64> {
        &self.y_tilde
    }
    pub fn y_bar(&self) -> f64 {
        self.y_bar
    }
    pub fn nbar(&self) -> usize {
        self.nbar
    }
    pub fn input_history(&self) -> &[f64] {
        &self.history
    }
    pub fn tracks_inverse(&self) -> bool {
        self.inverse.is_some()
    }

    /// Regressor rows for `batch`, given the stored input tail.
    pub fn regressors(&self, batch: &Batch) -> DMatrix<f64> {
        let lag = self.n - 1;
        let ext: Vec<f64> = self.history.iter().chain(&batch.u).copied().collect();
        DMatrix::from_fn(batch.len(), self.n, |t, k| ext[lag + t - k])
    }

    /// Returns the statistics after appending `batch`.
    pub fn ingest(&self, batch: &Batch) -> Result<Self> {
        let mut next = self.clone();
        next.ingest_in_place(batch)?;
        Ok(next)
    }

    pub fn ingest_in_place(&mut self, batch: &Batch) -> Result<()> {
        batch.validate()?;
        if batch.len() == 1 {
            let row = self.regressors(batch).row(0).transpose();
            self.push_row(&row, batch.y[0]);
        } else {
            let phi = self.regressors(batch);
            let y = DVector::from_column_slice(&batch.y);
            self.r += phi.tr_mul(&phi);
            self.y_tilde += phi.tr_mul(&y);
            self.y_bar += y.norm_squared();
            self.nbar += batch.len();
            self.inverse = None;
        }
        self.advance_history(&batch.u);
        Ok(())
    }

    /// Rank-one path for a single regressor row.
    fn push_row(&mut self, row: &DVector<f64>, y: f64) {
        self.r.ger(1.0, row, row, 1.0);
        self.y_tilde.axpy(y, row, 1.0);
        self.y_bar += y * y;
        self.nbar += 1;
        if let Some(tracker) = self.inverse.take() {
            let refreshed = if tracker.updates + 1 >= self.n {
                None
            } else {
                sherman_morrison_inverse_update(&tracker.inv, row)
                    .ok()
                    .map(|inv| InverseTracker {
                        inv,
                        updates: tracker.updates + 1,
                    })
            };
            self.inverse = refreshed.or_else(|| self.fresh_inverse());
        }
    }

    fn advance_history(&mut self, u: &[f64]) {
        let keep = self.n - 1;
        if keep == 0 {
            return;
        }
        let mut ext: Vec<f64> = std::mem::take(&mut self.history);
        ext.extend_from_slice(u);
        self.history = ext[ext.len() - keep..].to_vec();
    }

    fn fresh_inverse(&self) -> Option<InverseTracker> {
        checked_cholesky(&self.r).map(|c| InverseTracker {
            inv: c.inverse(),
            updates: 0,
        })
    }

    /// Start maintaining `R^-1` through rank-one updates. Returns whether
    /// tracking is active (it is not while `R` is singular).
    pub fn track_inverse(&mut self) -> bool {
        if self.inverse.is_none() {
            self.inverse = self.fresh_inverse();
        }
        self.inverse.is_some()
    }

    /// Solve `R h = Ytilde`; uses the tracked inverse when present.
    pub fn ls_estimate(&self) -> Result<DVector<f64>> {
        if let Some(tracker) = &self.inverse {
            return Ok(&tracker.inv * &self.y_tilde);
        }
        self.ls_estimate_factored()
    }

    /// Solve `R h = Ytilde` through a fresh Cholesky factorization.
    pub fn ls_estimate_factored(&self) -> Result<DVector<f64>> {
        let chol = checked_cholesky(&self.r).ok_or(SysIdError::RankDeficient)?;
        Ok(chol.solve(&self.y_tilde))
    }

    /// Least squares with a ridge `1e-8 * trace(R) / n` when `R` is singular.
    pub fn ls_estimate_regularized(&self) -> LsEstimate {
        match self.ls_estimate() {
            Ok(h) => LsEstimate {
                h,
                provisional: false,
            },
            Err(_) => {
                let ridge = RIDGE_FACTOR * self.r.trace() / self.n as f64;
                let mut reg = self.r.clone();
                for i in 0..self.n {
                    reg[(i, i)] += ridge;
                }
                let h = checked_cholesky(&reg)
                    .map(|c| c.solve(&self.y_tilde))
                    .unwrap_or_else(|| DVector::zeros(self.n));
                LsEstimate {
                    h,
                    provisional: true,
                }
            }
        }
    }

    /// `(Ybar - 2 Ytilde^T h + h^T R h) / (Nbar - n)`, floored at `1e-12`.
    pub fn noise_variance(&self, h_ls: &DVector<f64>) -> Result<f64> {
        if self.nbar <= self.n {
            return Err(SysIdError::InsufficientSamples {
                nbar: self.nbar,
                n: self.n,
            });
        }
        if h_ls.len() != self.n {
            return Err(SysIdError::DimensionMismatch {
                expected: self.n,
                got: h_ls.len(),
            });
        }
        let rss = self.y_bar - 2.0 * self.y_tilde.dot(h_ls) + h_ls.dot(&(&self.r * h_ls));
        let s2 = rss / (self.nbar - self.n) as f64;
        if s2.is_nan() {
            return Err(SysIdError::NonFinite("noise variance"));
        }
        Ok(s2.max(SIGMA2_FLOOR))
    }
}

/// `(R + x x^T)^-1` from `R^-1` in O(n^2).
pub fn sherman_morrison_inverse_update(
    r_inv: &DMatrix<f64>,
    row: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if r_inv.nrows() != row.len() || r_inv.ncols() != row.len() {
        return Err(SysIdError::DimensionMismatch {
            expected: r_inv.nrows(),
            got: row.len(),
        });
    }
    let v = r_inv * row;
    let denominator = 1.0 + row.dot(&v);
    if !(denominator > SM_DENOMINATOR_FLOOR) || !denominator.is_finite() {
        return Err(SysIdError::IllConditionedUpdate { denominator });
    }
    let mut out = r_inv.clone();
    out.ger(-1.0 / denominator, &v, &v, 1.0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_batch(rng: &mut ChaCha8Rng, len: usize) -> Batch {
        let u = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let y = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        Batch::new(u, y).unwrap()
    }

    #[test]
    fn hand_built_regressor() {
        let s = SufficientStats::new(2).unwrap();
        let b = Batch::new(vec![1.0, 0.0], vec![1.0, 2.0]).unwrap();
        assert_eq!(s.regressors(&b), DMatrix::identity(2, 2));
        let s = s.ingest(&b).unwrap();
        assert_eq!(s.r(), &DMatrix::identity(2, 2));
        assert_eq!(s.y_tilde(), &DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(s.y_bar(), 5.0);
        assert_eq!(s.nbar(), 2);
    }

    #[test]
    fn history_carries_across_batches() {
        let s = SufficientStats::new(3).unwrap();
        let s = s.ingest(&Batch::new(vec![1.0, 2.0], vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.input_history(), &[1.0, 2.0]);
        let phi = s.regressors(&Batch::new(vec![3.0], vec![0.0]).unwrap());
        assert_eq!(phi.row(0).iter().copied().collect::<Vec<_>>(), vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn rejects_bad_batches() {
        assert_eq!(
            Batch::new(vec![1.0], vec![1.0, 2.0]).unwrap_err(),
            SysIdError::LengthMismatch { u: 1, y: 2 }
        );
        assert_eq!(Batch::new(vec![], vec![]).unwrap_err(), SysIdError::EmptyBatch);
        assert_eq!(
            Batch::new(vec![1.0, f64::NAN], vec![1.0, 2.0]).unwrap_err(),
            SysIdError::NonFiniteSample { index: 1 }
        );
        let s = SufficientStats::new(2).unwrap();
        let bad = Batch { u: vec![1.0], y: vec![f64::INFINITY] };
        assert!(s.ingest(&bad).is_err());
    }

    #[test]
    fn split_equals_concatenated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 4;
        let b1 = random_batch(&mut rng, 7);
        let b2 = random_batch(&mut rng, 5);
        let joined = Batch::new(
            [b1.u.clone(), b2.u.clone()].concat(),
            [b1.y.clone(), b2.y.clone()].concat(),
        )
        .unwrap();
        let s0 = SufficientStats::new(n).unwrap();
        let split = s0.ingest(&b1).unwrap().ingest(&b2).unwrap();
        let whole = s0.ingest(&joined).unwrap();
        assert_relative_eq!(split.r(), whole.r(), max_relative = 1e-12);
        assert_relative_eq!(split.y_tilde(), whole.y_tilde(), max_relative = 1e-12);
        assert_relative_eq!(split.y_bar(), whole.y_bar(), max_relative = 1e-12);
        assert_eq!(split.nbar(), whole.nbar());
        assert_eq!(split.input_history(), whole.input_history());
    }

    #[test]
    fn rank_one_path_matches_general_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = SufficientStats::new(5)
            .unwrap()
            .ingest(&random_batch(&mut rng, 20))
            .unwrap();
        let one = random_batch(&mut rng, 1);
        let fast = base.ingest(&one).unwrap();
        let phi = base.regressors(&one);
        let general = base.r() + phi.tr_mul(&phi);
        for (a, b) in fast.r().iter().zip(general.iter()) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn ls_estimate_cases() {
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let s = SufficientStats::from_parts(DMatrix::identity(2, 2), v.clone(), 5.0, 10).unwrap();
        assert_eq!(s.ls_estimate().unwrap(), v);

        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let s = SufficientStats::from_parts(sing, v, 5.0, 10).unwrap();
        assert_eq!(s.ls_estimate().unwrap_err(), SysIdError::RankDeficient);
        let fallback = s.ls_estimate_regularized();
        assert!(fallback.provisional);
        assert!(fallback.h.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let h: Vec<f64> = (0..n).map(|k| 0.8f64.powi(k as i32)).collect();
        let len = 4 * n;
        let u: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..len)
            .map(|t| (0..n).filter(|&k| k <= t).map(|k| h[k] * u[t - k]).sum())
            .collect();
        let s = SufficientStats::new(n).unwrap().ingest(&Batch::new(u, y).unwrap()).unwrap();
        let est = s.ls_estimate().unwrap();
        for (a, b) in est.iter().zip(&h) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(s.noise_variance(&est).unwrap(), SIGMA2_FLOOR);
    }

    #[test]
    fn noise_variance_formula() {
        let s = SufficientStats::from_parts(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 2.0]),
            5.0,
            12,
        )
        .unwrap();
        let h = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(s.noise_variance(&h).unwrap(), SIGMA2_FLOOR);
        let short = SufficientStats::from_parts(DMatrix::identity(2, 2), h.clone(), 5.0, 2).unwrap();
        assert_eq!(
            short.noise_variance(&h).unwrap_err(),
            SysIdError::InsufficientSamples { nbar: 2, n: 2 }
        );
    }

    #[test]
    fn noise_variance_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 5;
        let len = 20_000;
        let sd = 0.7;
        let u: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..len).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let s = SufficientStats::new(n).unwrap().ingest(&Batch::new(u, y).unwrap()).unwrap();
        let h = s.ls_estimate().unwrap();
        let s2 = s.noise_variance(&h).unwrap();
        assert!((s2 - sd * sd).abs() < 0.1 * sd * sd, "{s2}");
    }

    #[test]
    fn sherman_morrison_cases() {
        let id = DMatrix::identity(3, 3);
        assert_eq!(
            sherman_morrison_inverse_update(&id, &DVector::zeros(3)).unwrap(),
            id
        );

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = a.tr_mul(&a) + DMatrix::identity(5, 5);
        let x = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let inv = r.clone().try_inverse().unwrap();
        let upd = sherman_morrison_inverse_update(&inv, &x).unwrap();
        let direct = (r.clone() + &x * x.transpose()).try_inverse().unwrap();
        assert!((upd - direct).abs().max() < 1e-8);

        let big = &x * 1e9;
        let upd = sherman_morrison_inverse_update(&inv, &big).unwrap();
        assert!(upd.iter().all(|v| v.is_finite()));

        let neg = -DMatrix::identity(2, 2);
        let err = sherman_morrison_inverse_update(&neg, &DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(err, Err(SysIdError::IllConditionedUpdate { .. })));
    }

    #[test]
    fn tracked_inverse_follows_rank_one_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4;
        let mut s = SufficientStats::new(n).unwrap().ingest(&random_batch(&mut rng, 30)).unwrap();
        assert!(s.track_inverse());
        for _ in 0..25 {
            s.ingest_in_place(&random_batch(&mut rng, 1)).unwrap();
            assert!(s.tracks_inverse());
            let a = s.ls_estimate().unwrap();
            let b = s.ls_estimate_factored().unwrap();
            assert!((a - b).abs().max() < 1e-8);
        }
        s.ingest_in_place(&random_batch(&mut rng, 3)).unwrap();
        assert!(!s.tracks_inverse());
    }
}
