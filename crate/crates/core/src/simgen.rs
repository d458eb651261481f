//! Synthetic experiments: random stable SISO systems, band-limited Gaussian
//! inputs, output noise at a prescribed SNR, and the impulse-response fit.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;

use crate::error::{Result, SysIdError};
use crate::estimator::MethodSpec;
use crate::stats::Batch;

pub const ORDER_RANGE: RangeInclusive<usize> = 5..=10;
pub const POLE_RADIUS: f64 = 0.95;
/// Horizon at which the truth must have decayed.
pub const DECAY_HORIZON: usize = 80;
pub const DECAY_RATIO: f64 = 1e-3;
pub const MAX_SYSTEM_ATTEMPTS: usize = 50;
pub const LOWPASS_TAPS: usize = 64;
/// Default passband edge as a fraction of the Nyquist frequency.
pub const DEFAULT_BAND: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrueSystem {
    pub poles: Vec<Complex64>,
    pub zeros: Vec<Complex64>,
    pub gain: f64,
    pub order: usize,
    /// First `n` impulse-response samples, starting at lag 0.
    pub h_true: DVector<f64>,
}

/// A real first- or second-order factor `b(z^-1) / a(z^-1)`.
#[derive(Debug, Clone, Copy)]
struct Section {
    b: [f64; 3],
    a: [f64; 3],
}

impl Section {
    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[1] * y1 - self.a[2] * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

/// Coefficients of `prod (1 - r z^-1)` over a conjugate-closed group of
/// at most two roots.
fn quadratic(roots: &[Complex64]) -> [f64; 3] {
    match roots {
        [r] => [1.0, -r.re, 0.0],
        [r, s] => [1.0, -(r + s).re, (r * s).re],
        _ => [1.0, 0.0, 0.0],
    }
}

/// Split a conjugate-closed root list (pairs first, then at most one real
/// root) into groups of one or two.
fn groups(roots: &[Complex64]) -> Vec<&[Complex64]> {
    roots.chunks(2).collect()
}

/// Roots uniform in the disk of radius `radius`: conjugate pairs, plus one
/// real root when `count` is odd.
fn sample_roots(rng: &mut impl Rng, count: usize, radius: f64) -> Vec<Complex64> {
    let mut roots = Vec::with_capacity(count);
    for _ in 0..count / 2 {
        let r = radius * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..PI);
        let p = Complex64::from_polar(r, theta);
        roots.push(p);
        roots.push(p.conj());
    }
    if count % 2 == 1 {
        roots.push(Complex64::new(rng.random_range(-radius..=radius), 0.0));
    }
    roots
}

impl TrueSystem {
    /// Impulse response of `gain * prod(1 - z_i q^-1) / prod(1 - p_i q^-1)`.
    pub fn impulse_response(&self, len: usize) -> Vec<f64> {
        let mut x = vec![0.0; len];
        if len == 0 {
            return x;
        }
        x[0] = self.gain;
        let zg = groups(&self.zeros);
        let pg = groups(&self.poles);
        for i in 0..zg.len().max(pg.len()) {
            let section = Section {
                b: zg.get(i).map_or([1.0, 0.0, 0.0], |g| quadratic(g)),
                a: pg.get(i).map_or([1.0, 0.0, 0.0], |g| quadratic(g)),
            };
            section.run(&mut x);
        }
        x
    }

    /// Numerator and denominator polynomial coefficients in `q^-1`.
    pub fn transfer_function(&self) -> (Vec<f64>, Vec<f64>) {
        let expand = |roots: &[Complex64]| {
            let mut c = vec![Complex64::new(1.0, 0.0)];
            for r in roots {
                let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
                for (k, v) in c.iter().enumerate() {
                    next[k] += v;
                    next[k + 1] -= v * r;
                }
                c = next;
            }
            c.into_iter().map(|v| v.re).collect::<Vec<f64>>()
        };
        let num = expand(&self.zeros).into_iter().map(|v| v * self.gain).collect();
        (num, expand(&self.poles))
    }
}

/// Draw a random stable system of order uniform in `order_range`, truncated
/// to `n` taps and scaled to unit norm. Poles and zeros are redrawn (order
/// kept) until the response has decayed by the horizon.
pub fn random_system(
    rng: &mut impl Rng,
    order_range: RangeInclusive<usize>,
    pole_radius: f64,
    n: usize,
) -> Result<TrueSystem> {
    if n == 0 {
        return Err(SysIdError::ZeroOrder);
    }
    let order = rng.random_range(order_range);
    let horizon = n.max(DECAY_HORIZON);
    for _ in 0..MAX_SYSTEM_ATTEMPTS {
        let poles = sample_roots(rng, order, pole_radius);
        let zeros = sample_roots(rng, order, 1.0);
        let mut sys = TrueSystem {
            poles,
            zeros,
            gain: 1.0,
            order,
            h_true: DVector::zeros(n),
        };
        let h = sys.impulse_response(horizon);
        let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(peak > 0.0) || h[DECAY_HORIZON - 1].abs() > DECAY_RATIO * peak {
            continue;
        }
        let norm = h[..n].iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            continue;
        }
        sys.gain = 1.0 / norm;
        sys.h_true = DVector::from_iterator(n, h[..n].iter().map(|v| v / norm));
        return Ok(sys);
    }
    Err(SysIdError::SystemGeneration(MAX_SYSTEM_ATTEMPTS))
}

/// Hamming-windowed sinc low-pass with cutoff `band` (fraction of Nyquist)
/// and unit DC gain.
pub fn lowpass_taps(band: f64, taps: usize) -> Vec<f64> {
    let fc = band / 2.0;
    let mid = (taps as f64 - 1.0) / 2.0;
    let mut h: Vec<f64> = (0..taps)
        .map(|k| {
            let t = k as f64 - mid;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            let window = 0.54 - 0.46 * (2.0 * PI * k as f64 / (taps as f64 - 1.0)).cos();
            sinc * window
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    h
}

/// Gaussian input band-limited to `[0, band]` of Nyquist, unit sample variance.
pub fn bandlimited_input(rng: &mut impl Rng, len: usize, band: f64) -> Vec<f64> {
    let taps = lowpass_taps(band, LOWPASS_TAPS);
    let white: Vec<f64> = (0..len + taps.len() - 1).map(|_| rng.sample(StandardNormal)).collect();
    let mut u: Vec<f64> = (0..len)
        .map(|t| taps.iter().enumerate().map(|(k, c)| c * white[t + taps.len() - 1 - k]).sum())
        .collect();
    if len >= 2 {
        let mean = u.iter().sum::<f64>() / len as f64;
        let var = u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (len as f64 - 1.0);
        let scale = 1.0 / var.sqrt();
        u.iter_mut().for_each(|v| *v *= scale);
    }
    u
}

/// FIR convolution `sum_k h[k] u[t-k]` with zero initial conditions.
pub fn fir_filter(h: &[f64], u: &[f64]) -> Vec<f64> {
    (0..u.len())
        .map(|t| h.iter().take(t + 1).enumerate().map(|(k, c)| c * u[t - k]).sum())
        .collect()
}

fn sample_variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub y: Vec<f64>,
    pub y0: Vec<f64>,
    pub sigma2_true: f64,
}

/// Noise-free output through the truncated response, plus white noise with
/// variance `var(y0) / snr`.
pub fn simulate_io(sys: &TrueSystem, u: &[f64], snr: f64, rng: &mut impl Rng) -> SimOutput {
    let y0 = fir_filter(sys.h_true.as_slice(), u);
    let sigma2_true = sample_variance(&y0) / snr;
    let sd = sigma2_true.sqrt();
    let y = y0
        .iter()
        .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    SimOutput { y, y0, sigma2_true }
}

/// `100 (1 - |h - h_hat| / |h|)`.
pub fn fit(h_true: &DVector<f64>, h_hat: &DVector<f64>) -> Result<f64> {
    if h_true.len() != h_hat.len() {
        return Err(SysIdError::DimensionMismatch {
            expected: h_true.len(),
            got: h_hat.len(),
        });
    }
    let norm = h_true.norm();
    if norm == 0.0 {
        return Err(SysIdError::ZeroTruth);
    }
    Ok(100.0 * (1.0 - (h_true - h_hat).norm() / norm))
}

/// Monte Carlo experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub n: usize,
    pub n_total: usize,
    pub n_warmup: usize,
    pub n_k: usize,
    pub snr: f64,
    pub runs: usize,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    pub band: f64,
}

impl ExperimentConfig {
    pub fn batches(&self) -> usize {
        self.n_total.saturating_sub(self.n_warmup) / self.n_k.max(1)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n == 0 {
            return Err("n must be positive".into());
        }
        if self.n_k == 0 {
            return Err("nk must be positive".into());
        }
        if self.n_warmup == 0 || self.n_warmup > self.n_total {
            return Err("n_warmup must lie in 1..=n_total".into());
        }
        if !(self.snr > 0.0) {
            return Err("snr must be positive".into());
        }
        if !(self.band > 0.0 && self.band <= 1.0) {
            return Err("band must lie in (0, 1]".into());
        }
        if self.methods.is_empty() {
            return Err("methods must not be empty".into());
        }
        Ok(())
    }
}

/// One synthetic data record.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: TrueSystem,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma2_true: f64,
}

impl Dataset {
    pub fn warmup(&self, len: usize) -> Batch {
        Batch::new(self.u[..len].to_vec(), self.y[..len].to_vec()).expect("simulated samples are finite")
    }

    /// Consecutive batches of `n_k` samples after the warmup.
    pub fn batches(&self, warmup: usize, n_k: usize) -> Vec<Batch> {
        let count = self.u.len().saturating_sub(warmup) / n_k;
        (0..count)
            .map(|b| {
                let s = warmup + b * n_k;
                Batch::new(self.u[s..s + n_k].to_vec(), self.y[s..s + n_k].to_vec()).expect("simulated samples are finite")
            })
            .collect()
    }
}

/// Independent stream for run `run_index` of an experiment seeded by `seed`.
pub fn run_rng(seed: u64, run_index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(run_index);
    rng
}

/// System, input and noisy output for one Monte Carlo run.
pub fn generate_dataset(cfg: &ExperimentConfig, run_index: u64) -> Result<Dataset> {
    let mut rng = run_rng(cfg.seed, run_index);
    let system = random_system(&mut rng, ORDER_RANGE, POLE_RADIUS, cfg.n)?;
    let u = bandlimited_input(&mut rng, cfg.n_total, cfg.band);
    let out = simulate_io(&system, &u, cfg.snr, &mut rng);
    Ok(Dataset {
        system,
        u,
        y: out.y,
        sigma2_true: out.sigma2_true,
    })
}
