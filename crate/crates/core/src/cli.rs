//! Command-line front end: configuration, experiment driver and CSV output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use statrs::statistics::{Data, OrderStatistics};

use crate::error::SysIdError;
use crate::estimator::{EstimatorConfig, MethodSpec, Mode, OnlineEstimator, DEFAULT_BETA0};
use crate::optim::{OptimConfig, Updater};
use crate::simgen::{fit, generate_dataset, Dataset, ExperimentConfig, DEFAULT_BAND};
use crate::stats::Batch;

pub const SCHEMA_LINE: &str = "# onestep-sysid trace v1";
pub const TRACE_HEADER: &str =
    "run_id,method,lambda_only,nk,batch_index,nbar,fit,lambda,beta,sigma2,batch_seconds,cumulative_seconds";
pub const SUMMARY_HEADER: &str =
    "method,lambda_only,nk,runs,fit_median,fit_q1,fit_q3,cumulative_seconds_median,cumulative_seconds_total";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// An updater run either one step per batch or to convergence per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodChoice {
    pub spec: MethodSpec,
    pub mode: Mode,
}

impl MethodChoice {
    pub fn one_step(updater: Updater, lambda_only: bool) -> Self {
        Self {
            spec: MethodSpec::new(updater, lambda_only),
            mode: Mode::OneStep,
        }
    }

    /// The converged SGP baseline.
    pub fn opt() -> Self {
        Self {
            spec: MethodSpec::new(Updater::Sgp, false),
            mode: Mode::Opt,
        }
    }

    pub fn label(&self) -> String {
        match self.mode {
            Mode::OneStep => self.spec.to_string(),
            Mode::Opt if *self == Self::opt() => "OPT".to_string(),
            Mode::Opt => format!("OPT-{}", self.spec),
        }
    }

    /// Parse `bb`, `sgp:lambda`, `em1`, `opt`, ...
    pub fn parse(token: &str, mode: Mode, lambda_only: bool) -> Result<Self, String> {
        let token = token.trim().to_ascii_lowercase();
        if token == "opt" {
            return Ok(Self::opt());
        }
        let (name, flag) = match token.split_once(':') {
            Some((name, "lambda")) => (name, true),
            Some((_, other)) => return Err(format!("unknown method suffix `{other}`")),
            None => (token.as_str(), false),
        };
        let updater: Updater = name.parse()?;
        Ok(Self {
            spec: MethodSpec::new(updater, flag || lambda_only),
            mode,
        })
    }
}

/// Every setting of a run. Keys of the flat config file match the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub n: usize,
    pub n_total: usize,
    pub n_warmup: usize,
    pub nk: Vec<usize>,
    pub snr: f64,
    pub runs: usize,
    pub seed: u64,
    pub methods: Vec<String>,
    pub mode: Mode,
    pub lambda_only: bool,
    pub band: f64,
    pub beta0: f64,
    pub record_timing: bool,
    pub out: PathBuf,
    pub optim: OptimConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            n: 80,
            n_total: 2000,
            n_warmup: 100,
            nk: vec![10],
            snr: 5.0,
            runs: 20,
            seed: 1,
            methods: ["bb", "sgp", "bfgs", "em", "em1", "em2", "opt"].map(String::from).to_vec(),
            mode: Mode::OneStep,
            lambda_only: false,
            band: DEFAULT_BAND,
            beta0: DEFAULT_BETA0,
            record_timing: true,
            out: PathBuf::from("."),
            optim: OptimConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("invalid value `{value}` for key `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value `{value}` for key `{key}`")),
    }
}

impl Config {
    /// Set one key; the error message names the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let key = key.trim();
        let o = &mut self.optim;
        match key {
            "n" => self.n = parse_value(key, value)?,
            "n_total" => self.n_total = parse_value(key, value)?,
            "n_warmup" => self.n_warmup = parse_value(key, value)?,
            "nk" => {
                self.nk = value
                    .split(',')
                    .map(|v| parse_value(key, v))
                    .collect::<Result<_, _>>()?
            }
            "snr" => self.snr = parse_value(key, value)?,
            "runs" => self.runs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "methods" => {
                self.methods = value
                    .split(',')
                    .map(|m| m.trim().to_string())
                    .filter(|m| !m.is_empty())
                    .collect()
            }
            "mode" => self.mode = value.parse().map_err(|e| format!("key `mode`: {e}"))?,
            "lambda_only" => self.lambda_only = parse_bool(key, value)?,
            "band" => self.band = parse_value(key, value)?,
            "beta0" => self.beta0 = parse_value(key, value)?,
            "record_timing" => self.record_timing = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value.trim()),
            "alpha_min" => o.alpha_min = parse_value(key, value)?,
            "alpha_max" => o.alpha_max = parse_value(key, value)?,
            "d_min" => o.d_min = parse_value(key, value)?,
            "d_max" => o.d_max = parse_value(key, value)?,
            "tau0" => o.tau0 = parse_value(key, value)?,
            "armijo_c" => o.armijo_c = parse_value(key, value)?,
            "armijo_delta" => o.armijo_delta = parse_value(key, value)?,
            "max_backtracks" => o.max_backtracks = parse_value(key, value)?,
            "opt_tol" => o.opt_tol = parse_value(key, value)?,
            "opt_max_iter" => o.opt_max_iter = parse_value(key, value)?,
            "em_beta_tol" => o.em_beta_tol = parse_value(key, value)?,
            "em_max_evals" => o.em_max_evals = parse_value(key, value)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Apply a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            self.set(key, value).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    pub fn method_choices(&self) -> Result<Vec<MethodChoice>, String> {
        let mut out = Vec::new();
        for token in &self.methods {
            let choice = MethodChoice::parse(token, self.mode, self.lambda_only)
                .map_err(|e| format!("key `methods`: {e}"))?;
            if !out.contains(&choice) {
                out.push(choice);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), String> {
        let o = &self.optim;
        if self.nk.is_empty() || self.nk.contains(&0) {
            return Err("key `nk`: batch sizes must be positive".into());
        }
        if !(o.alpha_min > 0.0 && o.alpha_min < o.alpha_max) {
            return Err("keys `alpha_min`/`alpha_max`: need 0 < alpha_min < alpha_max".into());
        }
        if !(o.d_min > 0.0 && o.d_min < o.d_max) {
            return Err("keys `d_min`/`d_max`: need 0 < d_min < d_max".into());
        }
        if !(o.tau0 > 0.0) {
            return Err("key `tau0`: must be positive".into());
        }
        if !(o.armijo_c > 0.0 && o.armijo_c < 1.0) {
            return Err("key `armijo_c`: must lie in (0, 1)".into());
        }
        if !(o.armijo_delta > 0.0 && o.armijo_delta < 1.0) {
            return Err("key `armijo_delta`: must lie in (0, 1)".into());
        }
        if !(self.beta0 >= 0.0 && self.beta0 <= 1.0) {
            return Err("key `beta0`: must lie in [0, 1]".into());
        }
        if self.method_choices()?.is_empty() {
            return Err("key `methods`: no method given".into());
        }
        for &nk in &self.nk {
            self.experiment(nk)?.validate()?;
        }
        Ok(())
    }

    pub fn experiment(&self, nk: usize) -> Result<ExperimentConfig, String> {
        Ok(ExperimentConfig {
            n: self.n,
            n_total: self.n_total,
            n_warmup: self.n_warmup,
            n_k: nk,
            snr: self.snr,
            runs: self.runs,
            seed: self.seed,
            methods: self.method_choices()?.into_iter().map(|c| c.spec).collect(),
            band: self.band,
        })
    }

    fn estimator_config(&self) -> EstimatorConfig {
        let mut cfg = EstimatorConfig::new(self.n, MethodSpec::new(Updater::Sgp, false), Mode::Opt);
        cfg.optim = self.optim;
        cfg.beta0 = self.beta0;
        cfg
    }
}

/// One row of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: usize,
    pub method: String,
    pub lambda_only: bool,
    pub nk: usize,
    pub batch_index: usize,
    pub nbar: usize,
    pub fit: Option<f64>,
    pub lambda: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub batch_seconds: f64,
    pub cumulative_seconds: f64,
}

impl RunRecord {
    pub fn csv_row(&self) -> String {
        let fit = self.fit.map(|f| f.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.method,
            self.lambda_only,
            self.nk,
            self.batch_index,
            self.nbar,
            fit,
            self.lambda,
            self.beta,
            self.sigma2,
            self.batch_seconds,
            self.cumulative_seconds
        )
    }
}

pub fn trace_csv(records: &[RunRecord]) -> String {
    let mut s = format!("{SCHEMA_LINE}\n{TRACE_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Run every method over the batches after a shared warmup optimization.
/// `truth` adds the fit column. Timing excludes the warmup.
pub fn run_stream(
    config: &Config,
    run_id: usize,
    u: &[f64],
    y: &[f64],
    nk: usize,
    truth: Option<&nalgebra::DVector<f64>>,
    warm: Option<&OnlineEstimator>,
) -> Result<Vec<RunRecord>, SysIdError> {
    let choices = config.method_choices().map_err(|_| SysIdError::NoEstimate)?;
    let n_warmup = config.n_warmup.min(u.len());
    let owned;
    let warm = match warm {
        Some(w) => w,
        None => {
            let warmup = Batch::new(u[..n_warmup].to_vec(), y[..n_warmup].to_vec())?;
            owned = OnlineEstimator::initialize(&warmup, config.estimator_config())?;
            &owned
        }
    };
    let count = (u.len() - n_warmup) / nk;
    let batches: Vec<Batch> = (0..count)
        .map(|b| {
            let s = n_warmup + b * nk;
            Batch::new(u[s..s + nk].to_vec(), y[s..s + nk].to_vec())
        })
        .collect::<Result<_, _>>()?;
    // methods advance batch by batch together so their timings see the same load
    let mut lanes: Vec<_> = choices
        .iter()
        .map(|c| (c, warm.with_method(c.spec, c.mode), Duration::ZERO, Vec::with_capacity(count)))
        .collect();
    for (b, batch) in batches.iter().enumerate() {
        for (choice, est, cumulative, records) in lanes.iter_mut() {
            let snap = est.process_batch(batch)?;
            *cumulative += snap.elapsed;
            let (batch_seconds, cumulative_seconds) = if config.record_timing {
                (snap.elapsed.as_secs_f64(), cumulative.as_secs_f64())
            } else {
                (0.0, 0.0)
            };
            let fit = truth.map(|h| fit(h, &snap.h_hat)).transpose()?;
            records.push(RunRecord {
                run_id,
                method: choice.label(),
                lambda_only: choice.spec.lambda_only,
                nk,
                batch_index: b,
                nbar: snap.nbar,
                fit,
                lambda: snap.eta.lambda,
                beta: snap.eta.beta,
                sigma2: snap.sigma2,
                batch_seconds,
                cumulative_seconds,
            });
        }
    }
    let records = lanes.into_iter().flat_map(|(_, _, _, r)| r).collect();
    Ok(records)
}

/// All methods and batch sizes on one synthetic dataset.
pub fn run_dataset(config: &Config, run_id: usize, data: &Dataset) -> Result<Vec<RunRecord>, SysIdError> {
    let n_warmup = config.n_warmup.min(data.u.len());
    let warmup = Batch::new(data.u[..n_warmup].to_vec(), data.y[..n_warmup].to_vec())?;
    let warm = OnlineEstimator::initialize(&warmup, config.estimator_config())?;
    let mut out = Vec::new();
    for &nk in &config.nk {
        out.extend(run_stream(config, run_id, &data.u, &data.y, nk, Some(&data.system.h_true), Some(&warm))?);
    }
    Ok(out)
}

/// Monte Carlo over `config.runs` independent datasets, in parallel; records
/// come back in run order.
pub fn run_montecarlo(config: &Config) -> Result<Vec<RunRecord>, SysIdError> {
    let exp = config.experiment(config.nk[0]).map_err(|_| SysIdError::NoEstimate)?;
    let per_run: Vec<Result<Vec<RunRecord>, SysIdError>> = (0..config.runs)
        .into_par_iter()
        .map(|run| {
            let data = generate_dataset(&exp, run as u64)?;
            run_dataset(config, run, &data)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_run {
        out.extend(r?);
    }
    Ok(out)
}

/// Per (method, nk): final-batch fit quartiles and cumulative time.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub lambda_only: bool,
    pub nk: usize,
    pub runs: usize,
    pub fit_median: f64,
    pub fit_q1: f64,
    pub fit_q3: f64,
    pub cumulative_seconds_median: f64,
    pub cumulative_seconds_total: f64,
}

/// Last record of every (run, method, nk) group, grouped by (method, nk) in
/// first-appearance order.
pub fn final_records(records: &[RunRecord]) -> Vec<((String, usize), Vec<RunRecord>)> {
    let mut last: BTreeMap<(usize, String, usize), RunRecord> = BTreeMap::new();
    let mut order: Vec<(String, usize)> = Vec::new();
    for r in records {
        let key = (r.method.clone(), r.nk);
        if !order.contains(&key) {
            order.push(key);
        }
        let slot = last.entry((r.run_id, r.method.clone(), r.nk)).or_insert_with(|| r.clone());
        if r.batch_index >= slot.batch_index {
            *slot = r.clone();
        }
    }
    order
        .into_iter()
        .map(|key| {
            let group = last
                .values()
                .filter(|r| r.method == key.0 && r.nk == key.1)
                .cloned()
                .collect();
            (key, group)
        })
        .collect()
}

pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    final_records(records)
        .into_iter()
        .map(|((method, nk), group)| {
            let mut fits = Data::new(group.iter().map(|r| r.fit.unwrap_or(f64::NAN)).collect::<Vec<_>>());
            let times: Vec<f64> = group.iter().map(|r| r.cumulative_seconds).collect();
            let total = times.iter().sum();
            let mut times = Data::new(times);
            SummaryRow {
                method,
                lambda_only: group[0].lambda_only,
                nk,
                runs: group.len(),
                fit_median: fits.median(),
                fit_q1: fits.lower_quartile(),
                fit_q3: fits.upper_quartile(),
                cumulative_seconds_median: times.median(),
                cumulative_seconds_total: total,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SCHEMA_LINE}\n{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.lambda_only,
            r.nk,
            r.runs,
            r.fit_median,
            r.fit_q1,
            r.fit_q3,
            r.cumulative_seconds_median,
            r.cumulative_seconds_total
        );
    }
    s
}

/// Two-column `u,y` text.
pub fn dataset_csv(u: &[f64], y: &[f64]) -> String {
    let mut s = String::from("u,y\n");
    for (a, b) in u.iter().zip(y) {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

pub fn parse_dataset(text: &str) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut u = Vec::new();
    let mut y = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim().replace(' ', "") == "u,y" => {}
        Some((i, _)) => return Err(format!("line {}: expected header `u,y`", i + 1)),
        None => return Err("dataset is empty".into()),
    }
    for (i, line) in lines {
        let mut fields = line.split(',');
        let parse = |f: Option<&str>| f.and_then(|v| v.trim().parse::<f64>().ok()).filter(|v| v.is_finite());
        match (parse(fields.next()), parse(fields.next()), fields.next()) {
            (Some(a), Some(b), None) => {
                u.push(a);
                y.push(b);
            }
            _ => return Err(format!("line {}: malformed row `{}`", i + 1, line.trim())),
        }
    }
    if u.is_empty() {
        return Err("dataset has no samples".into());
    }
    Ok((u, y))
}

/// Writes files into a directory and removes them again unless committed.
struct OutputSet {
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputSet {
    fn new() -> Self {
        Self {
            written: Vec::new(),
            committed: false,
        }
    }

    fn write(&mut self, path: PathBuf, contents: &str) -> std::io::Result<()> {
        self.written.push(path.clone());
        fs::write(path, contents)
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<SysIdError> for CliError {
    fn from(e: SysIdError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_outputs(dir: &Path, files: &[(&str, String)]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut set = OutputSet::new();
    for (name, contents) in files {
        let path = dir.join(name);
        set.write(path.clone(), contents).map_err(|e| io_err(&path, e))?;
    }
    set.committed = true;
    Ok(())
}

pub fn cmd_single(config: &Config) -> Result<(), CliError> {
    config.validate().map_err(CliError::Config)?;
    let exp = config.experiment(config.nk[0]).map_err(CliError::Config)?;
    let data = generate_dataset(&exp, 0)?;
    let records = run_dataset(config, 0, &data)?;
    let mut system = String::from("lag,h\n");
    for (k, v) in data.system.h_true.iter().enumerate() {
        let _ = writeln!(system, "{k},{v}");
    }
    write_outputs(
        &config.out,
        &[
            ("single_trace.csv", trace_csv(&records)),
            ("system.csv", system),
            ("data.csv", dataset_csv(&data.u, &data.y)),
        ],
    )
}

pub fn cmd_montecarlo(config: &Config) -> Result<(), CliError> {
    config.validate().map_err(CliError::Config)?;
    let records = run_montecarlo(config)?;
    let summary = summarize(&records);
    write_outputs(
        &config.out,
        &[("runs.csv", trace_csv(&records)), ("summary.csv", summary_csv(&summary))],
    )
}

pub fn cmd_stream(dataset: &Path, config: &Config) -> Result<(), CliError> {
    config.validate().map_err(CliError::Config)?;
    let text = fs::read_to_string(dataset).map_err(|e| CliError::Config(format!("{}: {e}", dataset.display())))?;
    let (u, y) = parse_dataset(&text).map_err(|e| CliError::Config(format!("{}: {e}", dataset.display())))?;
    if u.len() <= config.n_warmup {
        return Err(CliError::Config(format!(
            "{}: {} samples, need more than n_warmup = {}",
            dataset.display(),
            u.len(),
            config.n_warmup
        )));
    }
    let mut records = Vec::new();
    let warmup = Batch::new(u[..config.n_warmup].to_vec(), y[..config.n_warmup].to_vec())?;
    let warm = OnlineEstimator::initialize(&warmup, config.estimator_config())?;
    for &nk in &config.nk {
        records.extend(run_stream(config, 0, &u, &y, nk, None, Some(&warm))?);
    }
    write_outputs(&config.out, &[("stream_trace.csv", trace_csv(&records))])
}

#[derive(Debug, Parser)]
#[command(name = "onestep-sysid", version, about = "Online kernel-based FIR identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One synthetic system, every configured method and batch size.
    Single(CommonArgs),
    /// Monte Carlo study over independent synthetic systems.
    Montecarlo(CommonArgs),
    /// Identify from a `u,y` text file.
    Stream {
        dataset: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated, e.g. `bb,sgp:lambda,em1,opt`.
    #[arg(long)]
    pub methods: Option<String>,
    /// Batch size, or a comma-separated list.
    #[arg(long)]
    pub nk: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = ["onestep", "opt"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub lambda_only: bool,
    /// Override any config key, `--set key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<Config, CliError> {
        let mut cfg = Config::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
        let mut set = |k: &str, v: &str| cfg.set(k, v).map_err(CliError::Config);
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{kv}`")))?;
            set(k, v)?;
        }
        if let Some(v) = self.seed {
            set("seed", &v.to_string())?;
        }
        if let Some(v) = &self.methods {
            set("methods", v)?;
        }
        if let Some(v) = &self.nk {
            set("nk", v)?;
        }
        if let Some(v) = self.runs {
            set("runs", &v.to_string())?;
        }
        if let Some(v) = &self.mode {
            set("mode", v)?;
        }
        if self.lambda_only {
            set("lambda_only", "true")?;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        Ok(cfg)
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Single(a) => a.resolve().and_then(|c| cmd_single(&c)),
        Command::Montecarlo(a) => a.resolve().and_then(|c| cmd_montecarlo(&c)),
        Command::Stream { dataset, common } => common.resolve().and_then(|c| cmd_stream(dataset, &c)),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
