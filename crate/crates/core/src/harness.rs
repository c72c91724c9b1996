//! Experiment sweeps over the Merton problem, run aggregation, checkpoints
//! and result files.
//!
//! An experiment is a list of cells (one architecture, dimension, sample
//! size and stop rule each) with `runs` independent repetitions per cell.
//! Every repetition draws its own training and validation sets and its own
//! initialization, all derived from the base seed:
//!
//! ```text
//! seed(cell, run, role) = derive_seed([base_seed, cell, run, role])
//! ```
//!
//! with roles 1 (training set), 2 (validation set), 3 (third test set),
//! 4 (network initialization) and 5 (minibatch shuffling).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{ControlProblem, FeedbackAction};
use crate::diagnostics::{relative_performance, GapReport};
use crate::error::{Error, Result};
use crate::nn::{param_count, AdamConfig, InputMode, MlpParams, NetConfig, NetworkPolicy};
use crate::problems::{
    merton_problem, production_problem, sample_training_set, MertonParams, ProblemInstance,
    ProductionParams,
};
use crate::rng;
use crate::stats;
use crate::trainer::{self, StopReason, StopRule, TrainConfig};

pub const ROLE_TRAIN: u64 = 1;
pub const ROLE_VALIDATION: u64 = 2;
pub const ROLE_TEST: u64 = 3;
pub const ROLE_INIT: u64 = 4;
pub const ROLE_SHUFFLE: u64 = 5;

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "OVERLEARN_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// One cell per entry of `dims`.
    DimensionSweep,
    /// One cell per entry of `dims`; the first hidden layer is resized so
    /// every network has the parameter count of the `reference_dim` network.
    ParamsEquivalentSweep,
    /// One cell per entry of `epochs`, each trained for exactly that many
    /// epochs at `dims[0]`.
    AggressiveEpochs,
    /// One cell per entry of `sample_sizes` at `dims[0]`.
    SampleSizeSweep,
    /// A single cell at `dims[0]`, `sample_sizes[0]`.
    Single,
}

/// Which set provides the out-of-sample figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// The early-stopping validation set.
    #[default]
    Paired,
    /// A third independent set of the same size.
    Third,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 200,
            tolerance: 1e-6,
            patience: 1,
            adam: AdamConfig::default(),
        }
    }
}

/// Merton parameters shared by every cell; the dimension comes from the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MertonSettings {
    pub lambda: f64,
    pub r: f64,
    pub m: f64,
    pub s: f64,
    pub z1_low: f64,
    pub z1_high: f64,
    pub zeta_clip_sigmas: f64,
    /// Half-width of the control box `[-box_bound, box_bound]^d`.
    pub box_bound: f64,
}

impl Default for MertonSettings {
    fn default() -> Self {
        let p = MertonParams::default_with_dim(1);
        Self {
            lambda: p.lambda,
            r: p.r,
            m: p.m,
            s: p.s,
            z1_low: p.z1_low,
            z1_high: p.z1_high,
            zeta_clip_sigmas: p.zeta_clip_sigmas,
            box_bound: 20.0,
        }
    }
}

impl MertonSettings {
    pub fn params(&self, d: usize) -> MertonParams {
        let mut p = MertonParams::default_with_dim(d);
        p.lambda = self.lambda;
        p.r = self.r;
        p.m = self.m;
        p.s = self.s;
        p.z1_low = self.z1_low;
        p.z1_high = self.z1_high;
        p.zeta_clip_sigmas = self.zeta_clip_sigmas;
        p
    }

    pub fn instance(&self, d: usize) -> Result<ProblemInstance> {
        merton_problem(&self.params(d), self.box_bound)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: ExperimentKind,
    pub dims: Vec<usize>,
    pub sample_sizes: Vec<usize>,
    pub hidden_widths: Vec<usize>,
    pub reference_dim: Option<usize>,
    pub epochs: Vec<usize>,
    pub runs: usize,
    pub base_seed: u64,
    /// Worker threads; `None` reads the environment, then the CPU count.
    pub threads: Option<usize>,
    pub input_mode: InputMode,
    pub validation: ValidationMode,
    pub train: TrainSettings,
    pub merton: MertonSettings,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            kind: ExperimentKind::Single,
            dims: vec![10],
            sample_sizes: vec![100_000],
            hidden_widths: vec![10, 10, 10],
            reference_dim: None,
            epochs: Vec::new(),
            runs: 5,
            base_seed: 0,
            threads: None,
            input_mode: InputMode::Noise,
            validation: ValidationMode::Paired,
            train: TrainSettings::default(),
            merton: MertonSettings::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::config("dims must be a non-empty list of positive integers"));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(Error::config(
                "sample_sizes must be a non-empty list of positive integers",
            ));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::config("hidden_widths must be non-empty and positive"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be at least 1"));
        }
        match self.kind {
            ExperimentKind::ParamsEquivalentSweep if self.reference_dim.is_none() => {
                return Err(Error::config("params_equivalent_sweep needs reference_dim"));
            }
            ExperimentKind::AggressiveEpochs if self.epochs.is_empty() => {
                return Err(Error::config("aggressive_epochs needs a non-empty epochs list"));
            }
            _ => {}
        }
        let smallest = *self.sample_sizes.iter().min().expect("non-empty");
        if self.train.batch_size == 0 || self.train.batch_size > smallest {
            return Err(Error::config(format!(
                "batch_size must be in 1..={smallest}"
            )));
        }
        self.train_config(StopRule::conservative(), 0).validate()?;
        self.merton.params(self.dims[0]).validate()?;
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form of the configuration.
    pub fn config_hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        rng::fnv1a(text.as_bytes())
    }

    fn train_config(&self, stop_rule: StopRule, shuffle_seed: u64) -> TrainConfig {
        let stop_rule = match stop_rule {
            StopRule::Conservative { .. } => StopRule::Conservative {
                tolerance: self.train.tolerance,
                patience: self.train.patience,
            },
            fixed => fixed,
        };
        TrainConfig {
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            stop_rule,
            shuffle_seed,
            adam: self.train.adam,
        }
    }

    /// The cells of this experiment in order.
    pub fn cells(&self) -> Result<Vec<CellSpec>> {
        let cons = StopRule::conservative();
        let n0 = self.sample_sizes[0];
        let d0 = self.dims[0];
        let cell = |index, dim, n, hidden: Vec<usize>, stop_rule| CellSpec {
            index,
            dim,
            n,
            hidden_widths: hidden,
            stop_rule,
        };
        let cells = match self.kind {
            ExperimentKind::DimensionSweep => self
                .dims
                .iter()
                .enumerate()
                .map(|(i, &d)| cell(i, d, n0, self.hidden_widths.clone(), cons))
                .collect(),
            ExperimentKind::ParamsEquivalentSweep => {
                let reference = self.reference_dim.expect("validated");
                let target = param_count(&merton_widths(reference, &self.hidden_widths));
                self.dims
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        let w = params_equivalent_first_width(d, &self.hidden_widths, target)?;
                        let mut hidden = self.hidden_widths.clone();
                        hidden[0] = w;
                        Ok(cell(i, d, n0, hidden, cons))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            ExperimentKind::AggressiveEpochs => self
                .epochs
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    cell(
                        i,
                        d0,
                        n0,
                        self.hidden_widths.clone(),
                        StopRule::FixedEpochs { count: e },
                    )
                })
                .collect(),
            ExperimentKind::SampleSizeSweep => self
                .sample_sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| cell(i, d0, n, self.hidden_widths.clone(), cons))
                .collect(),
            ExperimentKind::Single => vec![cell(0, d0, n0, self.hidden_widths.clone(), cons)],
        };
        Ok(cells)
    }
}

/// One experimental condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub index: usize,
    pub dim: usize,
    pub n: usize,
    pub hidden_widths: Vec<usize>,
    pub stop_rule: StopRule,
}

impl CellSpec {
    pub fn param_count(&self) -> usize {
        param_count(&merton_widths(self.dim, &self.hidden_widths))
    }
}

/// Layer widths of the Merton network: `d` noise inputs and `d` outputs.
pub fn merton_widths(d: usize, hidden: &[usize]) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(d);
    w.extend_from_slice(hidden);
    w.push(d);
    w
}

/// First hidden width `w` for which the Merton network of dimension `d`
/// with hidden widths `[w, hidden[1..]]` has a parameter count closest to
/// `target`.
pub fn params_equivalent_first_width(d: usize, hidden: &[usize], target: usize) -> Result<usize> {
    // Parameters depending on w: w (d + 1) from the first layer plus
    // (w + 1) * next from the second.
    let next = hidden.get(1).copied().unwrap_or(d);
    let per_neuron = d + 1 + next;
    let mut rest_widths = merton_widths(d, hidden);
    rest_widths[1] = 0;
    let fixed = param_count(&rest_widths);
    if target <= fixed {
        return Err(Error::config(format!(
            "reference parameter count {target} is too small for dimension {d}"
        )));
    }
    let w = ((target - fixed) as f64 / per_neuron as f64).round().max(1.0) as usize;
    Ok(w)
}

/// Outcome of one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: usize,
    pub run: usize,
    /// `derive_seed([base_seed, cell, run])`, the root of this run's seeds.
    pub seed: u64,
    pub report: Option<GapReport>,
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub stop_reason: Option<StopReason>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.report.is_some() && self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs_ok: usize,
    pub failures: usize,
    pub p_in_mu: Option<f64>,
    pub p_in_sigma: Option<f64>,
    pub p_out_mu: Option<f64>,
    pub gap_mu: Option<f64>,
    pub gap_sigma: Option<f64>,
    pub o_hat_mu: Option<f64>,
    pub p_in_median: Option<f64>,
    pub gap_median: Option<f64>,
    pub p_in_iqr: Option<f64>,
    pub gap_iqr: Option<f64>,
}

impl Aggregate {
    /// Statistics over the successful runs; sigma is the sample (n-1)
    /// standard deviation.
    pub fn from_runs(runs: &[RunRecord]) -> Self {
        let ok: Vec<&GapReport> = runs
            .iter()
            .filter(|r| r.is_ok())
            .filter_map(|r| r.report.as_ref())
            .collect();
        let col = |f: fn(&GapReport) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let p_in = col(|r| r.p_in);
        let p_out = col(|r| r.p_out);
        let gap = col(|r| r.gap);
        let o_hat = col(|r| r.o_hat);
        let mean = |v: &[f64]| (!v.is_empty()).then(|| stats::mean(v));
        let iqr = |v: &[f64]| Some(stats::quantile(v, 0.75)? - stats::quantile(v, 0.25)?);
        Self {
            runs_ok: ok.len(),
            failures: runs.len() - ok.len(),
            p_in_mu: mean(&p_in),
            p_in_sigma: stats::sample_std(&p_in),
            p_out_mu: mean(&p_out),
            gap_mu: mean(&gap),
            gap_sigma: stats::sample_std(&gap),
            o_hat_mu: mean(&o_hat),
            p_in_median: stats::median(&p_in),
            gap_median: stats::median(&gap),
            p_in_iqr: iqr(&p_in),
            gap_iqr: iqr(&gap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: CellSpec,
    pub param_count: usize,
    pub runs: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub version: String,
    /// Hex FNV-1a hash of the configuration.
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub runtime_secs: f64,
}

impl ExperimentResult {
    /// Recomputes every aggregate from the stored per-run records.
    pub fn recompute_aggregates(&mut self) {
        for c in &mut self.cells {
            c.aggregate = Aggregate::from_runs(&c.runs);
        }
    }
}

/// Worker count: explicit value, else the environment, else the CPU count.
pub fn resolve_threads(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(THREADS_ENV).ok()?.parse().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Seed for `role` in run `run` of cell `cell`.
pub fn run_seed(base: u64, cell: usize, run: usize, role: u64) -> u64 {
    rng::derive_seed(&[base, cell as u64, run as u64, role])
}

fn execute_run(
    cfg: &ExperimentConfig,
    spec: &CellSpec,
    inst: &ProblemInstance,
    run: usize,
) -> RunRecord {
    let base = cfg.base_seed;
    let mut record = RunRecord {
        cell: spec.index,
        run,
        seed: rng::derive_seed(&[base, spec.index as u64, run as u64]),
        report: None,
        stop_epoch: 0,
        best_epoch: 0,
        stop_reason: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let seed = |role| run_seed(base, spec.index, run, role);
        let sampler = inst.sampler.as_ref();
        let train_set = sample_training_set(sampler, spec.n, seed(ROLE_TRAIN))?;
        let validation = sample_training_set(sampler, spec.n, seed(ROLE_VALIDATION))?;
        let mut net = NetConfig::new(spec.hidden_widths.clone(), cfg.input_mode, seed(ROLE_INIT));
        net.per_time = true;
        let tc = cfg.train_config(spec.stop_rule, seed(ROLE_SHUFFLE));
        let (action, rep) = trainer::train(&inst.problem, &train_set, &validation, &net, &tc)?;
        record.stop_epoch = rep.stop_epoch;
        record.best_epoch = rep.best_epoch;
        record.stop_reason = Some(rep.stop_reason);
        if rep.stop_reason == StopReason::NumericError {
            record.error = rep.error.clone();
            return Ok(());
        }
        let oracle = inst
            .oracle
            .as_ref()
            .ok_or_else(|| Error::UnsupportedRegime("no closed-form oracle for this problem".into()))?;
        let out_set = match cfg.validation {
            ValidationMode::Paired => validation,
            ValidationMode::Third => {
                drop(validation);
                sample_training_set(sampler, spec.n, seed(ROLE_TEST))?
            }
        };
        let gap = relative_performance(
            &inst.problem,
            &action,
            oracle,
            &train_set,
            &out_set,
            cfg.merton.lambda,
        )?;
        record.report = Some(gap);
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("cell {} run {run} failed: {e}", spec.index);
        record.error = Some(e.to_string());
    }
    record
}

/// Runs every (cell, run) pair on a pool of `threads` workers. Records are
/// collected in (cell, run) order, so the result does not depend on the
/// worker count apart from `runtime_secs`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let started = Instant::now();
    let cells = cfg.cells()?;
    let instances: Vec<ProblemInstance> = cells
        .iter()
        .map(|c| cfg.merton.instance(c.dim))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.runs).map(move |r| (c, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolve_threads(cfg.threads))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, r)| {
                let rec = execute_run(cfg, &cells[c], &instances[c], r);
                log::info!(
                    "cell {c} (d={}, n={}) run {r}: {}",
                    cells[c].dim,
                    cells[c].n,
                    rec.report
                        .as_ref()
                        .map_or_else(|| "failed".to_string(), |g| format!("p_in {:.3}% gap {:.3}%", g.p_in, g.gap))
                );
                rec
            })
            .collect()
    });
    let mut by_cell: Vec<Vec<RunRecord>> = vec![Vec::new(); cells.len()];
    for rec in records {
        by_cell[rec.cell].push(rec);
    }
    let cells = cells
        .into_iter()
        .zip(by_cell)
        .map(|(spec, runs)| CellResult {
            param_count: spec.param_count(),
            aggregate: Aggregate::from_runs(&runs),
            spec,
            runs,
        })
        .collect();
    Ok(ExperimentResult {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: format!("{:016x}", cfg.config_hash()),
        config: cfg.clone(),
        cells,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Single runs

/// Problem selection for single runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Merton {
        d: usize,
        #[serde(default)]
        market: MertonSettings,
    },
    Production(ProductionParams),
}

impl ProblemSpec {
    pub fn instance(&self) -> Result<ProblemInstance> {
        match self {
            ProblemSpec::Merton { d, market } => market.instance(*d),
            ProblemSpec::Production(p) => production_problem(p),
        }
    }

    /// Risk aversion used for certainty equivalents, if the problem has one.
    pub fn lambda(&self) -> Option<f64> {
        match self {
            ProblemSpec::Merton { market, .. } => Some(market.lambda),
            ProblemSpec::Production(_) => None,
        }
    }
}

/// Configuration of the `sample`, `train`, `eval` and `diag` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub network: NetConfig,
    /// Size of the training, validation and test sets.
    pub n: usize,
    pub seed: u64,
    pub train: TrainSettings,
    /// Train for exactly this many epochs instead of the conservative rule.
    pub fixed_epochs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::Merton {
                d: 10,
                market: MertonSettings::default(),
            },
            network: NetConfig::new(vec![10, 10, 10], InputMode::Noise, 0),
            n: 10_000,
            seed: 0,
            train: TrainSettings::default(),
            fixed_epochs: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n must be at least 1"));
        }
        if self.train.batch_size == 0 || self.train.batch_size > self.n {
            return Err(Error::config(format!("batch_size must be in 1..={}", self.n)));
        }
        self.network.validate()?;
        self.train_config().validate()
    }

    /// Seed of a role (see the module docs) derived from `self.seed`.
    pub fn seed_for(&self, role: u64) -> u64 {
        rng::derive_seed(&[self.seed, role])
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            stop_rule: match self.fixed_epochs {
                Some(count) => StopRule::FixedEpochs { count },
                None => StopRule::Conservative {
                    tolerance: self.train.tolerance,
                    patience: self.train.patience,
                },
            },
            shuffle_seed: self.seed_for(ROLE_SHUFFLE),
            adam: self.train.adam,
        }
    }

    /// Network configuration with the initialization seed derived from
    /// `self.seed` unless the file sets one.
    pub fn net_config(&self) -> NetConfig {
        let mut net = self.network.clone();
        if net.seed == 0 {
            net.seed = self.seed_for(ROLE_INIT);
        }
        net
    }
}

// ---------------------------------------------------------------------------
// Result files

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
}

pub const RUNS_CSV_HEADER: &str = "cell,run,p_in,p_out,gap,o_hat,stop_epoch,seed";
pub const SUMMARY_CSV_HEADER: &str = "cell,dims,n,params,stop_rule,runs_ok,failures,p_in_mu,p_in_sigma,gap_mu,gap_sigma,p_in_median,gap_median,gap_iqr";

fn pct(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.5}"))
}

fn stop_label(rule: &StopRule) -> String {
    match rule {
        StopRule::Conservative { .. } => "conservative".into(),
        StopRule::FixedEpochs { count } => format!("fixed{count}"),
    }
}

/// Per-run table. Each cell's runs are followed by one row with `run` set
/// to `aggregate` holding the means over successful runs; failed runs have
/// empty value fields.
pub fn runs_csv(result: &ExperimentResult) -> String {
    let mut out = String::new();
    out.push_str(RUNS_CSV_HEADER);
    out.push('\n');
    for c in &result.cells {
        for r in &c.runs {
            let g = r.report.as_ref().filter(|_| r.is_ok());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.cell,
                r.run,
                pct(g.map(|g| g.p_in)),
                pct(g.map(|g| g.p_out)),
                pct(g.map(|g| g.gap)),
                g.map_or_else(String::new, |g| format!("{:e}", g.o_hat)),
                r.stop_epoch,
                r.seed
            );
        }
        let a = &c.aggregate;
        let _ = writeln!(
            out,
            "{},aggregate,{},{},{},{},,",
            c.spec.index,
            pct(a.p_in_mu),
            pct(a.p_out_mu),
            pct(a.gap_mu),
            a.o_hat_mu.map_or_else(String::new, |v| format!("{v:e}")),
        );
    }
    out
}

/// One row per cell with mean, sample standard deviation, median and
/// interquartile range. Undefined statistics are empty fields.
pub fn summary_csv(result: &ExperimentResult) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_CSV_HEADER);
    out.push('\n');
    for c in &result.cells {
        let a = &c.aggregate;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.spec.index,
            c.spec.dim,
            c.spec.n,
            c.param_count,
            stop_label(&c.spec.stop_rule),
            a.runs_ok,
            a.failures,
            pct(a.p_in_mu),
            pct(a.p_in_sigma),
            pct(a.gap_mu),
            pct(a.gap_sigma),
            pct(a.p_in_median),
            pct(a.gap_median),
            pct(a.gap_iqr),
        );
    }
    out
}

/// Path of the summary table written next to a runs table.
pub fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "results".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.summary.csv"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the result. CSV output produces the runs table at `path` and the
/// summary table at [`summary_path`]; JSON output is the full result.
pub fn emit_results(result: &ExperimentResult, format: OutputFormat, path: &Path) -> Result<()> {
    match format {
        OutputFormat::Csv => {
            write_file(path, &runs_csv(result))?;
            write_file(&summary_path(path), &summary_csv(result))
        }
        OutputFormat::Json => {
            let text = serde_json::to_string_pretty(result).map_err(|e| Error::Serialization {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            write_file(path, &text)
        }
    }
}

pub fn load_result_json(path: &Path) -> Result<ExperimentResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout, all integers little-endian:
//
//   magic            8 bytes  "OVLRNCKP"
//   version          u32
//   config hash      u64      NetConfig::config_hash of the network widths
//   seed             u64
//   input mode       u8
//   per_time         u8
//   hidden count     u32, then that many u32 hidden widths
//   slot count       u32, then that many i64 (-1 for a frozen time)
//   network count    u32, then per network:
//                      width count u32, widths u32 each,
//                      parameter count u64, parameters f64 each
//   checksum         u64      FNV-1a of every preceding byte

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OVLRNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn encode_policy(policy: &NetworkPolicy, version: u32) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(CHECKPOINT_MAGIC);
    b.extend_from_slice(&version.to_le_bytes());
    let widths = policy.nets.first().map_or(&[][..], |n| n.widths());
    b.extend_from_slice(&policy.config.config_hash(widths).to_le_bytes());
    b.extend_from_slice(&policy.config.seed.to_le_bytes());
    b.push(policy.config.input_mode.code());
    b.push(u8::from(policy.config.per_time));
    b.extend_from_slice(&(policy.config.hidden_widths.len() as u32).to_le_bytes());
    for &w in &policy.config.hidden_widths {
        b.extend_from_slice(&(w as u32).to_le_bytes());
    }
    b.extend_from_slice(&(policy.slots.len() as u32).to_le_bytes());
    for s in &policy.slots {
        b.extend_from_slice(&s.map_or(-1i64, |i| i as i64).to_le_bytes());
    }
    b.extend_from_slice(&(policy.nets.len() as u32).to_le_bytes());
    for net in &policy.nets {
        b.extend_from_slice(&(net.widths().len() as u32).to_le_bytes());
        for &w in net.widths() {
            b.extend_from_slice(&(w as u32).to_le_bytes());
        }
        b.extend_from_slice(&(net.len() as u64).to_le_bytes());
        for p in net.params() {
            b.extend_from_slice(&p.to_le_bytes());
        }
    }
    let sum = rng::fnv1a(&b);
    b.extend_from_slice(&sum.to_le_bytes());
    b
}

/// Serialized checkpoint bytes; exposed for tooling that stores
/// checkpoints elsewhere than the file system.
pub fn checkpoint_bytes(policy: &NetworkPolicy) -> Vec<u8> {
    encode_policy(policy, CHECKPOINT_VERSION)
}

#[doc(hidden)]
pub fn checkpoint_bytes_with_version(policy: &NetworkPolicy, version: u32) -> Vec<u8> {
    encode_policy(policy, version)
}

pub fn save_checkpoint(action: &FeedbackAction, path: &Path) -> Result<()> {
    let FeedbackAction::Network(policy) = action else {
        return Err(Error::config("only network actions can be checkpointed"));
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, checkpoint_bytes(policy)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > limit {
            return Err(self.corrupt(format!("implausible length {n}")));
        }
        Ok(n)
    }
}

/// Decodes checkpoint bytes; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<NetworkPolicy> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.corrupt("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 8 + 4 + 8 {
        return Err(r.corrupt("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if rng::fnv1a(body) != stored {
        return Err(r.corrupt("checksum mismatch (truncated or modified file)"));
    }
    r.bytes = body;
    let hash = r.u64()?;
    let seed = r.u64()?;
    let input_mode = InputMode::from_code(r.u8()?).ok_or_else(|| r.corrupt("unknown input mode"))?;
    let per_time = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(r.corrupt("invalid per_time flag")),
    };
    let n_hidden = r.len(1 << 16)?;
    let hidden = (0..n_hidden)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let n_slots = r.len(1 << 20)?;
    let mut slots = Vec::with_capacity(n_slots);
    for _ in 0..n_slots {
        let s = r.u64()? as i64;
        slots.push(if s < 0 { None } else { Some(s as usize) });
    }
    let n_nets = r.len(1 << 20)?;
    let mut nets = Vec::with_capacity(n_nets);
    for _ in 0..n_nets {
        let nw = r.len(1 << 16)?;
        let widths = (0..nw)
            .map(|_| r.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let np = r.u64()? as usize;
        if np != param_count(&widths) {
            return Err(r.corrupt(format!(
                "parameter count {np} does not match widths {widths:?}"
            )));
        }
        let raw = r.take(np.checked_mul(8).ok_or_else(|| r.corrupt("overflow"))?)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        nets.push(MlpParams::from_parts(widths, params)?);
    }
    if r.pos != body.len() {
        return Err(r.corrupt("trailing bytes"));
    }
    let config = NetConfig {
        hidden_widths: hidden,
        per_time,
        seed,
        input_mode,
    };
    config.validate()?;
    if let Some(first) = nets.first() {
        if nets.iter().any(|n| n.widths() != first.widths()) {
            return Err(r.corrupt("networks have different shapes"));
        }
        let w = first.widths();
        if w.len() != config.hidden_widths.len() + 2 || w[1..w.len() - 1] != config.hidden_widths[..] {
            return Err(r.corrupt("hidden widths disagree with the stored configuration"));
        }
    }
    let widths = nets.first().map_or(&[][..], |n| n.widths());
    if config.config_hash(widths) != hash {
        return Err(r.corrupt("configuration hash mismatch"));
    }
    if let Some(bad) = slots.iter().flatten().find(|&&i| i >= nets.len()) {
        return Err(r.corrupt(format!("slot names missing network {bad}")));
    }
    Ok(NetworkPolicy {
        config,
        nets,
        slots,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkPolicy> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and checks it against `problem`.
pub fn load_action(path: &Path, problem: &ControlProblem) -> Result<FeedbackAction> {
    let policy = load_checkpoint(path)?;
    crate::nn::network_action(problem, policy.nets, policy.slots, &policy.config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_equivalent_width_round_trips() {
        let target = param_count(&merton_widths(100, &[10, 10, 10]));
        assert_eq!(target, 101 * 10 + 110 + 110 + 11 * 100);
        for d in [10, 40, 70, 100] {
            let w = params_equivalent_first_width(d, &[10, 10, 10], target).unwrap();
            let got = param_count(&merton_widths(d, &[w, 10, 10]));
            let per_neuron = d + 1 + 10;
            assert!(got.abs_diff(target) * 2 <= per_neuron, "d={d} w={w} got={got}");
        }
        assert_eq!(params_equivalent_first_width(100, &[10, 10, 10], target).unwrap(), 10);
        // w (10 + 1) + 10 (w + 1) + 110 + 11 * 10 = target
        let w10 = params_equivalent_first_width(10, &[10, 10, 10], target).unwrap();
        let exact = (target - 10 - 110 - 110) as f64 / 21.0;
        assert_eq!(w10, exact.round() as usize);
    }

    #[test]
    fn seeds_are_distinct_across_runs_and_roles() {
        let mut seen = std::collections::HashSet::new();
        for cell in 0..4 {
            for run in 0..30 {
                for role in 1..=5 {
                    assert!(seen.insert(run_seed(17, cell, run, role)));
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        c.validate().unwrap();
        c.runs = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig {
            kind: ExperimentKind::ParamsEquivalentSweep,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
        c.reference_dim = Some(40);
        c.validate().unwrap();
        let c = ExperimentConfig {
            sample_sizes: vec![16],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let text = r#"
            name = "t1"
            kind = "dimension_sweep"
            dims = [10, 40, 100]
            sample_sizes = [100000]
            runs = 5
            base_seed = 42

            [train]
            tolerance = 1e-6
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.hidden_widths, vec![10, 10, 10]);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.cells().unwrap().len(), 3);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_toml_str("kind = \"bogus\"").is_err());
    }

    #[test]
    fn single_run_aggregate_has_no_sigma() {
        let rec = RunRecord {
            cell: 0,
            run: 0,
            seed: 1,
            report: Some(GapReport {
                p_in: 1.0,
                p_out: -1.0,
                gap: 2.0,
                nn_in: 0.1,
                nn_out: 0.1,
                true_in: 0.1,
                true_out: 0.1,
                loss_nn_in: -0.1,
                loss_nn_out: -0.1,
                loss_true_in: -0.1,
                loss_true_out: -0.1,
                o_hat: 0.0,
                infinite_ce: false,
            }),
            stop_epoch: 3,
            best_epoch: 2,
            stop_reason: Some(StopReason::ValidationWorsened),
            error: None,
        };
        let a = Aggregate::from_runs(std::slice::from_ref(&rec));
        assert_eq!(a.runs_ok, 1);
        assert_eq!(a.gap_mu, Some(2.0));
        assert_eq!(a.gap_sigma, None);
        let spec = CellSpec {
            index: 0,
            dim: 10,
            n: 100,
            hidden_widths: vec![10, 10, 10],
            stop_rule: StopRule::conservative(),
        };
        let result = ExperimentResult {
            name: "x".into(),
            version: "0".into(),
            config_hash: "0".into(),
            config: ExperimentConfig::default(),
            cells: vec![CellResult {
                param_count: spec.param_count(),
                spec,
                runs: vec![rec],
                aggregate: a,
            }],
            runtime_secs: 0.0,
        };
        let csv = runs_csv(&result);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RUNS_CSV_HEADER);
        assert_eq!(lines[1], "0,0,1.00000,-1.00000,2.00000,0e0,3,1");
        assert_eq!(lines[2], "0,aggregate,1.00000,-1.00000,2.00000,0e0,,");
        assert_eq!(lines.len(), 3);
        let summary = summary_csv(&result);
        let row: Vec<&str> = summary.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[8], "");
        assert_eq!(row[10], "");
    }

    #[test]
    fn failed_runs_are_counted_not_averaged() {
        let ok = |gap: f64| RunRecord {
            cell: 0,
            run: 0,
            seed: 0,
            report: Some(GapReport {
                p_in: gap,
                p_out: 0.0,
                gap,
                nn_in: 0.0,
                nn_out: 0.0,
                true_in: 0.0,
                true_out: 0.0,
                loss_nn_in: 0.0,
                loss_nn_out: 0.0,
                loss_true_in: 0.0,
                loss_true_out: 0.0,
                o_hat: 0.0,
                infinite_ce: false,
            }),
            stop_epoch: 1,
            best_epoch: 1,
            stop_reason: Some(StopReason::ValidationWorsened),
            error: None,
        };
        let failed = RunRecord {
            report: None,
            stop_reason: Some(StopReason::NumericError),
            error: Some("non-finite batch loss".into()),
            ..ok(0.0)
        };
        let a = Aggregate::from_runs(&[ok(1.0), failed, ok(3.0)]);
        assert_eq!(a.runs_ok, 2);
        assert_eq!(a.failures, 1);
        assert_eq!(a.gap_mu, Some(2.0));
        assert_eq!(a.gap_median, Some(2.0));
        let none = Aggregate::from_runs(&[]);
        assert_eq!(none.gap_mu, None);
    }
}
