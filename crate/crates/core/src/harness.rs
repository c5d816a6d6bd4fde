//! Replication runner, metrics, and file-based evaluation.
//!
//! A benchmark replication `r` derives its own seed from the master seed,
//! generates a panel, computes the truth grid conditional on the drawn
//! initial observations, and scores every requested estimator. Errors are
//! averaged over the index set of each estimand family first and then over
//! replications.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{b1_doubly_homogeneous, b2_temporal_stationary, b3_individual_homogeneous, b4_homogeneous_model_based};
use crate::data::{read_csv, IngestOptions, ObsKind, TrajectorySet};
use crate::envsim::{dp_oracle_from, generate, mc_oracle_from, preset_target_policy, EnvSpec};
use crate::error::{Error, Result};
use crate::estimand::{EstimandFamily, ValueReport};
use crate::model_based::{estimate_model_based, ModelBasedConfig};
use crate::model_free::{estimate_values, BackwardConfig, Solver};
use crate::policy::{Policy, PolicySpec};
use crate::rng::{derive_seed, fnv1a};
use crate::sieve::BasisSpec;

/// Averaging order recorded in every metrics file.
pub const AVERAGING: &str = "per replication: mean over the family's index set; then mean over replications";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "twdidp-mf")]
    ModelFree,
    #[serde(rename = "twdidp-mb")]
    ModelBased,
    #[serde(rename = "b1")]
    B1,
    #[serde(rename = "b2")]
    B2,
    #[serde(rename = "b3")]
    B3,
    #[serde(rename = "b4")]
    B4,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::ModelFree,
        EstimatorKind::ModelBased,
        EstimatorKind::B1,
        EstimatorKind::B2,
        EstimatorKind::B3,
        EstimatorKind::B4,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::ModelFree => "twdidp-mf",
            EstimatorKind::ModelBased => "twdidp-mb",
            EstimatorKind::B1 => "b1",
            EstimatorKind::B2 => "b2",
            EstimatorKind::B3 => "b3",
            EstimatorKind::B4 => "b4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownName(format!("estimator `{s}`")))
    }
}

/// Settings shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorOptions {
    /// Basis of every sieve regression; chosen from the data when absent.
    #[serde(default)]
    pub basis: Option<BasisSpec>,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default)]
    pub max_stages: Option<usize>,
    #[serde(default = "default_n_rollouts")]
    pub n_rollouts: usize,
    #[serde(default = "default_em_tol")]
    pub em_tol: f64,
    #[serde(default = "default_em_max_iter")]
    pub em_max_iter: usize,
}

fn default_ridge() -> f64 {
    1e-8
}

fn default_n_rollouts() -> usize {
    1000
}

fn default_em_tol() -> f64 {
    1e-4
}

fn default_em_max_iter() -> usize {
    300
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            basis: None,
            solver: Solver::Fwl,
            ridge: default_ridge(),
            max_stages: None,
            n_rollouts: default_n_rollouts(),
            em_tol: default_em_tol(),
            em_max_iter: default_em_max_iter(),
        }
    }
}

/// Indicator basis for tabular data, cubic polynomial otherwise.
pub fn default_basis(kind: ObsKind) -> BasisSpec {
    match kind {
        ObsKind::Tabular { n_states } => BasisSpec::indicator(n_states),
        ObsKind::Continuous { dim } => BasisSpec::polynomial(3, dim),
    }
}

impl EstimatorOptions {
    pub fn basis_for(&self, kind: ObsKind) -> BasisSpec {
        self.basis.clone().unwrap_or_else(|| default_basis(kind))
    }

    pub fn backward_config(&self, kind: ObsKind) -> BackwardConfig {
        let mut cfg = BackwardConfig::new(self.basis_for(kind))
            .with_ridge(self.ridge)
            .with_solver(self.solver);
        cfg.max_stages = self.max_stages;
        cfg
    }

    pub fn model_based_config(&self, kind: ObsKind) -> ModelBasedConfig {
        ModelBasedConfig {
            basis: self.basis_for(kind),
            ridge: self.ridge,
            em_tol: self.em_tol,
            em_max_iter: self.em_max_iter,
            n_rollouts: self.n_rollouts,
        }
    }
}

/// Runs one estimator and stamps the report with its name and policy id.
pub fn run_estimator(
    kind: EstimatorKind,
    data: &TrajectorySet,
    pi: &Policy,
    policy_id: &str,
    opts: &EstimatorOptions,
    seed: u64,
) -> Result<ValueReport> {
    let obs_kind = data.obs_kind();
    let basis = opts.basis_for(obs_kind);
    let mut report = match kind {
        EstimatorKind::ModelFree => estimate_values(data, pi, &opts.backward_config(obs_kind))?,
        EstimatorKind::ModelBased => estimate_model_based(data, pi, &opts.model_based_config(obs_kind), seed)?,
        EstimatorKind::B1 => b1_doubly_homogeneous(data, pi, &basis)?,
        EstimatorKind::B2 => b2_temporal_stationary(data, pi, &basis)?,
        EstimatorKind::B3 => b3_individual_homogeneous(data, pi, &basis, opts.ridge)?,
        EstimatorKind::B4 => b4_homogeneous_model_based(data, pi, &basis, opts.ridge, opts.n_rollouts, seed)?,
    };
    report.estimator_name = kind.as_str().into();
    report.target_policy_id = policy_id.into();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name of a built-in environment preset.
    pub preset: String,
    #[serde(default = "default_size")]
    pub n_individuals: usize,
    #[serde(default = "default_size")]
    pub n_timepoints: usize,
    /// Overrides the preset's mixture weights.
    #[serde(default)]
    pub weights: Option<[f64; 3]>,
    #[serde(default = "all_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "preset_target_policy")]
    pub target_policy: PolicySpec,
    #[serde(default = "default_replications")]
    pub n_replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Monte-Carlo repetitions behind the truth grid of continuous presets.
    #[serde(default = "default_truth_reps")]
    pub truth_reps: usize,
    #[serde(default)]
    pub options: EstimatorOptions,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_size() -> usize {
    80
}

fn all_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

fn default_replications() -> usize {
    100
}

fn default_truth_reps() -> usize {
    500
}

impl ExperimentConfig {
    pub fn new(preset: impl Into<String>) -> Self {
        Self {
            preset: preset.into(),
            n_individuals: default_size(),
            n_timepoints: default_size(),
            weights: None,
            estimators: all_estimators(),
            target_policy: preset_target_policy(),
            n_replications: default_replications(),
            seed: 0,
            truth_reps: default_truth_reps(),
            options: EstimatorOptions::default(),
            out_dir: None,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a `.toml` or `.json` file, chosen by extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text),
            _ => Self::from_json(&text),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The environment of replication `r`.
    pub fn env(&self, seed: u64) -> Result<EnvSpec> {
        let mut env = EnvSpec::preset(&self.preset, self.n_individuals, self.n_timepoints, seed)?;
        if let Some(w) = self.weights {
            env = env.with_weights(w);
        }
        Ok(env)
    }

    pub fn replication_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, &[r as u64])
    }

    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("at least one estimator is required".into()));
        }
        if self.n_replications == 0 {
            return Err(Error::InvalidConfig("n_replications must be at least 1".into()));
        }
        let env = self.env(self.seed)?;
        env.validate()?;
        self.target_policy
            .build()?
            .check_compatible(env.obs_kind, env.n_actions)?;
        if matches!(env.obs_kind, ObsKind::Continuous { .. }) && self.truth_reps < 2 {
            return Err(Error::InvalidConfig("truth_reps must be at least 2".into()));
        }
        Ok(())
    }

    /// Digest of the configuration with the output directory left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        fnv1a(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

/// Error of one estimate against the truth, per family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyErrors {
    /// Mean absolute error over the family's index set.
    pub abs: [f64; 4],
    /// Mean squared error over the family's index set.
    pub sq: [f64; 4],
}

fn mean_errors(est: &[f64], truth: &[f64]) -> (f64, f64) {
    let (mut a, mut s, mut c) = (0.0, 0.0, 0usize);
    for (e, t) in est.iter().zip(truth) {
        if e.is_nan() {
            continue;
        }
        a += (e - t).abs();
        s += (e - t) * (e - t);
        c += 1;
    }
    if c == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (a / c as f64, s / c as f64)
    }
}

/// Scores a report against a truth grid. Truth aggregates are plain means of
/// the grid; missing individuals of the estimate are skipped.
pub fn score(report: &ValueReport, truth: &[Vec<f64>]) -> FamilyErrors {
    let truth_report = ValueReport::from_grid("truth", "", truth.to_vec(), "", 0);
    let pairs = [
        mean_errors(&[report.eta], &[truth_report.eta]),
        mean_errors(&report.eta_i, &truth_report.eta_i),
        mean_errors(&report.eta_t, &truth_report.eta_t),
        mean_errors(
            &report.eta_it.concat(),
            &truth_report.eta_it.concat(),
        ),
    ];
    FamilyErrors {
        abs: pairs.map(|p| p.0),
        sq: pairs.map(|p| p.1),
    }
}

/// Outcome of one estimator in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub errors: Option<FamilyErrors>,
    pub failure: Option<String>,
    /// Point estimate of the grand average, when the estimator succeeded.
    pub eta: Option<f64>,
    pub truth_eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub estimator: EstimatorKind,
    pub family: EstimandFamily,
    pub mae: f64,
    pub mse: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

/// Aggregate errors per (estimator, family). Wall-clock times live in
/// [`BenchmarkOutput::timings`] so that this table is reproducible byte for
/// byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub config_digest: String,
    pub averaging: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn from_records(config_digest: String, estimators: &[EstimatorKind], records: &[ReplicationRecord]) -> Self {
        let mut rows = Vec::new();
        for &est in estimators {
            let mine: Vec<&ReplicationRecord> = records.iter().filter(|r| r.estimator == est).collect();
            for (f, family) in EstimandFamily::ALL.into_iter().enumerate() {
                let ok: Vec<&FamilyErrors> = mine
                    .iter()
                    .filter_map(|r| r.errors.as_ref())
                    .filter(|e| e.abs[f].is_finite())
                    .collect();
                let n_ok = ok.len();
                let (mae, mse) = if n_ok == 0 {
                    (f64::NAN, f64::NAN)
                } else {
                    (
                        ok.iter().map(|e| e.abs[f]).sum::<f64>() / n_ok as f64,
                        ok.iter().map(|e| e.sq[f]).sum::<f64>() / n_ok as f64,
                    )
                };
                rows.push(MetricsRow {
                    estimator: est,
                    family,
                    mae,
                    mse,
                    n_ok,
                    n_failed: mine.len() - n_ok,
                });
            }
        }
        Self {
            config_digest,
            averaging: AVERAGING.into(),
            rows,
        }
    }

    pub fn get(&self, estimator: EstimatorKind, family: EstimandFamily) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.family == family)
    }

    /// `MAE ≤ √MSE + 1e−12` on every row with data.
    pub fn jensen_holds(&self) -> bool {
        self.rows
            .iter()
            .filter(|r| r.n_ok > 0)
            .all(|r| r.mse >= 0.0 && r.mae <= r.mse.sqrt() + 1e-12)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One line per row: estimator, family, MAE, MSE, counts.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["estimator", "family", "mae", "mse", "n_ok", "n_failed"])?;
        for r in &self.rows {
            w.write_record([
                r.estimator.as_str().to_string(),
                r.family.as_str().to_string(),
                r.mae.to_string(),
                r.mse.to_string(),
                r.n_ok.to_string(),
                r.n_failed.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub estimator: EstimatorKind,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub metrics: MetricsTable,
    pub records: Vec<ReplicationRecord>,
    pub timings: Vec<Timing>,
}

impl BenchmarkOutput {
    /// Writes `metrics.json`, `metrics.csv`, `records.csv` and
    /// `timings.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.json"), self.metrics.to_json()?)?;
        fs::write(dir.join("metrics.csv"), self.metrics.to_csv()?)?;
        let mut w = csv::Writer::from_path(dir.join("records.csv"))?;
        let mut header = vec!["replication".to_string(), "seed".into(), "estimator".into(), "status".into()];
        for f in EstimandFamily::ALL {
            header.push(format!("abs_{}", f.as_str()));
        }
        for f in EstimandFamily::ALL {
            header.push(format!("sq_{}", f.as_str()));
        }
        header.extend(["eta".into(), "truth_eta".into(), "failure".into()]);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.replication.to_string(),
                r.seed.to_string(),
                r.estimator.as_str().to_string(),
                if r.errors.is_some() { "ok" } else { "failed" }.to_string(),
            ];
            match &r.errors {
                Some(e) => row.extend(e.abs.iter().chain(&e.sq).map(|x| x.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 8)),
            }
            row.push(r.eta.map(|x| x.to_string()).unwrap_or_default());
            row.push(r.truth_eta.to_string());
            row.push(r.failure.clone().unwrap_or_default());
            w.write_record(&row)?;
        }
        w.flush()?;
        fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&self.timings)?)?;
        Ok(())
    }
}

/// Truth grid conditional on the panel's initial observations: exact
/// dynamic programming for tabular environments, Monte Carlo otherwise.
pub fn truth_grid(env: &EnvSpec, pi: &Policy, data: &TrajectorySet, mc_reps: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let initial: Vec<Vec<f64>> = (0..data.n_individuals()).map(|i| data.obs(i, 0).to_vec()).collect();
    match env.obs_kind {
        ObsKind::Tabular { .. } => dp_oracle_from(env, pi, &initial),
        ObsKind::Continuous { .. } => Ok(mc_oracle_from(env, pi, &initial, mc_reps, seed)?.mean),
    }
}

struct ReplicationOutcome {
    records: Vec<ReplicationRecord>,
    seconds: Vec<f64>,
}

fn run_replication(cfg: &ExperimentConfig, pi: &Policy, policy_id: &str, r: usize) -> Result<ReplicationOutcome> {
    let seed = cfg.replication_seed(r);
    let env = cfg.env(seed)?;
    let data = generate(&env)?;
    let truth = truth_grid(&env, pi, &data, cfg.truth_reps, derive_seed(seed, &[1]))?;
    let truth_eta = ValueReport::from_grid("truth", "", truth.clone(), "", 0).eta;
    let mut records = Vec::with_capacity(cfg.estimators.len());
    let mut seconds = Vec::with_capacity(cfg.estimators.len());
    for (k, &est) in cfg.estimators.iter().enumerate() {
        let start = Instant::now();
        let outcome = run_estimator(est, &data, pi, policy_id, &cfg.options, derive_seed(seed, &[2, k as u64]));
        seconds.push(start.elapsed().as_secs_f64());
        let (errors, failure, eta) = match outcome {
            Ok(report) => (Some(score(&report, &truth)), None, Some(report.eta)),
            Err(e) => (None, Some(e.to_string()), None),
        };
        records.push(ReplicationRecord {
            replication: r,
            seed,
            estimator: est,
            errors,
            failure,
            eta,
            truth_eta,
        });
    }
    Ok(ReplicationOutcome { records, seconds })
}

/// Runs every replication (in parallel on the current rayon pool) and
/// aggregates. Estimator failures are recorded, not propagated; failures of
/// data generation or the truth computation abort the run.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutput> {
    cfg.validate()?;
    let pi = cfg.target_policy.build()?;
    let policy_id = cfg.target_policy.id();
    let outcomes: Vec<ReplicationOutcome> = (0..cfg.n_replications)
        .into_par_iter()
        .map(|r| run_replication(cfg, &pi, &policy_id, r))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut totals = vec![0.0; cfg.estimators.len()];
    for o in outcomes {
        for (k, s) in o.seconds.iter().enumerate() {
            totals[k] += s;
        }
        records.extend(o.records);
    }
    let metrics = MetricsTable::from_records(cfg.digest(), &cfg.estimators, &records);
    let timings = cfg
        .estimators
        .iter()
        .zip(totals)
        .map(|(&estimator, total_seconds)| Timing {
            estimator,
            total_seconds,
        })
        .collect();
    let out = BenchmarkOutput {
        metrics,
        records,
        timings,
    };
    if let Some(dir) = &cfg.out_dir {
        out.write(dir)?;
    }
    Ok(out)
}

/// Writes `report.json`, `eta_i.csv` (`i,eta_i`) and `eta_t.csv`
/// (`t,eta_t`) with 1-based indices.
pub fn write_report(report: &ValueReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    let mut w = csv::Writer::from_path(dir.join("eta_i.csv"))?;
    w.write_record(["i", "eta_i"])?;
    for (i, v) in report.eta_i.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("eta_t.csv"))?;
    w.write_record(["t", "eta_t"])?;
    for (t, v) in report.eta_t.iter().enumerate() {
        w.write_record([(t + 1).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Ingests a CSV panel, runs one estimator, and writes the report files to
/// `out_dir` when given.
pub fn evaluate_csv(
    path: &Path,
    estimator: EstimatorKind,
    policy: &PolicySpec,
    ingest: IngestOptions,
    opts: &EstimatorOptions,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<ValueReport> {
    let data = read_csv(fs::File::open(path)?, ingest)?;
    let pi = policy.build()?;
    let report = run_estimator(estimator, &data, &pi, &policy.id(), opts, seed)?;
    if let Some(dir) = out_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    /// `(policy id, eta)` sorted by increasing value.
    pub ranking: Vec<(String, f64)>,
}

/// Evaluates several policies on one panel and ranks them by estimated
/// grand average.
pub fn compare_policies(
    data: &TrajectorySet,
    estimator: EstimatorKind,
    policies: &[PolicySpec],
    opts: &EstimatorOptions,
    seed: u64,
) -> Result<(Vec<ValueReport>, PolicyComparison)> {
    let reports: Vec<ValueReport> = policies
        .iter()
        .map(|p| run_estimator(estimator, data, &p.build()?, &p.id(), opts, seed))
        .collect::<Result<_>>()?;
    let mut ranking: Vec<(String, f64)> = reports
        .iter()
        .map(|r| (r.target_policy_id.clone(), r.eta))
        .collect();
    ranking.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok((reports, PolicyComparison { ranking }))
}
