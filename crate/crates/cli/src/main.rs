//! Command-line front end: simulate panels, estimate policy values from CSV,
//! run benchmarks, and compute ground-truth grids.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use panel_ope::envsim::{dp_oracle_tabular, generate, mc_oracle, preset_target_policy, EnvSpec, PRESETS};
use panel_ope::harness::{
    compare_policies, run_benchmark, run_estimator, write_report, EstimatorKind, EstimatorOptions, ExperimentConfig,
};
use panel_ope::{read_csv, BasisSpec, Error, IngestOptions, ObsKind, ObsKindHint, PolicySpec, Result};

#[derive(Parser)]
#[command(name = "panel-ope", version, about = "Off-policy evaluation for heterogeneous, nonstationary panels")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a panel from a preset and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate policy values from a CSV panel.
    Estimate(EstimateArgs),
    /// Run a replicated benchmark and write the metrics table.
    Benchmark(BenchmarkArgs),
    /// Compute the true value grid of a preset.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct EnvArgs {
    /// Environment preset.
    #[arg(long, default_value = "paper-tabular")]
    preset: String,
    #[arg(long, default_value_t = 80)]
    n_individuals: usize,
    #[arg(long, default_value_t = 80)]
    n_timepoints: usize,
    /// Mixture weights `main,individual,time`.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<[f64; 3]>,
}

impl EnvArgs {
    fn env(&self, seed: u64) -> Result<EnvSpec> {
        let env = EnvSpec::preset(&self.preset, self.n_individuals, self.n_timepoints, seed)?;
        Ok(match self.weights {
            Some(w) => env.with_weights(w),
            None => env,
        })
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    env: EnvArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObsKindArg {
    Auto,
    Tabular,
    Continuous,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV with columns `id,t,action,reward,obs_1..obs_d`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "twdidp-mf", value_parser = parse_estimator)]
    estimator: EstimatorKind,
    /// Target policy; repeat to compare several. Forms: `agnostic:0.2,0.8`,
    /// `table:0.7,0.3;0.3,0.7`, `threshold:DIM:CUTOFF:LOW:HIGH`.
    #[arg(long = "policy", value_parser = parse_policy)]
    policies: Vec<PolicySpec>,
    #[arg(long, value_enum, default_value = "auto")]
    obs_kind: ObsKindArg,
    #[arg(long)]
    n_actions: Option<usize>,
    #[command(flatten)]
    opts: OptionArgs,
}

#[derive(Args)]
struct OptionArgs {
    /// Basis: `indicator:N`, `poly:DEG`, or a JSON basis description.
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    ridge: Option<f64>,
    #[arg(long)]
    max_stages: Option<usize>,
    #[arg(long)]
    n_rollouts: Option<usize>,
}

impl OptionArgs {
    fn apply(&self, opts: &mut EstimatorOptions, dim: usize) -> Result<()> {
        if let Some(b) = &self.basis {
            opts.basis = Some(parse_basis(b, dim)?);
        }
        if let Some(r) = self.ridge {
            opts.ridge = r;
        }
        if let Some(k) = self.max_stages {
            opts.max_stages = Some(k);
        }
        if let Some(n) = self.n_rollouts {
            opts.n_rollouts = n;
        }
        Ok(())
    }
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Experiment configuration (`.toml` or `.json`); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    n_individuals: Option<usize>,
    #[arg(long)]
    n_timepoints: Option<usize>,
    #[arg(long, value_parser = parse_weights)]
    weights: Option<[f64; 3]>,
    /// Comma-separated estimator names.
    #[arg(long, value_delimiter = ',', value_parser = parse_estimator)]
    estimators: Option<Vec<EstimatorKind>>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicySpec>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    truth_reps: Option<usize>,
    #[command(flatten)]
    opts: OptionArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<PolicySpec>,
    /// Monte-Carlo repetitions; used for continuous presets, or for tabular
    /// ones when given explicitly.
    #[arg(long)]
    mc_reps: Option<usize>,
}

fn parse_weights(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three weights".to_string())
}

fn parse_estimator(s: &str) -> std::result::Result<EstimatorKind, String> {
    EstimatorKind::parse(s).map_err(|e| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<PolicySpec, String> {
    PolicySpec::parse(s).map_err(|e| e.to_string())
}

fn parse_basis(s: &str, dim: usize) -> Result<BasisSpec> {
    if s.trim_start().starts_with('{') {
        return Ok(serde_json::from_str(s)?);
    }
    let (kind, arg) = s
        .split_once(':')
        .ok_or_else(|| Error::InvalidBasis(format!("cannot parse basis `{s}`")))?;
    let n: usize = arg
        .parse()
        .map_err(|_| Error::InvalidBasis(format!("bad size in basis `{s}`")))?;
    match kind {
        "indicator" => Ok(BasisSpec::indicator(n)),
        "poly" | "polynomial" => Ok(BasisSpec::polynomial(n, dim)),
        _ => Err(Error::InvalidBasis(format!("unknown basis kind `{kind}`"))),
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn write_grid(path: &Path, grid: &[Vec<f64>], column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["i", "t", column])?;
    for (i, row) in grid.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            w.write_record([(i + 1).to_string(), (t + 1).to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let env = args.env.env(cli.seed.unwrap_or(0))?;
    let data = generate(&env)?;
    let dir = out_dir(cli);
    fs::create_dir_all(&dir)?;
    data.write_csv(fs::File::create(dir.join("data.csv"))?)?;
    fs::write(dir.join("env.json"), env.to_json()?)?;
    println!("wrote {} rows to {}", data.n_individuals() * data.n_timepoints(), dir.join("data.csv").display());
    Ok(())
}

fn estimate(cli: &Cli, args: &EstimateArgs) -> Result<()> {
    let obs_kind = match args.obs_kind {
        ObsKindArg::Auto => ObsKindHint::Auto,
        ObsKindArg::Tabular => ObsKindHint::Tabular { n_states: None },
        ObsKindArg::Continuous => ObsKindHint::Continuous,
    };
    let data = read_csv(
        fs::File::open(&args.data)?,
        IngestOptions {
            obs_kind,
            n_actions: args.n_actions,
        },
    )?;
    let mut opts = EstimatorOptions::default();
    args.opts.apply(&mut opts, data.obs_dim())?;
    let seed = cli.seed.unwrap_or(0);
    let dir = out_dir(cli);
    let policies = if args.policies.is_empty() {
        vec![preset_target_policy()]
    } else {
        args.policies.clone()
    };
    if let [policy] = policies.as_slice() {
        let report = run_estimator(args.estimator, &data, &policy.build()?, &policy.id(), &opts, seed)?;
        write_report(&report, &dir)?;
        println!("{} {} eta = {}", report.estimator_name, report.target_policy_id, report.eta);
        return Ok(());
    }
    let (reports, comparison) = compare_policies(&data, args.estimator, &policies, &opts, seed)?;
    for (k, report) in reports.iter().enumerate() {
        write_report(report, &dir.join(format!("policy_{}", k + 1)))?;
    }
    fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&comparison)?)?;
    for (id, eta) in &comparison.ranking {
        println!("{id} eta = {eta}");
    }
    Ok(())
}

fn benchmark(cli: &Cli, args: &BenchmarkArgs) -> Result<()> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::from_path(path)?,
        (None, Some(p)) => ExperimentConfig::new(p.clone()),
        (None, None) => return Err(Error::InvalidConfig("give --config or --preset".into())),
    };
    if let Some(p) = &args.preset {
        cfg.preset = p.clone();
    }
    if let Some(n) = args.n_individuals {
        cfg.n_individuals = n;
    }
    if let Some(t) = args.n_timepoints {
        cfg.n_timepoints = t;
    }
    if args.weights.is_some() {
        cfg.weights = args.weights;
    }
    if let Some(e) = &args.estimators {
        cfg.estimators = e.clone();
    }
    if let Some(p) = &args.policy {
        cfg.target_policy = p.clone();
    }
    if let Some(r) = args.replications {
        cfg.n_replications = r;
    }
    if let Some(r) = args.truth_reps {
        cfg.truth_reps = r;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = Some(d.clone());
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("."));
    }
    let dim = cfg.env(cfg.seed)?.obs_dim();
    args.opts.apply(&mut cfg.options, dim)?;
    let out = run_benchmark(&cfg)?;
    print!("{}", out.metrics.to_csv()?);
    Ok(())
}

fn oracle(cli: &Cli, args: &OracleArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let env = args.env.env(seed)?;
    let pi = args.policy.clone().unwrap_or_else(preset_target_policy).build()?;
    let dir = out_dir(cli);
    fs::create_dir_all(&dir)?;
    match (env.obs_kind, args.mc_reps) {
        (ObsKind::Tabular { .. }, None) => {
            write_grid(&dir.join("truth.csv"), &dp_oracle_tabular(&env, &pi)?, "value")?;
        }
        (_, reps) => {
            let mc = mc_oracle(&env, &pi, reps.unwrap_or(500), panel_ope::rng::derive_seed(seed, &[1]))?;
            write_grid(&dir.join("truth.csv"), &mc.mean, "value")?;
            write_grid(&dir.join("truth_se.csv"), &mc.se, "se")?;
        }
    }
    println!("wrote {}", dir.join("truth.csv").display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Estimate(a) => estimate(cli, a),
        Command::Benchmark(a) => benchmark(cli, a),
        Command::Oracle(a) => oracle(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::InvalidData(v) = &e {
                for violation in v {
                    eprintln!("  {violation}");
                }
            }
            if let Error::UnknownName(_) = &e {
                eprintln!("presets: {}", PRESETS.join(", "));
            }
            ExitCode::FAILURE
        }
    }
}
