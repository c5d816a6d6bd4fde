//! Model-free value estimation by backward induction through two-way
//! fixed-effects regressions.
//!
//! Stage `k` regresses on `(O_{i,s}, A_{i,s})` the value, under the target
//! policy, of the stage `k − 1` Q-function one step later, over start times
//! `s = 1..=T−k+1`. Stage one regresses the rewards. The stage-`k` fit at start
//! time `s` is the Q-function for target time `s + k − 1`, so a single
//! backward pass of `K` stages yields every `η_{i,t}`: target `t ≤ K` uses
//! stage `t` at start time one, and later targets use stage `K` shifted to
//! end at `t`, relying on the main effect having died out by then.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::TrajectorySet;
use crate::error::{Error, Result};
use crate::estimand::ValueReport;
use crate::policy::Policy;
use crate::rng::fnv1a;
use crate::sieve::{fwl_solve, profile_solve_with_ridge, BasisSpec, StagePanel, TwoWayFit};

pub const ESTIMATOR_NAME: &str = "twdidp-mf";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solver {
    Fwl,
    Profile { tol: f64, max_iter: usize },
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Fwl
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardConfig {
    pub basis: BasisSpec,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default)]
    pub ridge: f64,
    /// Cap on the number of stages. Defaults to `ceil(10·ln(N·T))`, further
    /// limited to `T − 1` so the last stage still has two time columns.
    #[serde(default)]
    pub max_stages: Option<usize>,
    /// Main-effect spread below which a stage counts as degenerate; only
    /// reported by [`first_degenerate_stage`], it does not change the fit.
    #[serde(default = "default_degeneracy_tol")]
    pub degeneracy_tol: f64,
}

fn default_degeneracy_tol() -> f64 {
    1e-6
}

impl BackwardConfig {
    pub fn new(basis: BasisSpec) -> Self {
        Self {
            basis,
            solver: Solver::Fwl,
            ridge: 0.0,
            max_stages: None,
            degeneracy_tol: default_degeneracy_tol(),
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = ridge;
        self
    }

    pub fn with_max_stages(mut self, k: usize) -> Self {
        self.max_stages = Some(k);
        self
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        if self.max_stages == Some(0) {
            return Err(Error::InvalidConfig("max_stages must be at least 1".into()));
        }
        if !(self.degeneracy_tol > 0.0) {
            return Err(Error::InvalidConfig("degeneracy_tol must be positive".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::InvalidConfig("ridge must be nonnegative".into()));
        }
        if let Solver::Profile { tol, .. } = self.solver {
            if !(tol > 0.0) {
                return Err(Error::InvalidConfig("profile tolerance must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of stages fitted for a panel of this size.
    pub fn stage_cap(&self, n: usize, t: usize) -> usize {
        match self.max_stages {
            Some(k) => k.min(t),
            None => {
                let k = (10.0 * ((n * t) as f64).ln()).ceil().max(1.0) as usize;
                k.min(t.saturating_sub(1)).max(1)
            }
        }
    }

    pub fn digest(&self) -> String {
        fnv1a(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Fitted Q-function of one backward-induction stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunctionStage {
    /// Stage index `k`, 1-based.
    pub stage: usize,
    /// Two-way fit indexed by start time (`lambda.len() == T − k + 1`).
    pub fit: TwoWayFit,
}

impl QFunctionStage {
    pub fn width(&self) -> usize {
        self.fit.lambda.len()
    }

    /// Q-value for individual `i` at start time `s` (0-based).
    pub fn eval_start(&self, i: usize, s: usize, o: &[f64], a: usize) -> Result<f64> {
        self.fit.predict(i, s, o, a)
    }

    /// Q-value for individual `i` and target time `t` (0-based), i.e. the
    /// fit at start time `t − k + 1`.
    pub fn eval_target(&self, i: usize, t: usize, o: &[f64], a: usize) -> Result<f64> {
        let s = (t + 1)
            .checked_sub(self.stage)
            .ok_or_else(|| Error::IndexOutOfRange(format!("target time {} before stage {}", t + 1, self.stage)))?;
        self.fit.predict(i, s, o, a)
    }

    /// Largest deviation of the main effect from its mean over the given
    /// observations crossed with every action.
    pub fn main_effect_spread<'a>(&self, support: impl IntoIterator<Item = &'a [f64]>) -> Result<f64> {
        let mut vals = Vec::new();
        let mut phi = vec![0.0; self.fit.basis_len()];
        for o in support {
            self.fit.basis.eval_into(o, &mut phi)?;
            for a in 0..self.fit.n_actions {
                vals.push(self.fit.main_effect_phi(&phi, a));
            }
        }
        if vals.is_empty() {
            return Ok(0.0);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        Ok(vals.iter().fold(0.0f64, |m, v| m.max((v - mean).abs())))
    }
}

/// Basis vectors and target-policy probabilities at every observed cell.
struct CellCache {
    l: usize,
    n_actions: usize,
    t: usize,
    phi: Vec<f64>,
    probs: Vec<f64>,
}

impl CellCache {
    fn new(data: &TrajectorySet, pi: &Policy, basis: &BasisSpec) -> Result<Self> {
        let (n, t, na, l) = (data.n_individuals(), data.n_timepoints(), data.n_actions(), basis.len());
        let mut phi = vec![0.0; n * t * l];
        let mut probs = vec![0.0; n * t * na];
        for i in 0..n {
            for s in 0..t {
                let c = i * t + s;
                basis.eval_into(data.obs(i, s), &mut phi[c * l..(c + 1) * l])?;
                pi.probs_into(data.obs(i, s), &mut probs[c * na..(c + 1) * na])?;
            }
        }
        Ok(Self {
            l,
            n_actions: na,
            t,
            phi,
            probs,
        })
    }

    /// `Σ_a π(a|O_{i,s}) Q(i, column, O_{i,s}, a)`.
    fn policy_value(&self, fit: &TwoWayFit, i: usize, s: usize, column: usize) -> f64 {
        let c = i * self.t + s;
        let phi = &self.phi[c * self.l..(c + 1) * self.l];
        let probs = &self.probs[c * self.n_actions..(c + 1) * self.n_actions];
        let main: f64 = probs
            .iter()
            .enumerate()
            .map(|(a, p)| p * fit.main_effect_phi(phi, a))
            .sum();
        fit.offset + fit.theta[i] + fit.lambda[column] + main
    }
}

fn check_inputs(data: &TrajectorySet, pi: &Policy, cfg: &BackwardConfig) -> Result<()> {
    cfg.validate()?;
    pi.check_compatible(data.obs_kind(), data.n_actions())?;
    if cfg.basis.dim() != data.obs_dim() {
        return Err(Error::DimensionMismatch {
            expected: data.obs_dim(),
            got: cfg.basis.dim(),
        });
    }
    Ok(())
}

pub(crate) fn solve_stage(panel: &StagePanel, cfg: &BackwardConfig, n_actions: usize) -> Result<TwoWayFit> {
    let fit = match cfg.solver {
        Solver::Fwl => fwl_solve(panel, &cfg.basis, n_actions, cfg.ridge),
        Solver::Profile { tol, max_iter } => {
            profile_solve_with_ridge(panel, &cfg.basis, n_actions, tol, max_iter, cfg.ridge).map(|p| p.fit)
        }
    };
    fit.map_err(|e| e.at_stage(panel.stage()))
}

/// Stage-one fit of the rewards.
pub fn fit_stage_one(data: &TrajectorySet, cfg: &BackwardConfig) -> Result<QFunctionStage> {
    cfg.validate()?;
    let panel = StagePanel::rewards(data);
    Ok(QFunctionStage {
        stage: 1,
        fit: solve_stage(&panel, cfg, data.n_actions())?,
    })
}

/// Fits stages `1..=n_stages`.
pub fn backward_stages(
    data: &TrajectorySet,
    pi: &Policy,
    cfg: &BackwardConfig,
    n_stages: usize,
) -> Result<Vec<QFunctionStage>> {
    check_inputs(data, pi, cfg)?;
    let (n, t) = (data.n_individuals(), data.n_timepoints());
    if n_stages == 0 || n_stages > t {
        return Err(Error::IndexOutOfRange(format!("{n_stages} stages for {t} time points")));
    }
    let cache = CellCache::new(data, pi, &cfg.basis)?;
    let mut stages = vec![fit_stage_one(data, cfg)?];
    for k in 2..=n_stages {
        let prev = &stages.last().expect("stage one present").fit;
        let width = t - k + 1;
        let responses = DMatrix::from_fn(n, width, |i, s| cache.policy_value(prev, i, s + 1, s + 1));
        let panel = StagePanel::new(k, responses, data)?;
        let fit = solve_stage(&panel, cfg, data.n_actions())?;
        stages.push(QFunctionStage { stage: k, fit });
    }
    Ok(stages)
}

/// Stages needed for target time `t_star` (1-based): `min(t_star, K_max)`.
pub fn backward_induct(
    data: &TrajectorySet,
    pi: &Policy,
    t_star: usize,
    cfg: &BackwardConfig,
) -> Result<Vec<QFunctionStage>> {
    let t = data.n_timepoints();
    if t_star == 0 || t_star > t {
        return Err(Error::IndexOutOfRange(format!("target time {t_star} outside 1..={t}")));
    }
    let k = t_star.min(cfg.stage_cap(data.n_individuals(), t));
    backward_stages(data, pi, cfg, k)
}

/// `η̂_{i,t}` for every individual and time from one backward pass.
pub fn value_grid(data: &TrajectorySet, pi: &Policy, stages: &[QFunctionStage]) -> Result<Vec<Vec<f64>>> {
    let (n, t) = (data.n_individuals(), data.n_timepoints());
    let k_max = stages.len();
    if k_max == 0 {
        return Err(Error::InvalidConfig("no stages".into()));
    }
    let mut probs = vec![0.0; data.n_actions()];
    let mut grid = vec![vec![0.0; t]; n];
    for (i, row) in grid.iter_mut().enumerate() {
        let o = data.obs(i, 0);
        pi.probs_into(o, &mut probs)?;
        let phi = stages[0].fit.basis.eval(o)?;
        for (target, cell) in row.iter_mut().enumerate() {
            let stage = &stages[(target + 1).min(k_max) - 1];
            let s = target + 1 - stage.stage;
            let fit = &stage.fit;
            let main: f64 = probs
                .iter()
                .enumerate()
                .map(|(a, p)| p * fit.main_effect_phi(&phi, a))
                .sum();
            *cell = fit.offset + fit.theta[i] + fit.lambda[s] + main;
        }
    }
    Ok(grid)
}

/// All four value estimates of `pi`.
pub fn estimate_values(data: &TrajectorySet, pi: &Policy, cfg: &BackwardConfig) -> Result<ValueReport> {
    estimate_values_with_id(data, pi, "target", cfg)
}

pub fn estimate_values_with_id(
    data: &TrajectorySet,
    pi: &Policy,
    policy_id: &str,
    cfg: &BackwardConfig,
) -> Result<ValueReport> {
    let k = cfg.stage_cap(data.n_individuals(), data.n_timepoints());
    let stages = backward_stages(data, pi, cfg, k)?;
    let grid = value_grid(data, pi, &stages)?;
    Ok(ValueReport::from_grid(ESTIMATOR_NAME, policy_id, grid, cfg.digest(), 0))
}

/// First stage whose main-effect spread over the observed support falls
/// below `tol`.
pub fn first_degenerate_stage(data: &TrajectorySet, stages: &[QFunctionStage], tol: f64) -> Result<Option<usize>> {
    let support = observed_support(data);
    for st in stages {
        if st.main_effect_spread(support.iter().map(Vec::as_slice))? < tol {
            return Ok(Some(st.stage));
        }
    }
    Ok(None)
}

/// Distinct observed observations, in first-seen order.
pub fn observed_support(data: &TrajectorySet) -> Vec<Vec<f64>> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for i in 0..data.n_individuals() {
        for s in 0..data.n_timepoints() {
            let o = data.obs(i, s);
            let key: Vec<u64> = o.iter().map(|x| x.to_bits()).collect();
            if seen.insert(key) {
                out.push(o.to_vec());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObsKind;

    fn small_tabular(rewards: impl Fn(usize, usize) -> f64) -> TrajectorySet {
        use rand::{Rng, SeedableRng};
        let (n, t) = (5, 6);
        let mut rng = crate::rng::Rng::seed_from_u64(3);
        let obs: Vec<f64> = (0..n * t).map(|_| rng.random_range(0..2) as f64).collect();
        let actions: Vec<usize> = (0..n * t).map(|_| rng.random_range(0..2)).collect();
        let r: Vec<f64> = (0..n * t).map(|c| rewards(c / t, c % t)).collect();
        TrajectorySet::new(n, t, 2, ObsKind::Tabular { n_states: 2 }, obs, actions, r).unwrap()
    }

    #[test]
    fn stage_count_and_widths() {
        let data = small_tabular(|i, t| (i * t) as f64 * 0.1);
        let pi = Policy::observation_agnostic(vec![0.3, 0.7]).unwrap();
        let cfg = BackwardConfig::new(BasisSpec::indicator(2)).with_ridge(1e-8);
        let stages = backward_induct(&data, &pi, 4, &cfg).unwrap();
        assert_eq!(stages.len(), 4);
        for st in &stages {
            assert_eq!(st.width(), 6 - st.stage + 1);
        }
        let capped = backward_induct(&data, &pi, 4, &cfg.clone().with_max_stages(2)).unwrap();
        assert_eq!(capped.len(), 2);
        assert!(backward_induct(&data, &pi, 7, &cfg).is_err());
        assert!(backward_induct(&data, &pi, 0, &cfg).is_err());
    }

    #[test]
    fn default_cap_leaves_two_columns() {
        let cfg = BackwardConfig::new(BasisSpec::indicator(2));
        assert_eq!(cfg.stage_cap(80, 80), 79);
        assert_eq!(cfg.stage_cap(1000, 1000), 139);
        assert_eq!(cfg.stage_cap(2, 1), 1);
    }

    #[test]
    fn constant_reward_gives_constant_values() {
        let data = small_tabular(|_, _| 2.75);
        let pi = Policy::observation_agnostic(vec![0.5, 0.5]).unwrap();
        let cfg = BackwardConfig::new(BasisSpec::indicator(2));
        let r = estimate_values(&data, &pi, &cfg).unwrap();
        assert!((r.eta - 2.75).abs() < 1e-7);
        assert!(r.eta_it.iter().flatten().all(|v| (v - 2.75).abs() < 1e-7));
    }

    #[test]
    fn stage_errors_carry_the_index() {
        let data = small_tabular(|i, _| i as f64);
        let pi = Policy::observation_agnostic(vec![0.5, 0.5]).unwrap();
        let cfg = BackwardConfig::new(BasisSpec::indicator(2)).with_max_stages(6);
        match estimate_values(&data, &pi, &cfg) {
            Err(Error::Stage { stage: 6, .. }) => {}
            other => panic!("expected singular width-one stage, got {other:?}"),
        }
    }
}
