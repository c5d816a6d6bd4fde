//! Synthetic panel environments with mixture dynamics, plus ground-truth
//! oracles.
//!
//! Each transition and each reward is drawn from one of three components: a
//! shared component depending on `(o, a)`, a component specific to the
//! individual, and a component specific to the time point. Component indices
//! follow [`MAIN`], [`INDIVIDUAL`], [`TIME`]. The time component used for the
//! move from `t` to `t + 1` is the one attached to `t`.

mod generate;
mod oracle;

pub use generate::{generate, generate_labeled, initial_observations, EnvSampler, LatentLabels};
pub use oracle::{
    dp_oracle_from, dp_oracle_tabular, dp_q_direct, dp_q_recursive, mc_oracle, mc_oracle_from, noiseless_backward,
    McOracle,
};

use serde::{Deserialize, Serialize};

use crate::data::ObsKind;
use crate::error::{Error, Result};
use crate::policy::PolicySpec;
use crate::rng::fnv1a;

pub const MAIN: usize = 0;
pub const INDIVIDUAL: usize = 1;
pub const TIME: usize = 2;

/// Names accepted by [`EnvSpec::preset`].
pub const PRESETS: [&str; 4] = [
    "paper-tabular",
    "paper-continuous",
    "homogeneous-tabular",
    "homogeneous-continuous",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl Gaussian {
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Self {
        let d = mean.len();
        let cov = (0..d)
            .map(|r| (0..d).map(|c| if r == c { var } else { 0.0 }).collect())
            .collect();
        Self { mean, cov }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionSpec {
    /// `main[s][a]`, `individual[i]`, `time[t]` are distributions over next
    /// states.
    Tabular {
        main: Vec<Vec<Vec<f64>>>,
        individual: Vec<Vec<f64>>,
        time: Vec<Vec<f64>>,
    },
    /// Shared component `N(coef·o + action_shift[a], main_cov)`; the other
    /// two components ignore `(o, a)`.
    Gaussian {
        coef: Vec<Vec<f64>>,
        action_shift: Vec<Vec<f64>>,
        main_cov: Vec<Vec<f64>>,
        individual: Vec<Gaussian>,
        time: Vec<Gaussian>,
    },
}

/// Gaussian reward components. The shared component has mean
/// `intercept + obs_coef·o + action_effect[a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub intercept: f64,
    pub obs_coef: Vec<f64>,
    pub action_effect: Vec<f64>,
    pub individual_mean: Vec<f64>,
    pub time_mean: Vec<f64>,
    /// Standard deviations of the main, individual and time components.
    pub sd: [f64; 3],
}

impl RewardSpec {
    pub fn component_mean(&self, z: usize, i: usize, t: usize, o: &[f64], a: usize) -> f64 {
        match z {
            MAIN => self.intercept + self.obs_coef.iter().zip(o).map(|(c, x)| c * x).sum::<f64>() + self.action_effect[a],
            INDIVIDUAL => self.individual_mean[i],
            _ => self.time_mean[t],
        }
    }

    pub fn mean(&self, weights: &[f64; 3], i: usize, t: usize, o: &[f64], a: usize) -> f64 {
        (0..3)
            .filter(|&z| weights[z] > 0.0)
            .map(|z| weights[z] * self.component_mean(z, i, t, o, a))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLaw {
    UniformStates,
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_kind: ObsKind,
    pub n_actions: usize,
    pub n_individuals: usize,
    pub n_timepoints: usize,
    /// Mixture weights in component order (main, individual, time).
    pub weights: [f64; 3],
    pub transitions: TransitionSpec,
    pub rewards: RewardSpec,
    pub behavior: PolicySpec,
    pub initial: InitialLaw,
    pub seed: u64,
    /// Reuse the transition component for the reward of the same cell instead
    /// of drawing it independently.
    #[serde(default)]
    pub joint_components: bool,
}

fn paper_rewards(n: usize, t: usize) -> RewardSpec {
    RewardSpec {
        intercept: 0.0,
        obs_coef: vec![2.0],
        action_effect: vec![0.0, 3.0],
        individual_mean: (1..=n).map(|i| 4.0 * (i as f64).sin()).collect(),
        time_mean: (1..=t).map(|s| 3.0 * (2.4 * s as f64).cos().abs()).collect(),
        sd: [1.0; 3],
    }
}

fn bernoulli(p1: f64) -> Vec<f64> {
    vec![1.0 - p1, p1]
}

/// Target policy used with the built-in presets: action 1 with probability 0.8.
pub fn preset_target_policy() -> PolicySpec {
    PolicySpec::ObservationAgnostic { probs: vec![0.2, 0.8] }
}

impl EnvSpec {
    /// Two-state design with state-dependent behavior policy.
    pub fn paper_tabular(n: usize, t: usize, seed: u64) -> Self {
        let main = (0..2)
            .map(|o| (0..2).map(|a| bernoulli(if o + a >= 1 { 0.3 } else { 0.7 })).collect())
            .collect();
        Self {
            name: "paper-tabular".into(),
            obs_kind: ObsKind::Tabular { n_states: 2 },
            n_actions: 2,
            n_individuals: n,
            n_timepoints: t,
            weights: [0.6, 0.2, 0.2],
            transitions: TransitionSpec::Tabular {
                main,
                individual: (1..=n).map(|i| bernoulli((i as f64).sin().abs())).collect(),
                time: (1..=t).map(|s| bernoulli((s as f64).cos().abs())).collect(),
            },
            rewards: paper_rewards(n, t),
            behavior: PolicySpec::Table {
                rows: vec![vec![0.7, 0.3], vec![0.3, 0.7]],
            },
            initial: InitialLaw::UniformStates,
            seed,
            joint_components: false,
        }
    }

    /// Scalar Gaussian design with a uniformly random behavior policy.
    pub fn paper_continuous(n: usize, t: usize, seed: u64) -> Self {
        Self {
            name: "paper-continuous".into(),
            obs_kind: ObsKind::Continuous { dim: 1 },
            n_actions: 2,
            n_individuals: n,
            n_timepoints: t,
            weights: [0.6, 0.2, 0.2],
            transitions: TransitionSpec::Gaussian {
                coef: vec![vec![-0.25]],
                action_shift: vec![vec![0.0], vec![1.0]],
                main_cov: vec![vec![1.0]],
                individual: (1..=n)
                    .map(|i| Gaussian::isotropic(vec![(3.0 * i as f64).sin()], 1.0))
                    .collect(),
                time: (1..=t)
                    .map(|s| Gaussian::isotropic(vec![(-1.8 * s as f64).cos()], 1.0))
                    .collect(),
            },
            rewards: paper_rewards(n, t),
            behavior: PolicySpec::ObservationAgnostic { probs: vec![0.5, 0.5] },
            initial: InitialLaw::StandardNormal,
            seed,
            joint_components: false,
        }
    }

    pub fn preset(name: &str, n: usize, t: usize, seed: u64) -> Result<Self> {
        let spec = match name {
            "paper-tabular" => Self::paper_tabular(n, t, seed),
            "paper-continuous" => Self::paper_continuous(n, t, seed),
            "homogeneous-tabular" => Self::paper_tabular(n, t, seed).with_weights([1.0, 0.0, 0.0]),
            "homogeneous-continuous" => Self::paper_continuous(n, t, seed).with_weights([1.0, 0.0, 0.0]),
            other => return Err(Error::UnknownName(format!("environment preset `{other}`"))),
        };
        Ok(Self {
            name: name.into(),
            ..spec
        })
    }

    pub fn with_weights(mut self, weights: [f64; 3]) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_kind.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (n, t, na, d) = (self.n_individuals, self.n_timepoints, self.n_actions, self.obs_dim());
        if n == 0 || t == 0 || na == 0 {
            return bad("environment needs N, T and the action count positive".into());
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return bad(format!("mixture weights {:?} are not on the simplex", self.weights));
        }
        let dist_ok = |p: &[f64], len: usize| {
            p.len() == len && p.iter().all(|x| *x >= 0.0 && x.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-10
        };
        match (&self.transitions, self.obs_kind) {
            (TransitionSpec::Tabular { main, individual, time }, ObsKind::Tabular { n_states }) => {
                if main.len() != n_states || main.iter().any(|r| r.len() != na) {
                    return bad("tabular main component must be states × actions".into());
                }
                if !main.iter().flatten().all(|p| dist_ok(p, n_states))
                    || individual.len() != n
                    || time.len() != t
                    || !individual.iter().chain(time).all(|p| dist_ok(p, n_states))
                {
                    return bad("tabular transition components must be distributions over the states".into());
                }
            }
            (
                TransitionSpec::Gaussian {
                    coef,
                    action_shift,
                    main_cov,
                    individual,
                    time,
                },
                ObsKind::Continuous { dim },
            ) => {
                let square = |m: &Vec<Vec<f64>>| m.len() == dim && m.iter().all(|r| r.len() == dim);
                if !square(coef) || !square(main_cov) || action_shift.len() != na || action_shift.iter().any(|v| v.len() != dim) {
                    return bad("gaussian main component has wrong shape".into());
                }
                if individual.len() != n || time.len() != t {
                    return bad("gaussian individual/time components have wrong count".into());
                }
                for g in individual.iter().chain(time) {
                    if g.mean.len() != dim || !square(&g.cov) {
                        return bad("gaussian component has wrong shape".into());
                    }
                }
            }
            _ => return bad("transition law does not match the observation kind".into()),
        }
        let r = &self.rewards;
        if r.obs_coef.len() != d || r.action_effect.len() != na || r.individual_mean.len() != n || r.time_mean.len() != t {
            return bad("reward components have wrong shape".into());
        }
        if r.sd.iter().any(|s| !(*s >= 0.0)) {
            return bad("reward standard deviations must be nonnegative".into());
        }
        let behavior = self.behavior.build()?;
        behavior.check_compatible(self.obs_kind, na)?;
        if self.initial == InitialLaw::UniformStates && !matches!(self.obs_kind, ObsKind::Tabular { .. }) {
            return bad("uniform initial states need a tabular environment".into());
        }
        Ok(())
    }

    /// Exact next-state distribution of a tabular environment.
    pub fn transition_probs(&self, i: usize, t: usize, s: usize, a: usize) -> Result<Vec<f64>> {
        match &self.transitions {
            TransitionSpec::Tabular { main, individual, time } => {
                let w = &self.weights;
                Ok((0..main.len())
                    .map(|s2| w[MAIN] * main[s][a][s2] + w[INDIVIDUAL] * individual[i][s2] + w[TIME] * time[t][s2])
                    .collect())
            }
            TransitionSpec::Gaussian { .. } => Err(Error::InvalidConfig(format!(
                "environment `{}` has no transition table",
                self.name
            ))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn digest(&self) -> String {
        fnv1a(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}
