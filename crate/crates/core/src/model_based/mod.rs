//! Model-based estimation: a three-component mixture transition model fitted
//! by EM, combined with the stage-one two-way reward fit and rolled out
//! under the target policy.
//!
//! Components are ordered (main, individual, time) as in
//! [`crate::envsim::MAIN`] etc. The time component stored at index `t`
//! governs arrivals at time `t`, so index 0 is never used by the likelihood;
//! it is kept only so the vector has one entry per time point.

mod em;
mod rollout;

pub use em::{em_e_step, em_fit, em_m_step, log_likelihood, EmFit, Responsibilities};
pub use rollout::{estimate_model_based, rollout_grid, rollout_values, ModelBasedConfig};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{ObsKind, TrajectorySet};
use crate::error::{Error, Result};
use crate::linalg::{floor_eigenvalues, lstsq};

/// Eigenvalue floor applied to every fitted covariance.
pub const COV_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionComponents {
    /// Next-state distributions: `main[s][a]`, `individual[i]`, `time[t]`.
    Tabular {
        main: Vec<Vec<Vec<f64>>>,
        individual: Vec<Vec<f64>>,
        time: Vec<Vec<f64>>,
    },
    /// Shared component `N(coef·o + action_shift[a], main_cov)`.
    Gaussian {
        coef: Vec<Vec<f64>>,
        action_shift: Vec<Vec<f64>>,
        main_cov: Vec<Vec<f64>>,
        individual: Vec<GaussianComponent>,
        time: Vec<GaussianComponent>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTransitionModel {
    pub obs_kind: ObsKind,
    pub n_actions: usize,
    /// Mixture weights (main, individual, time).
    pub weights: [f64; 3],
    pub components: TransitionComponents,
    /// Digest of the basis of the reward fit this model is paired with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_digest: Option<String>,
    /// Parameter groups the last M-step left unchanged because they carried
    /// (almost) no responsibility, e.g. `"individual 4"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kept_previous: Vec<String>,
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map(Vec::len).unwrap_or(0);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

/// Weighted mean and covariance (floored) of the rows of `points`.
pub(crate) fn weighted_gaussian(points: &[&[f64]], weights: &[f64]) -> GaussianComponent {
    let d = points.first().map(|p| p.len()).unwrap_or(0);
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(d);
    for (p, w) in points.iter().zip(weights) {
        mean += DVector::from_column_slice(p) * *w;
    }
    mean /= total;
    let mut cov = DMatrix::zeros(d, d);
    for (p, w) in points.iter().zip(weights) {
        let r = DVector::from_column_slice(p) - &mean;
        cov += &r * r.transpose() * *w;
    }
    cov /= total;
    GaussianComponent {
        mean: mean.iter().copied().collect(),
        cov: to_rows(&floor_eigenvalues(&cov, COV_FLOOR)),
    }
}

/// Weighted least squares of the next observation on `(o, one-hot(a))`,
/// returning `(coef, action_shift, residual covariance)`.
pub(crate) fn weighted_linear_gaussian(
    data: &TrajectorySet,
    weight: impl Fn(usize, usize) -> f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (n, t_len, d, na) = (data.n_individuals(), data.n_timepoints(), data.obs_dim(), data.n_actions());
    let p = d + na;
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DMatrix::zeros(p, d);
    let mut x = DVector::zeros(p);
    for i in 0..n {
        for t in 0..t_len - 1 {
            let w = weight(i, t);
            if w == 0.0 {
                continue;
            }
            x.fill(0.0);
            x.rows_mut(0, d).copy_from(&DVector::from_column_slice(data.obs(i, t)));
            x[d + data.action(i, t)] = 1.0;
            let y = DVector::from_column_slice(data.obs(i, t + 1));
            xtx += &x * x.transpose() * w;
            xty += &x * y.transpose() * w;
        }
    }
    let mut b = DMatrix::zeros(p, d);
    for c in 0..d {
        let (col, _) = lstsq(&xtx, &xty.column(c).into_owned());
        b.set_column(c, &col);
    }
    let mut cov = DMatrix::zeros(d, d);
    let mut total = 0.0;
    for i in 0..n {
        for t in 0..t_len - 1 {
            let w = weight(i, t);
            if w == 0.0 {
                continue;
            }
            x.fill(0.0);
            x.rows_mut(0, d).copy_from(&DVector::from_column_slice(data.obs(i, t)));
            x[d + data.action(i, t)] = 1.0;
            let r = DVector::from_column_slice(data.obs(i, t + 1)) - b.transpose() * &x;
            cov += &r * r.transpose() * w;
            total += w;
        }
    }
    if total > 0.0 {
        cov /= total;
    }
    let coef = to_rows(&b.rows(0, d).transpose());
    let action_shift = (0..na).map(|a| b.row(d + a).iter().copied().collect()).collect();
    (coef, action_shift, to_rows(&floor_eigenvalues(&cov, COV_FLOOR)))
}

fn normalized(counts: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = counts.iter().sum();
    (s > 0.0).then(|| counts.iter().map(|c| c / s).collect())
}

impl MixtureTransitionModel {
    /// Starting point for EM: equal weights; the shared component from a
    /// pooled fit of all transitions; each individual (time) component from
    /// that individual's (arrival time's) observations; covariances from
    /// pooled residuals.
    pub fn initialize(data: &TrajectorySet) -> Result<Self> {
        let (n, t_len, na) = (data.n_individuals(), data.n_timepoints(), data.n_actions());
        if t_len < 2 {
            return Err(Error::InvalidConfig("transition model needs at least two time points".into()));
        }
        let components = match data.obs_kind() {
            ObsKind::Tabular { n_states } => {
                let mut main = vec![vec![vec![0.0; n_states]; na]; n_states];
                let mut individual = vec![vec![0.0; n_states]; n];
                let mut time = vec![vec![0.0; n_states]; t_len];
                let mut pooled = vec![0.0; n_states];
                for i in 0..n {
                    for t in 0..t_len - 1 {
                        let s = data.obs(i, t)[0] as usize;
                        let s2 = data.obs(i, t + 1)[0] as usize;
                        main[s][data.action(i, t)][s2] += 1.0;
                        individual[i][s2] += 1.0;
                        time[t + 1][s2] += 1.0;
                        pooled[s2] += 1.0;
                    }
                }
                let pooled = normalized(&pooled).expect("at least one transition");
                let fill = |c: &Vec<f64>| normalized(c).unwrap_or_else(|| pooled.clone());
                TransitionComponents::Tabular {
                    main: main.iter().map(|r| r.iter().map(fill).collect()).collect(),
                    individual: individual.iter().map(fill).collect(),
                    time: time.iter().map(fill).collect(),
                }
            }
            ObsKind::Continuous { .. } => {
                let (coef, action_shift, main_cov) = weighted_linear_gaussian(data, |_, _| 1.0);
                let cov = main_cov.clone();
                let mean_of = |cells: Vec<(usize, usize)>| {
                    let pts: Vec<&[f64]> = cells.iter().map(|&(i, t)| data.obs(i, t)).collect();
                    let g = weighted_gaussian(&pts, &vec![1.0; pts.len()]);
                    GaussianComponent {
                        mean: g.mean,
                        cov: cov.clone(),
                    }
                };
                let individual = (0..n)
                    .map(|i| mean_of((1..t_len).map(|t| (i, t)).collect()))
                    .collect();
                // index 0 has no arrivals and reuses the first arrival time
                let time = (0..t_len)
                    .map(|t| mean_of((0..n).map(|i| (i, t.max(1))).collect()))
                    .collect();
                TransitionComponents::Gaussian {
                    coef,
                    action_shift,
                    main_cov,
                    individual,
                    time,
                }
            }
        };
        Ok(Self {
            obs_kind: data.obs_kind(),
            n_actions: na,
            weights: [1.0 / 3.0; 3],
            components,
            basis_digest: None,
            kept_previous: Vec::new(),
        })
    }

    pub fn n_individuals(&self) -> usize {
        match &self.components {
            TransitionComponents::Tabular { individual, .. } => individual.len(),
            TransitionComponents::Gaussian { individual, .. } => individual.len(),
        }
    }

    pub fn n_timepoints(&self) -> usize {
        match &self.components {
            TransitionComponents::Tabular { time, .. } => time.len(),
            TransitionComponents::Gaussian { time, .. } => time.len(),
        }
    }

    pub fn with_weights(mut self, weights: [f64; 3]) -> Self {
        self.weights = weights;
        self
    }

    /// Checks shapes against `data`, the weight simplex, categorical sums
    /// and positive definiteness of every covariance.
    pub fn validate(&self, data: &TrajectorySet) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.obs_kind != data.obs_kind() || self.n_actions != data.n_actions() {
            return bad("model does not match the data's observation kind or action count".into());
        }
        if self.n_individuals() != data.n_individuals() || self.n_timepoints() != data.n_timepoints() {
            return bad("model does not match the panel size".into());
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
            return bad(format!("weights {:?} are not on the simplex", self.weights));
        }
        match &self.components {
            TransitionComponents::Tabular { main, individual, time } => {
                let ok = |p: &Vec<f64>| p.iter().all(|x| *x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-10;
                if !main.iter().flatten().chain(individual).chain(time).all(ok) {
                    return bad("categorical components must sum to one".into());
                }
            }
            TransitionComponents::Gaussian {
                main_cov,
                individual,
                time,
                ..
            } => {
                for cov in std::iter::once(main_cov).chain(individual.iter().chain(time).map(|g| &g.cov)) {
                    let m = from_rows(cov);
                    if m.clone().cholesky().is_none() {
                        return bad("covariance is not positive definite".into());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
