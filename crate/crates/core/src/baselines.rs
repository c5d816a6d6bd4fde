//! Comparison estimators that ignore one or both kinds of heterogeneity.
//!
//! * [`b1_doubly_homogeneous`]: long-run average reward of a single
//!   stationary MDP fitted to the whole panel.
//! * [`b2_temporal_stationary`]: the same estimator run on each trajectory
//!   separately.
//! * [`b3_individual_homogeneous`]: backward induction with pooled
//!   cross-sectional regressions per time point and no individual effects.
//! * [`b4_homogeneous_model_based`]: one transition model and one reward
//!   regression for everybody, evaluated by rollouts.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ObsKind, TrajectorySet};
use crate::error::{Error, Result};
use crate::estimand::ValueReport;
use crate::linalg::{lstsq, solve_spd, sym_condition_ratio, SINGULAR_RTOL};
use crate::model_based::{
    rollout_grid, weighted_linear_gaussian, GaussianComponent, MixtureTransitionModel, TransitionComponents,
};
use crate::policy::Policy;
use crate::sieve::{BasisSpec, EffectConstraint, TwoWayFit};

/// Solution of the stacked estimating equations of the average-reward MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct B1Solution {
    /// Long-run average reward.
    pub eta: f64,
    /// Relative value function coefficients, one block of length `L` per
    /// action, normalized orthogonal to the constant direction.
    pub beta: Vec<f64>,
    /// Norm of the estimating-equation residual at the solution.
    pub residual: f64,
}

/// Linear estimating system `M x = b` in `x = (eta, beta)`.
#[derive(Debug, Clone)]
pub struct B1System {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Constant direction of `beta`, which the equations leave free.
    pub null_dir: DVector<f64>,
}

impl B1System {
    /// Assembles `Σ h (R_t − eta + (ψ_{t+1} − φ_t)ᵀ beta)` with instruments
    /// `h = (1, φ_t)`, where `φ_t` is the basis at `(O_t, A_t)` placed in the
    /// block of `A_t` and `ψ_{t+1}` its policy average at `O_{t+1}`.
    pub fn build(data: &TrajectorySet, pi: &Policy, spec: &BasisSpec) -> Result<Self> {
        spec.validate()?;
        pi.check_compatible(data.obs_kind(), data.n_actions())?;
        let (n, t_len, na, l) = (data.n_individuals(), data.n_timepoints(), data.n_actions(), spec.len());
        if t_len < 2 {
            return Err(Error::InvalidConfig("need at least one transition per trajectory".into()));
        }
        let p = na * l;
        let mut matrix = DMatrix::zeros(p + 1, p + 1);
        let mut rhs = DVector::zeros(p + 1);
        let mut h = DVector::zeros(p + 1);
        let mut z = DVector::zeros(p + 1);
        let mut phi = vec![0.0; l];
        let mut probs = vec![0.0; na];
        for i in 0..n {
            for t in 0..t_len - 1 {
                h.fill(0.0);
                z.fill(0.0);
                h[0] = 1.0;
                z[0] = 1.0;
                let a = data.action(i, t);
                spec.eval_into(data.obs(i, t), &mut phi)?;
                for j in 0..l {
                    h[1 + a * l + j] = phi[j];
                    z[1 + a * l + j] = phi[j];
                }
                spec.eval_into(data.obs(i, t + 1), &mut phi)?;
                pi.probs_into(data.obs(i, t + 1), &mut probs)?;
                for (b, pb) in probs.iter().enumerate() {
                    for j in 0..l {
                        z[1 + b * l + j] -= pb * phi[j];
                    }
                }
                matrix += &h * z.transpose();
                rhs += &h * data.reward(i, t);
            }
        }
        let c = spec.constant_coefficients();
        let mut null_dir = DVector::from_iterator(p, (0..na).flat_map(|_| c.iter().copied()));
        null_dir.normalize_mut();
        Ok(Self { matrix, rhs, null_dir })
    }

    /// `M x − b`.
    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x - &self.rhs
    }
}

/// Solves the estimating equations in one least-squares solve with the
/// normalization `beta ⟂ constant direction` appended as an extra row.
pub fn b1_solve(data: &TrajectorySet, pi: &Policy, spec: &BasisSpec) -> Result<B1Solution> {
    let sys = B1System::build(data, pi, spec)?;
    let p1 = sys.matrix.nrows();
    let mut stacked = DMatrix::zeros(p1 + 1, p1);
    stacked.rows_mut(0, p1).copy_from(&sys.matrix);
    for j in 1..p1 {
        stacked[(p1, j)] = sys.null_dir[j - 1];
    }
    let mut rhs = DVector::zeros(p1 + 1);
    rhs.rows_mut(0, p1).copy_from(&sys.rhs);
    let (x, ratio) = lstsq(&stacked, &rhs);
    if !(ratio >= SINGULAR_RTOL) {
        return Err(Error::SingularSystem { ratio });
    }
    let residual = sys.residual(&x).norm();
    Ok(B1Solution {
        eta: x[0],
        beta: x.iter().skip(1).copied().collect(),
        residual,
    })
}

pub fn b1_doubly_homogeneous(data: &TrajectorySet, pi: &Policy, spec: &BasisSpec) -> Result<ValueReport> {
    let sol = b1_solve(data, pi, spec)?;
    let grid = vec![vec![sol.eta; data.n_timepoints()]; data.n_individuals()];
    Ok(ValueReport::from_grid("b1", "target", grid, spec.digest(), 0))
}

/// Per-trajectory average-reward estimates; singular trajectories become
/// NaN rows listed in `missing_individuals`.
pub fn b2_temporal_stationary(data: &TrajectorySet, pi: &Policy, spec: &BasisSpec) -> Result<ValueReport> {
    spec.validate()?;
    pi.check_compatible(data.obs_kind(), data.n_actions())?;
    let etas: Vec<f64> = (0..data.n_individuals())
        .into_par_iter()
        .map(|i| match b1_solve(&data.individual(i), pi, spec) {
            Ok(sol) => Ok(sol.eta),
            Err(Error::SingularSystem { .. }) => Ok(f64::NAN),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    if etas.iter().all(|e| e.is_nan()) {
        return Err(Error::SingularSystem { ratio: 0.0 });
    }
    let grid = etas.iter().map(|&e| vec![e; data.n_timepoints()]).collect();
    Ok(ValueReport::from_grid("b2", "target", grid, spec.digest(), 0))
}

/// Per-time design blocks shared by every target time.
struct CrossSections {
    l: usize,
    na: usize,
    /// `N × p` design per time point.
    designs: Vec<DMatrix<f64>>,
    /// Regularized Gram matrix per time point.
    grams: Vec<DMatrix<f64>>,
    /// Policy-averaged basis `Σ_a π(a|O_{i,t}) φ_a(O_{i,t})` per time, `N × p`.
    averaged: Vec<DMatrix<f64>>,
}

impl CrossSections {
    fn new(data: &TrajectorySet, pi: &Policy, spec: &BasisSpec, ridge: f64) -> Result<Self> {
        let (n, t_len, na, l) = (data.n_individuals(), data.n_timepoints(), data.n_actions(), spec.len());
        let p = na * l;
        let mut designs = Vec::with_capacity(t_len);
        let mut averaged = Vec::with_capacity(t_len);
        let mut grams = Vec::with_capacity(t_len);
        let mut phi = vec![0.0; l];
        let mut probs = vec![0.0; na];
        for t in 0..t_len {
            let mut x = DMatrix::zeros(n, p);
            let mut v = DMatrix::zeros(n, p);
            for i in 0..n {
                spec.eval_into(data.obs(i, t), &mut phi)?;
                pi.probs_into(data.obs(i, t), &mut probs)?;
                let a = data.action(i, t);
                for j in 0..l {
                    x[(i, a * l + j)] = phi[j];
                    for (b, pb) in probs.iter().enumerate() {
                        v[(i, b * l + j)] = pb * phi[j];
                    }
                }
            }
            let mut g = x.transpose() * &x;
            if ridge > 0.0 {
                g += DMatrix::identity(p, p) * ridge;
            } else {
                let ratio = sym_condition_ratio(&g);
                if !(ratio >= SINGULAR_RTOL) {
                    return Err(Error::SingularDesign { ratio }.at_stage(t + 1));
                }
            }
            designs.push(x);
            averaged.push(v);
            grams.push(g);
        }
        Ok(Self {
            l,
            na,
            designs,
            grams,
            averaged,
        })
    }

    /// `η̂_{t*}` averaged over individuals, `t_star` 0-based.
    fn value_at(&self, data: &TrajectorySet, t_star: usize) -> DVector<f64> {
        let n = data.n_individuals();
        let mut y = DVector::from_fn(n, |i, _| data.reward(i, t_star));
        for t in (0..=t_star).rev() {
            let beta = solve_spd(&self.grams[t], &(self.designs[t].transpose() * &y));
            y = &self.averaged[t] * beta;
        }
        debug_assert_eq!(self.averaged[0].ncols(), self.na * self.l);
        y
    }
}

/// Value at one target time (1-based) from pooled backward regressions.
pub fn b3_value_at(data: &TrajectorySet, pi: &Policy, spec: &BasisSpec, t_star: usize, ridge: f64) -> Result<f64> {
    let t_len = data.n_timepoints();
    if t_star == 0 || t_star > t_len {
        return Err(Error::IndexOutOfRange(format!("target time {t_star} outside 1..={t_len}")));
    }
    spec.validate()?;
    pi.check_compatible(data.obs_kind(), data.n_actions())?;
    let cs = CrossSections::new(data, pi, spec, ridge)?;
    Ok(cs.value_at(data, t_star - 1).mean())
}

/// Pooled backward induction for every target time; `η̂_{i,t} = η̂_t`.
pub fn b3_individual_homogeneous(data: &TrajectorySet, pi: &Policy, spec: &BasisSpec, ridge: f64) -> Result<ValueReport> {
    spec.validate()?;
    pi.check_compatible(data.obs_kind(), data.n_actions())?;
    let cs = CrossSections::new(data, pi, spec, ridge)?;
    let eta_t: Vec<f64> = (0..data.n_timepoints())
        .map(|t| cs.value_at(data, t).mean())
        .collect();
    let grid = vec![eta_t; data.n_individuals()];
    Ok(ValueReport::from_grid("b3", "target", grid, spec.digest(), 0))
}

/// Single-component transition model shared by all individuals and times,
/// expressed as a mixture with all weight on the shared component.
pub fn fit_homogeneous_transition(data: &TrajectorySet) -> Result<MixtureTransitionModel> {
    let (n, t_len, na) = (data.n_individuals(), data.n_timepoints(), data.n_actions());
    if t_len < 2 {
        return Err(Error::InvalidConfig("transition model needs at least two time points".into()));
    }
    let components = match data.obs_kind() {
        ObsKind::Tabular { n_states } => {
            let mut counts = vec![vec![vec![0.0; n_states]; na]; n_states];
            let mut pooled = vec![0.0; n_states];
            for i in 0..n {
                for t in 0..t_len - 1 {
                    let s = data.obs(i, t)[0] as usize;
                    let s2 = data.obs(i, t + 1)[0] as usize;
                    counts[s][data.action(i, t)][s2] += 1.0;
                    pooled[s2] += 1.0;
                }
            }
            let total: f64 = pooled.iter().sum();
            let pooled: Vec<f64> = pooled.iter().map(|c| c / total).collect();
            let main = counts
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|c| {
                            let s: f64 = c.iter().sum();
                            if s > 0.0 {
                                c.iter().map(|x| x / s).collect()
                            } else {
                                pooled.clone()
                            }
                        })
                        .collect()
                })
                .collect();
            TransitionComponents::Tabular {
                main,
                individual: vec![pooled.clone(); n],
                time: vec![pooled; t_len],
            }
        }
        ObsKind::Continuous { dim } => {
            let (coef, action_shift, main_cov) = weighted_linear_gaussian(data, |_, _| 1.0);
            let unit = GaussianComponent {
                mean: vec![0.0; dim],
                cov: main_cov.clone(),
            };
            TransitionComponents::Gaussian {
                coef,
                action_shift,
                main_cov,
                individual: vec![unit.clone(); n],
                time: vec![unit; t_len],
            }
        }
    };
    Ok(MixtureTransitionModel {
        obs_kind: data.obs_kind(),
        n_actions: na,
        weights: [1.0, 0.0, 0.0],
        components,
        basis_digest: None,
        kept_previous: Vec::new(),
    })
}

/// Pooled reward regression on the interaction basis, with zero effects.
pub fn fit_pooled_reward(data: &TrajectorySet, spec: &BasisSpec, ridge: f64) -> Result<TwoWayFit> {
    spec.validate()?;
    let (n, t_len, na, l) = (data.n_individuals(), data.n_timepoints(), data.n_actions(), spec.len());
    let p = na * l;
    let mut g = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut phi = vec![0.0; l];
    let mut x = DVector::zeros(p);
    for i in 0..n {
        for t in 0..t_len {
            spec.eval_into(data.obs(i, t), &mut phi)?;
            x.fill(0.0);
            let a = data.action(i, t);
            for j in 0..l {
                x[a * l + j] = phi[j];
            }
            g += &x * x.transpose();
            xty += &x * data.reward(i, t);
        }
    }
    if ridge > 0.0 {
        g += DMatrix::identity(p, p) * ridge;
    } else {
        let ratio = sym_condition_ratio(&g);
        if !(ratio >= SINGULAR_RTOL) {
            return Err(Error::SingularDesign { ratio });
        }
    }
    let beta = solve_spd(&g, &xty);
    Ok(TwoWayFit {
        beta: beta.iter().copied().collect(),
        theta: vec![0.0; n],
        lambda: vec![0.0; t_len],
        offset: 0.0,
        basis: spec.clone(),
        n_actions: na,
        constraint: EffectConstraint::SumZero,
    })
}

pub fn b4_homogeneous_model_based(
    data: &TrajectorySet,
    pi: &Policy,
    spec: &BasisSpec,
    ridge: f64,
    n_rollouts: usize,
    seed: u64,
) -> Result<ValueReport> {
    let model = fit_homogeneous_transition(data)?;
    let reward = fit_pooled_reward(data, spec, ridge)?;
    let grid = rollout_grid(&model, &reward, data, pi, n_rollouts, seed)?;
    Ok(ValueReport::from_grid("b4", "target", grid, spec.digest(), seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate, EnvSpec};

    #[test]
    fn constant_reward_is_recovered_by_b1() {
        let data = generate(&EnvSpec::paper_tabular(10, 12, 1)).unwrap();
        let data = data.with_rewards(vec![4.5; 120]).unwrap();
        let pi = Policy::observation_agnostic(vec![0.2, 0.8]).unwrap();
        let sol = b1_solve(&data, &pi, &BasisSpec::indicator(2)).unwrap();
        assert!((sol.eta - 4.5).abs() < 1e-8);
        assert!(sol.residual <= 1e-8 * 120.0);
    }

    #[test]
    fn short_trajectories_are_flagged_by_b2() {
        let data = generate(&EnvSpec::paper_tabular(5, 2, 1)).unwrap();
        let pi = Policy::observation_agnostic(vec![0.2, 0.8]).unwrap();
        match b2_temporal_stationary(&data, &pi, &BasisSpec::indicator(2)) {
            Ok(r) => assert!(!r.missing_individuals.is_empty()),
            Err(Error::SingularSystem { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn b3_first_time_is_cross_sectional_regression() {
        let data = generate(&EnvSpec::paper_tabular(30, 4, 2)).unwrap();
        let pi = Policy::observation_agnostic(vec![0.2, 0.8]).unwrap();
        let spec = BasisSpec::indicator(2);
        let v = b3_value_at(&data, &pi, &spec, 1, 0.0).unwrap();
        // cell means of R at t = 1, then policy average at each O_{i,1}
        let mut sums = [[0.0; 2]; 2];
        let mut counts = [[0.0; 2]; 2];
        for i in 0..30 {
            let (s, a) = (data.obs(i, 0)[0] as usize, data.action(i, 0));
            sums[s][a] += data.reward(i, 0);
            counts[s][a] += 1.0;
        }
        let want: f64 = (0..30)
            .map(|i| {
                let s = data.obs(i, 0)[0] as usize;
                0.2 * sums[s][0] / counts[s][0] + 0.8 * sums[s][1] / counts[s][1]
            })
            .sum::<f64>()
            / 30.0;
        assert!((v - want).abs() < 1e-10);
        let r = b3_individual_homogeneous(&data, &pi, &spec, 0.0).unwrap();
        assert!((r.eta_t[0] - v).abs() < 1e-12);
    }

    #[test]
    fn b4_is_seeded() {
        let data = generate(&EnvSpec::paper_continuous(6, 5, 2)).unwrap();
        let pi = Policy::observation_agnostic(vec![0.2, 0.8]).unwrap();
        let spec = BasisSpec::polynomial(3, 1);
        let a = b4_homogeneous_model_based(&data, &pi, &spec, 0.0, 40, 3).unwrap();
        let b = b4_homogeneous_model_based(&data, &pi, &spec, 0.0, 40, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.eta_it.iter().flatten().all(|x| x.is_finite()));
    }
}
