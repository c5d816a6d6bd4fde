use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{initial_observations, EnvSampler, EnvSpec};
use crate::data::{ObsKind, TrajectorySet};
use crate::error::{Error, Result};
use crate::model_free::{solve_stage, BackwardConfig, QFunctionStage};
use crate::policy::{sample_categorical, Policy};
use crate::rng::stream;
use crate::sieve::StagePanel;

fn n_states(spec: &EnvSpec) -> Result<usize> {
    match spec.obs_kind {
        ObsKind::Tabular { n_states } => Ok(n_states),
        ObsKind::Continuous { .. } => Err(Error::InvalidConfig(format!(
            "exact oracle needs a tabular environment, `{}` is continuous",
            spec.name
        ))),
    }
}

fn policy_table(pi: &Policy, states: usize, n_actions: usize) -> Result<Vec<Vec<f64>>> {
    pi.check_compatible(ObsKind::Tabular { n_states: states }, n_actions)?;
    (0..states).map(|s| pi.probs(&[s as f64])).collect()
}

fn reward_mean(spec: &EnvSpec, i: usize, t: usize, s: usize, a: usize) -> f64 {
    spec.rewards.mean(&spec.weights, i, t, &[s as f64], a)
}

/// Exact `E^π(R_{i,t} | O_{i,1})` by forward propagation of the state
/// distribution from the given initial observations.
pub fn dp_oracle_from(spec: &EnvSpec, pi: &Policy, initial: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let ns = n_states(spec)?;
    let na = spec.n_actions;
    let probs = policy_table(pi, ns, na)?;
    if initial.len() != spec.n_individuals {
        return Err(Error::DimensionMismatch {
            expected: spec.n_individuals,
            got: initial.len(),
        });
    }
    initial
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let mut dist = vec![0.0; ns];
            dist[spec.obs_kind.state_of(o)?] = 1.0;
            let mut row = Vec::with_capacity(spec.n_timepoints);
            for t in 0..spec.n_timepoints {
                let mut value = 0.0;
                let mut next = vec![0.0; ns];
                for s in 0..ns {
                    if dist[s] == 0.0 {
                        continue;
                    }
                    for a in 0..na {
                        let w = dist[s] * probs[s][a];
                        if w == 0.0 {
                            continue;
                        }
                        value += w * reward_mean(spec, i, t, s, a);
                        if t + 1 < spec.n_timepoints {
                            for (s2, p) in spec.transition_probs(i, t, s, a)?.into_iter().enumerate() {
                                next[s2] += w * p;
                            }
                        }
                    }
                }
                row.push(value);
                dist = next;
            }
            Ok(row)
        })
        .collect()
}

/// [`dp_oracle_from`] started at the environment's own initial draws.
pub fn dp_oracle_tabular(spec: &EnvSpec, pi: &Policy) -> Result<Vec<Vec<f64>>> {
    dp_oracle_from(spec, pi, &initial_observations(spec)?)
}

/// `Q_{i,t1,t2}(s, a)`: expected reward at `t2` after taking `a` in state
/// `s` at `t1` and following `π` afterwards, by forward propagation.
/// Returned as `[s][a]`; times are 0-based.
pub fn dp_q_direct(spec: &EnvSpec, pi: &Policy, i: usize, t1: usize, t2: usize) -> Result<Vec<Vec<f64>>> {
    let ns = n_states(spec)?;
    let na = spec.n_actions;
    let probs = policy_table(pi, ns, na)?;
    let mut q = vec![vec![0.0; na]; ns];
    for s0 in 0..ns {
        for a0 in 0..na {
            if t1 == t2 {
                q[s0][a0] = reward_mean(spec, i, t1, s0, a0);
                continue;
            }
            let mut dist = spec.transition_probs(i, t1, s0, a0)?;
            for t in t1 + 1..t2 {
                let mut next = vec![0.0; ns];
                for s in 0..ns {
                    for a in 0..na {
                        let w = dist[s] * probs[s][a];
                        for (s2, p) in spec.transition_probs(i, t, s, a)?.into_iter().enumerate() {
                            next[s2] += w * p;
                        }
                    }
                }
                dist = next;
            }
            q[s0][a0] = (0..ns)
                .map(|s| dist[s] * (0..na).map(|a| probs[s][a] * reward_mean(spec, i, t2, s, a)).sum::<f64>())
                .sum();
        }
    }
    Ok(q)
}

/// Same quantity as [`dp_q_direct`] from the one-step Bellman recursion
/// run backward from `t2`.
pub fn dp_q_recursive(spec: &EnvSpec, pi: &Policy, i: usize, t1: usize, t2: usize) -> Result<Vec<Vec<f64>>> {
    let ns = n_states(spec)?;
    let na = spec.n_actions;
    let probs = policy_table(pi, ns, na)?;
    let mut q: Vec<Vec<f64>> = (0..ns)
        .map(|s| (0..na).map(|a| reward_mean(spec, i, t2, s, a)).collect())
        .collect();
    for t in (t1..t2).rev() {
        let v: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| probs[s][a] * q[s][a]).sum()).collect();
        let mut prev = vec![vec![0.0; na]; ns];
        for (s, row) in prev.iter_mut().enumerate() {
            for (a, cell) in row.iter_mut().enumerate() {
                *cell = spec
                    .transition_probs(i, t, s, a)?
                    .iter()
                    .zip(&v)
                    .map(|(p, x)| p * x)
                    .sum();
            }
        }
        q = prev;
    }
    Ok(q)
}

/// Monte-Carlo value grid with per-cell standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McOracle {
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<f64>>,
    pub n_reps: usize,
}

/// Simulates `n_reps` target-policy trajectories per individual from the
/// given initial observations and averages the sampled rewards.
pub fn mc_oracle_from(
    spec: &EnvSpec,
    pi: &Policy,
    initial: &[Vec<f64>],
    n_reps: usize,
    seed: u64,
) -> Result<McOracle> {
    if n_reps < 2 {
        return Err(Error::InvalidConfig("Monte-Carlo oracle needs at least two replications".into()));
    }
    let sampler = EnvSampler::new(spec)?;
    pi.check_compatible(spec.obs_kind, spec.n_actions)?;
    let (t_len, d) = (spec.n_timepoints, spec.obs_dim());
    let rows: Vec<(Vec<f64>, Vec<f64>)> = initial
        .par_iter()
        .enumerate()
        .map(|(i, o0)| {
            let mut rng = stream(seed, &[i as u64]);
            let mut mean = vec![0.0; t_len];
            let mut m2 = vec![0.0; t_len];
            let mut probs = vec![0.0; spec.n_actions];
            let mut o = o0.clone();
            let mut next = vec![0.0; d];
            for rep in 0..n_reps {
                o.copy_from_slice(o0);
                for t in 0..t_len {
                    pi.probs_into(&o, &mut probs)?;
                    let a = sample_categorical(&probs, &mut rng);
                    let z = sampler.draw_component(&mut rng);
                    let z_reward = if spec.joint_components {
                        z
                    } else {
                        sampler.draw_component(&mut rng)
                    };
                    let r = sampler.reward(z_reward, i, t, &o, a, &mut rng);
                    let delta = r - mean[t];
                    mean[t] += delta / (rep + 1) as f64;
                    m2[t] += delta * (r - mean[t]);
                    if t + 1 < t_len {
                        sampler.next_obs(z, i, t, &o, a, &mut rng, &mut next);
                        o.copy_from_slice(&next);
                    }
                }
            }
            let se = m2
                .iter()
                .map(|v| (v / (n_reps - 1) as f64 / n_reps as f64).sqrt())
                .collect();
            Ok((mean, se))
        })
        .collect::<Result<_>>()?;
    let (mean, se) = rows.into_iter().unzip();
    Ok(McOracle { mean, se, n_reps })
}

/// [`mc_oracle_from`] started at the environment's own initial draws.
pub fn mc_oracle(spec: &EnvSpec, pi: &Policy, n_reps: usize, seed: u64) -> Result<McOracle> {
    mc_oracle_from(spec, pi, &initial_observations(spec)?, n_reps, seed)
}

/// Backward induction on the observed covariates of `data` with the noisy
/// responses replaced by their exact conditional expectations under the
/// environment: rewards by their means and each stage's pseudo-response by
/// its expectation over the true next-state law.
pub fn noiseless_backward(
    spec: &EnvSpec,
    pi: &Policy,
    data: &TrajectorySet,
    cfg: &BackwardConfig,
    n_stages: usize,
) -> Result<Vec<QFunctionStage>> {
    let ns = n_states(spec)?;
    let na = spec.n_actions;
    let probs = policy_table(pi, ns, na)?;
    let (n, t_len) = (data.n_individuals(), data.n_timepoints());
    if n_stages == 0 || n_stages > t_len {
        return Err(Error::IndexOutOfRange(format!("{n_stages} stages for {t_len} time points")));
    }
    let state = |i: usize, s: usize| data.obs(i, s)[0] as usize;
    let responses = DMatrix::from_fn(n, t_len, |i, s| reward_mean(spec, i, s, state(i, s), data.action(i, s)));
    let panel = StagePanel::new(1, responses, data)?;
    let mut stages = vec![QFunctionStage {
        stage: 1,
        fit: solve_stage(&panel, cfg, na)?,
    }];
    for k in 2..=n_stages {
        let prev = &stages.last().expect("stage one present").fit;
        let width = t_len - k + 1;
        let mut responses = DMatrix::zeros(n, width);
        for s in 0..width {
            for i in 0..n {
                let p = spec.transition_probs(i, s, state(i, s), data.action(i, s))?;
                let mut y = 0.0;
                for (s2, ps) in p.iter().enumerate() {
                    let phi = prev.basis.eval(&[s2 as f64])?;
                    let v: f64 = (0..na)
                        .map(|a| probs[s2][a] * prev.main_effect_phi(&phi, a))
                        .sum();
                    y += ps * (prev.offset + prev.theta[i] + prev.lambda[s + 1] + v);
                }
                responses[(i, s)] = y;
            }
        }
        let panel = StagePanel::new(k, responses, data)?;
        stages.push(QFunctionStage {
            stage: k,
            fit: solve_stage(&panel, cfg, na)?,
        });
    }
    Ok(stages)
}
