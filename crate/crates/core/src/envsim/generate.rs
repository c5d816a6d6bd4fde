use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{EnvSpec, InitialLaw, TransitionSpec, INDIVIDUAL, MAIN};
use crate::data::TrajectorySet;
use crate::error::Result;
use crate::policy::{sample_categorical, Policy};
use crate::rng::{stream, Rng};

/// Component labels drawn while generating, indexed `[i][t]`. Only tests
/// look at these; estimators never see them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentLabels {
    /// Component of the move from `t` to `t + 1`, `N × (T − 1)`.
    pub transition: Vec<Vec<usize>>,
    /// Component of the reward at `t`, `N × T`.
    pub reward: Vec<Vec<usize>>,
}

/// Symmetric square root `V·sqrt(D)` of a covariance, tolerant of
/// singular (even zero) covariances.
fn cov_factor(cov: &[Vec<f64>]) -> DMatrix<f64> {
    let d = cov.len();
    let m = DMatrix::from_fn(d, d, |r, c| 0.5 * (cov[r][c] + cov[c][r]));
    let eig = m.symmetric_eigen();
    let roots = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

struct GaussianFactors {
    main: DMatrix<f64>,
    individual: Vec<DMatrix<f64>>,
    time: Vec<DMatrix<f64>>,
}

/// Draws initial observations, component labels, transitions and rewards of
/// an environment.
pub struct EnvSampler<'a> {
    spec: &'a EnvSpec,
    behavior: Policy,
    factors: Option<GaussianFactors>,
}

impl<'a> EnvSampler<'a> {
    pub fn new(spec: &'a EnvSpec) -> Result<Self> {
        spec.validate()?;
        let factors = match &spec.transitions {
            TransitionSpec::Gaussian {
                main_cov,
                individual,
                time,
                ..
            } => Some(GaussianFactors {
                main: cov_factor(main_cov),
                individual: individual.iter().map(|g| cov_factor(&g.cov)).collect(),
                time: time.iter().map(|g| cov_factor(&g.cov)).collect(),
            }),
            TransitionSpec::Tabular { .. } => None,
        };
        Ok(Self {
            spec,
            behavior: spec.behavior.build()?,
            factors,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        self.spec
    }

    pub fn behavior(&self) -> &Policy {
        &self.behavior
    }

    pub fn draw_component(&self, rng: &mut Rng) -> usize {
        sample_categorical(&self.spec.weights, rng)
    }

    pub fn initial(&self, rng: &mut Rng, out: &mut [f64]) {
        match (self.spec.initial, self.spec.obs_kind) {
            (InitialLaw::UniformStates, crate::data::ObsKind::Tabular { n_states }) => {
                out[0] = rng.random_range(0..n_states) as f64;
            }
            _ => {
                for x in out.iter_mut() {
                    *x = rng.sample(StandardNormal);
                }
            }
        }
    }

    /// Next observation from component `z`, moving from time `t`.
    #[allow(clippy::too_many_arguments)]
    pub fn next_obs(&self, z: usize, i: usize, t: usize, o: &[f64], a: usize, rng: &mut Rng, out: &mut [f64]) {
        match &self.spec.transitions {
            TransitionSpec::Tabular { main, individual, time } => {
                let row = match z {
                    MAIN => &main[o[0] as usize][a],
                    INDIVIDUAL => &individual[i],
                    _ => &time[t],
                };
                out[0] = sample_categorical(row, rng) as f64;
            }
            TransitionSpec::Gaussian {
                coef,
                action_shift,
                individual,
                time,
                ..
            } => {
                let f = self.factors.as_ref().expect("gaussian factors built");
                let d = out.len();
                let (mean, factor): (Vec<f64>, &DMatrix<f64>) = match z {
                    MAIN => (
                        (0..d)
                            .map(|r| coef[r].iter().zip(o).map(|(c, x)| c * x).sum::<f64>() + action_shift[a][r])
                            .collect(),
                        &f.main,
                    ),
                    INDIVIDUAL => (individual[i].mean.clone(), &f.individual[i]),
                    _ => (time[t].mean.clone(), &f.time[t]),
                };
                let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let shock = factor * xi;
                for r in 0..d {
                    out[r] = mean[r] + shock[r];
                }
            }
        }
    }

    pub fn reward(&self, z: usize, i: usize, t: usize, o: &[f64], a: usize, rng: &mut Rng) -> f64 {
        let r = &self.spec.rewards;
        let noise: f64 = rng.sample(StandardNormal);
        r.component_mean(z, i, t, o, a) + r.sd[z] * noise
    }
}

struct Trajectory {
    obs: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    transition_z: Vec<usize>,
    reward_z: Vec<usize>,
}

fn generate_individual(sampler: &EnvSampler, i: usize) -> Result<Trajectory> {
    let spec = sampler.spec;
    let (t_len, d, na) = (spec.n_timepoints, spec.obs_dim(), spec.n_actions);
    let mut rng = stream(spec.seed, &[i as u64]);
    let mut tr = Trajectory {
        obs: vec![0.0; t_len * d],
        actions: Vec::with_capacity(t_len),
        rewards: Vec::with_capacity(t_len),
        transition_z: Vec::with_capacity(t_len.saturating_sub(1)),
        reward_z: Vec::with_capacity(t_len),
    };
    sampler.initial(&mut rng, &mut tr.obs[..d]);
    let mut probs = vec![0.0; na];
    let mut next = vec![0.0; d];
    for t in 0..t_len {
        let o = &tr.obs[t * d..(t + 1) * d];
        sampler.behavior.probs_into(o, &mut probs)?;
        let a = sample_categorical(&probs, &mut rng);
        let z_move = sampler.draw_component(&mut rng);
        let z_reward = if spec.joint_components {
            z_move
        } else {
            sampler.draw_component(&mut rng)
        };
        let r = sampler.reward(z_reward, i, t, o, a, &mut rng);
        if t + 1 < t_len {
            sampler.next_obs(z_move, i, t, o, a, &mut rng, &mut next);
            tr.transition_z.push(z_move);
        }
        tr.actions.push(a);
        tr.rewards.push(r);
        tr.reward_z.push(z_reward);
        if t + 1 < t_len {
            tr.obs[(t + 1) * d..(t + 2) * d].copy_from_slice(&next);
        }
    }
    Ok(tr)
}

/// Generates a panel together with the drawn component labels.
pub fn generate_labeled(spec: &EnvSpec) -> Result<(TrajectorySet, LatentLabels)> {
    let sampler = EnvSampler::new(spec)?;
    let trajectories: Vec<Trajectory> = (0..spec.n_individuals)
        .into_par_iter()
        .map(|i| generate_individual(&sampler, i))
        .collect::<Result<_>>()?;
    let mut obs = Vec::with_capacity(spec.n_individuals * spec.n_timepoints * spec.obs_dim());
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut labels = LatentLabels {
        transition: Vec::new(),
        reward: Vec::new(),
    };
    for tr in trajectories {
        obs.extend(tr.obs);
        actions.extend(tr.actions);
        rewards.extend(tr.rewards);
        labels.transition.push(tr.transition_z);
        labels.reward.push(tr.reward_z);
    }
    let data = TrajectorySet::new(
        spec.n_individuals,
        spec.n_timepoints,
        spec.n_actions,
        spec.obs_kind,
        obs,
        actions,
        rewards,
    )?;
    Ok((data, labels))
}

pub fn generate(spec: &EnvSpec) -> Result<TrajectorySet> {
    generate_labeled(spec).map(|(d, _)| d)
}

/// The first observation of every individual, identical to the one
/// [`generate`] draws, without generating the rest of the panel.
pub fn initial_observations(spec: &EnvSpec) -> Result<Vec<Vec<f64>>> {
    let sampler = EnvSampler::new(spec)?;
    Ok((0..spec.n_individuals)
        .map(|i| {
            let mut rng = stream(spec.seed, &[i as u64]);
            let mut o = vec![0.0; spec.obs_dim()];
            sampler.initial(&mut rng, &mut o);
            o
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::TIME;

    #[test]
    fn generation_is_seeded() {
        let spec = EnvSpec::paper_tabular(6, 5, 42);
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert_ne!(a, generate(&spec.clone().with_seed(43)).unwrap());
        let init = initial_observations(&spec).unwrap();
        for (i, o) in init.iter().enumerate() {
            assert_eq!(o.as_slice(), a.obs(i, 0));
        }
    }

    #[test]
    fn labels_have_panel_shape() {
        let spec = EnvSpec::paper_continuous(4, 6, 1);
        let (_, labels) = generate_labeled(&spec).unwrap();
        assert_eq!(labels.transition.len(), 4);
        assert!(labels.transition.iter().all(|r| r.len() == 5));
        assert!(labels.reward.iter().all(|r| r.len() == 6));
        assert!(labels.transition.iter().flatten().all(|z| *z <= TIME));
    }

    #[test]
    fn joint_components_share_labels() {
        let mut spec = EnvSpec::paper_tabular(3, 6, 2);
        spec.joint_components = true;
        let (_, labels) = generate_labeled(&spec).unwrap();
        for i in 0..3 {
            assert_eq!(labels.transition[i][..], labels.reward[i][..5]);
        }
    }

    #[test]
    fn zero_covariance_is_deterministic() {
        let f = cov_factor(&[vec![0.0]]);
        assert_eq!(f[(0, 0)], 0.0);
    }
}
