use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{
    from_rows, weighted_gaussian, weighted_linear_gaussian, GaussianComponent, MixtureTransitionModel,
    TransitionComponents,
};
use crate::data::TrajectorySet;
use crate::envsim::{INDIVIDUAL, MAIN, TIME};
use crate::error::{Error, Result};

/// Responsibility mass below which a parameter group is left unchanged.
const MIN_MASS: f64 = 1e-8;

/// Posterior component probabilities of every transition, indexed by
/// individual and departure time `t` (the arrival is at `t + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    n_individuals: usize,
    n_transitions: usize,
    values: Vec<[f64; 3]>,
}

impl Responsibilities {
    pub fn from_fn(n_individuals: usize, n_transitions: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let values = (0..n_individuals)
            .flat_map(|i| (0..n_transitions).map(move |t| (i, t)))
            .map(|(i, t)| f(i, t))
            .collect();
        Self {
            n_individuals,
            n_transitions,
            values,
        }
    }

    pub fn constant(n_individuals: usize, n_transitions: usize, r: [f64; 3]) -> Self {
        Self::from_fn(n_individuals, n_transitions, |_, _| r)
    }

    pub fn get(&self, i: usize, t: usize) -> [f64; 3] {
        self.values[i * self.n_transitions + t]
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn n_transitions(&self) -> usize {
        self.n_transitions
    }

    /// Largest `|Σ_z r(i,t,z) − 1|` over cells.
    pub fn normalization_error(&self) -> f64 {
        self.values
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

struct GaussianDensity {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    fn new(mean: &[f64], cov: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        let chol = from_rows(cov)
            .cholesky()
            .ok_or_else(|| Error::InvalidConfig("covariance is not positive definite".into()))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            chol_l: l,
            log_norm: -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    fn log_pdf_centered(&self, centered: DVector<f64>) -> f64 {
        let z = self
            .chol_l
            .solve_lower_triangular(&centered)
            .expect("cholesky factor is invertible");
        self.log_norm - 0.5 * z.norm_squared()
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf_centered(DVector::from_column_slice(x) - &self.mean)
    }
}

/// Component densities prepared once per E-step.
enum Prepared<'a> {
    Tabular {
        main: &'a [Vec<Vec<f64>>],
        individual: &'a [Vec<f64>],
        time: &'a [Vec<f64>],
    },
    Gaussian {
        coef: DMatrix<f64>,
        shift: Vec<DVector<f64>>,
        main: GaussianDensity,
        individual: Vec<GaussianDensity>,
        time: Vec<GaussianDensity>,
    },
}

fn prepare(model: &MixtureTransitionModel) -> Result<Prepared<'_>> {
    Ok(match &model.components {
        TransitionComponents::Tabular { main, individual, time } => Prepared::Tabular { main, individual, time },
        TransitionComponents::Gaussian {
            coef,
            action_shift,
            main_cov,
            individual,
            time,
        } => {
            let d = coef.len();
            let dens = |g: &GaussianComponent| GaussianDensity::new(&g.mean, &g.cov);
            Prepared::Gaussian {
                coef: from_rows(coef),
                shift: action_shift.iter().map(|v| DVector::from_column_slice(v)).collect(),
                main: GaussianDensity::new(&vec![0.0; d], main_cov)?,
                individual: individual.iter().map(dens).collect::<Result<_>>()?,
                time: time.iter().map(dens).collect::<Result<_>>()?,
            }
        }
    })
}

fn ln_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `log p_z(O_{i,t+1} | ·)` for the three components.
fn component_log_densities(prep: &Prepared, data: &TrajectorySet, i: usize, t: usize) -> [f64; 3] {
    let o = data.obs(i, t);
    let next = data.obs(i, t + 1);
    let a = data.action(i, t);
    match prep {
        Prepared::Tabular { main, individual, time } => {
            let (s, s2) = (o[0] as usize, next[0] as usize);
            [
                ln_or_neg_inf(main[s][a][s2]),
                ln_or_neg_inf(individual[i][s2]),
                ln_or_neg_inf(time[t + 1][s2]),
            ]
        }
        Prepared::Gaussian {
            coef,
            shift,
            main,
            individual,
            time,
        } => {
            let mu = coef * DVector::from_column_slice(o) + &shift[a];
            [
                main.log_pdf_centered(DVector::from_column_slice(next) - mu),
                individual[i].log_pdf(next),
                time[t + 1].log_pdf(next),
            ]
        }
    }
}

/// Posterior component probabilities of every transition and the observed
/// data log-likelihood `Σ log Σ_z w_z p_z`.
pub fn em_e_step(data: &TrajectorySet, model: &MixtureTransitionModel) -> Result<(Responsibilities, f64)> {
    model.validate(data)?;
    let (n, t_len) = (data.n_individuals(), data.n_timepoints());
    let prep = prepare(model)?;
    let log_w = model.weights.map(ln_or_neg_inf);
    let rows: Vec<(Vec<[f64; 3]>, f64, Vec<(usize, usize)>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut resp = Vec::with_capacity(t_len - 1);
            let mut ll = 0.0;
            let mut degenerate = Vec::new();
            for t in 0..t_len - 1 {
                let dens = component_log_densities(&prep, data, i, t);
                let joint = [log_w[0] + dens[0], log_w[1] + dens[1], log_w[2] + dens[2]];
                let top = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if top == f64::NEG_INFINITY || top.is_nan() {
                    degenerate.push((i + 1, t + 2));
                    resp.push([f64::NAN; 3]);
                    continue;
                }
                let e = joint.map(|x| (x - top).exp());
                let s: f64 = e.iter().sum();
                ll += top + s.ln();
                resp.push(e.map(|x| x / s));
            }
            (resp, ll, degenerate)
        })
        .collect();
    let mut values = Vec::with_capacity(n * (t_len - 1));
    let mut ll = 0.0;
    let mut degenerate = Vec::new();
    for (r, l, d) in rows {
        values.extend(r);
        ll += l;
        degenerate.extend(d);
    }
    if !degenerate.is_empty() {
        return Err(Error::DegenerateDensity(degenerate));
    }
    Ok((
        Responsibilities {
            n_individuals: n,
            n_transitions: t_len - 1,
            values,
        },
        ll,
    ))
}

pub fn log_likelihood(data: &TrajectorySet, model: &MixtureTransitionModel) -> Result<f64> {
    em_e_step(data, model).map(|(_, ll)| ll)
}

/// Weighted maximum-likelihood update. Weights become the mean
/// responsibilities; each component group is refit with its
/// responsibilities as weights, or kept from `prev` when its mass is below
/// `1e-8`.
pub fn em_m_step(
    data: &TrajectorySet,
    resp: &Responsibilities,
    prev: &MixtureTransitionModel,
) -> Result<MixtureTransitionModel> {
    let (n, t_len) = (data.n_individuals(), data.n_timepoints());
    if resp.n_individuals != n || resp.n_transitions + 1 != t_len {
        return Err(Error::DimensionMismatch {
            expected: n * (t_len - 1),
            got: resp.values.len(),
        });
    }
    let cells = (n * (t_len - 1)) as f64;
    let mut weights = [0.0; 3];
    for r in &resp.values {
        for z in 0..3 {
            weights[z] += r[z];
        }
    }
    let weights = weights.map(|w| w / cells);
    let mut kept = Vec::new();
    let components = match &prev.components {
        TransitionComponents::Tabular { main, individual, time } => {
            let ns = main.len();
            let na = prev.n_actions;
            let mut c_main = vec![vec![vec![0.0; ns]; na]; ns];
            let mut c_ind = vec![vec![0.0; ns]; n];
            let mut c_time = vec![vec![0.0; ns]; t_len];
            for i in 0..n {
                for t in 0..t_len - 1 {
                    let r = resp.get(i, t);
                    let s = data.obs(i, t)[0] as usize;
                    let s2 = data.obs(i, t + 1)[0] as usize;
                    c_main[s][data.action(i, t)][s2] += r[MAIN];
                    c_ind[i][s2] += r[INDIVIDUAL];
                    c_time[t + 1][s2] += r[TIME];
                }
            }
            let mut refit = |counts: &Vec<f64>, old: &Vec<f64>, label: String| {
                let mass: f64 = counts.iter().sum();
                if mass < MIN_MASS {
                    kept.push(label);
                    old.clone()
                } else {
                    counts.iter().map(|c| c / mass).collect()
                }
            };
            let main_new: Vec<Vec<Vec<f64>>> = (0..ns)
                .map(|s| {
                    (0..na)
                        .map(|a| refit(&c_main[s][a], &main[s][a], format!("main ({s}, {a})")))
                        .collect()
                })
                .collect();
            let ind_new: Vec<Vec<f64>> = (0..n)
                .map(|i| refit(&c_ind[i], &individual[i], format!("individual {}", i + 1)))
                .collect();
            let mut time_new = vec![time[0].clone()];
            time_new.extend((1..t_len).map(|t| refit(&c_time[t], &time[t], format!("time {}", t + 1))));
            TransitionComponents::Tabular {
                main: main_new,
                individual: ind_new,
                time: time_new,
            }
        }
        TransitionComponents::Gaussian {
            coef,
            action_shift,
            main_cov,
            individual,
            time,
        } => {
            let main_mass: f64 = resp.values.iter().map(|r| r[MAIN]).sum();
            let (coef, action_shift, main_cov) = if main_mass < MIN_MASS {
                kept.push("main".to_string());
                (coef.clone(), action_shift.clone(), main_cov.clone())
            } else {
                weighted_linear_gaussian(data, |i, t| resp.get(i, t)[MAIN])
            };
            let mut refit = |cells: Vec<(usize, usize)>, z: usize, old: &GaussianComponent, label: String| {
                let w: Vec<f64> = cells.iter().map(|&(i, t)| resp.get(i, t)[z]).collect();
                if w.iter().sum::<f64>() < MIN_MASS {
                    kept.push(label);
                    return old.clone();
                }
                let pts: Vec<&[f64]> = cells.iter().map(|&(i, t)| data.obs(i, t + 1)).collect();
                weighted_gaussian(&pts, &w)
            };
            let ind_new: Vec<GaussianComponent> = (0..n)
                .map(|i| {
                    refit(
                        (0..t_len - 1).map(|t| (i, t)).collect(),
                        INDIVIDUAL,
                        &individual[i],
                        format!("individual {}", i + 1),
                    )
                })
                .collect();
            let mut time_new = vec![time[0].clone()];
            time_new.extend((1..t_len).map(|t| {
                refit(
                    (0..n).map(|i| (i, t - 1)).collect(),
                    TIME,
                    &time[t],
                    format!("time {}", t + 1),
                )
            }));
            TransitionComponents::Gaussian {
                coef,
                action_shift,
                main_cov,
                individual: ind_new,
                time: time_new,
            }
        }
    };
    Ok(MixtureTransitionModel {
        obs_kind: prev.obs_kind,
        n_actions: prev.n_actions,
        weights,
        components,
        basis_digest: prev.basis_digest.clone(),
        kept_previous: kept,
    })
}

/// Converged EM result.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: MixtureTransitionModel,
    /// Log-likelihood of the initial model followed by one entry per cycle.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Alternates E and M steps until the log-likelihood gains less than
/// `tol` in a cycle.
pub fn em_fit(data: &TrajectorySet, init: &MixtureTransitionModel, tol: f64, max_iter: usize) -> Result<EmFit> {
    let (mut resp, ll0) = em_e_step(data, init)?;
    let mut trace = vec![ll0];
    let mut model = init.clone();
    for iter in 1..=max_iter {
        model = em_m_step(data, &resp, &model)?;
        let (r, ll) = em_e_step(data, &model)?;
        resp = r;
        let gain = ll - trace[trace.len() - 1];
        trace.push(ll);
        if gain < tol {
            return Ok(EmFit {
                model,
                trace,
                iterations: iter,
            });
        }
    }
    Err(Error::EmNonConvergence {
        max_iter,
        trace,
        last: Box::new(model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObsKind;
    use crate::envsim::{generate, EnvSpec};

    #[test]
    fn single_component_gets_all_mass() {
        let data = generate(&EnvSpec::paper_continuous(4, 5, 3)).unwrap();
        let m = MixtureTransitionModel::initialize(&data).unwrap().with_weights([1.0, 0.0, 0.0]);
        let (r, _) = em_e_step(&data, &m).unwrap();
        for i in 0..4 {
            for t in 0..4 {
                assert_eq!(r.get(i, t), [1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn identical_components_split_by_weight() {
        let data = generate(&EnvSpec::paper_tabular(3, 4, 3)).unwrap();
        let flat = vec![0.5, 0.5];
        let m = MixtureTransitionModel {
            obs_kind: ObsKind::Tabular { n_states: 2 },
            n_actions: 2,
            weights: [0.5, 0.5, 0.0],
            components: TransitionComponents::Tabular {
                main: vec![vec![flat.clone(); 2]; 2],
                individual: vec![flat.clone(); 3],
                time: vec![flat.clone(); 4],
            },
            basis_digest: None,
            kept_previous: vec![],
        };
        let (r, ll) = em_e_step(&data, &m).unwrap();
        assert!(r.values.iter().all(|x| *x == [0.5, 0.5, 0.0]));
        assert!((ll - 9.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_responsibilities_give_equal_weights() {
        let data = generate(&EnvSpec::paper_tabular(3, 4, 3)).unwrap();
        let init = MixtureTransitionModel::initialize(&data).unwrap();
        let resp = Responsibilities::constant(3, 3, [1.0 / 3.0; 3]);
        let m = em_m_step(&data, &resp, &init).unwrap();
        assert_eq!(m.weights, [1.0 / 3.0; 3]);
    }

    #[test]
    fn zero_mass_groups_are_kept() {
        let data = generate(&EnvSpec::paper_tabular(3, 4, 3)).unwrap();
        let init = MixtureTransitionModel::initialize(&data).unwrap();
        let resp = Responsibilities::constant(3, 3, [1.0, 0.0, 0.0]);
        let m = em_m_step(&data, &resp, &init).unwrap();
        assert!(m.kept_previous.iter().any(|k| k == "individual 1"));
        if let (TransitionComponents::Tabular { individual: a, .. }, TransitionComponents::Tabular { individual: b, .. }) =
            (&m.components, &init.components)
        {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn one_cycle_gives_two_trace_entries() {
        let data = generate(&EnvSpec::paper_tabular(5, 6, 3)).unwrap();
        let init = MixtureTransitionModel::initialize(&data).unwrap();
        match em_fit(&data, &init, 1e-300, 1) {
            Err(Error::EmNonConvergence { trace, .. }) => assert_eq!(trace.len(), 2),
            Ok(fit) => assert_eq!(fit.trace.len(), 2),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn impossible_transition_is_degenerate() {
        let data = generate(&EnvSpec::paper_tabular(3, 4, 3)).unwrap();
        let m = MixtureTransitionModel {
            obs_kind: ObsKind::Tabular { n_states: 2 },
            n_actions: 2,
            weights: [1.0, 0.0, 0.0],
            components: TransitionComponents::Tabular {
                main: vec![vec![vec![1.0, 0.0]; 2]; 2],
                individual: vec![vec![1.0, 0.0]; 3],
                time: vec![vec![1.0, 0.0]; 4],
            },
            basis_digest: None,
            kept_previous: vec![],
        };
        let any_one = (0..3).any(|i| (1..4).any(|t| data.obs(i, t)[0] == 1.0));
        assert_eq!(any_one, matches!(em_e_step(&data, &m), Err(Error::DegenerateDensity(_))));
    }
}
