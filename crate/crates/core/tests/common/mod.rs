//! Helpers shared by the integration tests: random panels and dense
//! reference computations that do not go through the library's solvers.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use panel_ope::rng::Rng;
use panel_ope::{BasisSpec, ObsKind, TrajectorySet};
use rand::{Rng as _, SeedableRng};

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Random continuous panel with uniform observations on `[-1, 1]`,
/// uniform actions and standard-normal-ish rewards.
pub fn random_continuous(rng: &mut Rng, n: usize, t: usize, n_actions: usize) -> TrajectorySet {
    let cells = n * t;
    let obs = (0..cells).map(|_| rng.random_range(-1.0..1.0)).collect();
    let actions = (0..cells).map(|_| rng.random_range(0..n_actions)).collect();
    let rewards = (0..cells).map(|_| rng.random_range(-2.0..2.0)).collect();
    TrajectorySet::new(n, t, n_actions, ObsKind::Continuous { dim: 1 }, obs, actions, rewards).unwrap()
}

pub fn random_tabular(rng: &mut Rng, n: usize, t: usize, n_states: usize, n_actions: usize) -> TrajectorySet {
    let cells = n * t;
    let obs = (0..cells).map(|_| rng.random_range(0..n_states) as f64).collect();
    let actions = (0..cells).map(|_| rng.random_range(0..n_actions)).collect();
    let rewards = (0..cells).map(|_| rng.random_range(-2.0..2.0)).collect();
    TrajectorySet::new(n, t, n_actions, ObsKind::Tabular { n_states }, obs, actions, rewards).unwrap()
}

/// Every action block has at least `min` cells.
pub fn actions_cover(data: &TrajectorySet, min: usize) -> bool {
    let mut counts = vec![0; data.n_actions()];
    for a in data.actions() {
        counts[*a] += 1;
    }
    counts.iter().all(|&c| c >= min)
}

/// Fixed-effects dummies `(individual one-hots, time one-hots)` with rows
/// ordered time-major, individuals within time.
pub fn fixed_effect_dummies(n: usize, t: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n * t, n + t);
    for s in 0..t {
        for i in 0..n {
            b[(s * n + i, i)] = 1.0;
            b[(s * n + i, n + s)] = 1.0;
        }
    }
    b
}

pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().pseudo_inverse(1e-12).unwrap()
}

/// Interaction design built cell by cell from basis evaluations.
pub fn reference_design(data: &TrajectorySet, width: usize, spec: &BasisSpec) -> DMatrix<f64> {
    let (n, na, l) = (data.n_individuals(), data.n_actions(), spec.len());
    let mut x = DMatrix::zeros(n * width, na * l);
    for s in 0..width {
        for i in 0..n {
            let phi = spec.eval(data.obs(i, s)).unwrap();
            let a = data.action(i, s);
            for j in 0..l {
                x[(s * n + i, a * l + j)] = phi[j];
            }
        }
    }
    x
}

/// Unit vector along the constant direction of a blocked coefficient
/// vector: the basis' constant coefficients repeated per action.
pub fn constant_direction(spec: &BasisSpec, n_actions: usize) -> DVector<f64> {
    let c = spec.constant_coefficients();
    let v = DVector::from_iterator(c.len() * n_actions, (0..n_actions).flat_map(|_| c.clone()));
    v.normalize()
}

pub fn project_off(v: &DVector<f64>, dir: &DVector<f64>) -> DVector<f64> {
    v - dir * dir.dot(v)
}

/// Slope block of the joint dummy-plus-sieve regression, orthogonal to the
/// constant direction. The first individual and first time dummy are
/// dropped so the design has full column rank; solved by QR.
pub fn joint_ols_beta(data: &TrajectorySet, spec: &BasisSpec) -> DVector<f64> {
    let (n, t, na) = (data.n_individuals(), data.n_timepoints(), data.n_actions());
    let p = na * spec.len();
    let mut x = DMatrix::zeros(n * t, n + t + p);
    x.columns_mut(0, n + t).copy_from(&fixed_effect_dummies(n, t));
    x.columns_mut(n + t, p).copy_from(&reference_design(data, t, spec));
    let qr = x.remove_columns_at(&[0, n]).qr();
    let y = DVector::from_fn(n * t, |row, _| data.reward(row % n, row / n));
    let rhs = qr.q().transpose() * y;
    let coef = qr.r().solve_upper_triangular(&rhs).unwrap();
    project_off(&coef.rows(n + t - 2, p).into_owned(), &constant_direction(spec, na))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std_error(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
