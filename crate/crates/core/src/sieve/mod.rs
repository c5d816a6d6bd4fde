//! Two-way fixed-effects sieve regression on a balanced panel.
//!
//! A stage panel holds an `N × width` response matrix and the observation and
//! action of each cell. The regression model is
//! `y[i][s] = offset + theta[i] + lambda[s] + phi(o[i][s])ᵀ beta[a[i][s]]`
//! with both effect vectors summing to zero.
//!
//! Every supported basis reproduces constants, so the constant direction of
//! `beta` (`constant_coefficients` repeated in each action block) is aliased
//! with the fixed effects and is pinned to zero; that part of the fit lives in
//! `offset` instead.

mod basis;

pub use basis::{eval_basis, BasisSpec};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TrajectorySet;
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, sym_condition_ratio, SINGULAR_RTOL};

/// Normalization of the effect vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum EffectConstraint {
    #[default]
    SumZero,
}

/// Responses of one backward-induction stage together with the covariates of
/// each cell. Column `s` of the panel is start time `s` (0-based).
#[derive(Debug, Clone)]
pub struct StagePanel<'a> {
    stage: usize,
    responses: DMatrix<f64>,
    data: &'a TrajectorySet,
}

impl<'a> StagePanel<'a> {
    /// `responses` is `N × width`; covariates are read from the first `width`
    /// time points of `data`.
    pub fn new(stage: usize, responses: DMatrix<f64>, data: &'a TrajectorySet) -> Result<Self> {
        if responses.nrows() != data.n_individuals() {
            return Err(Error::DimensionMismatch {
                expected: data.n_individuals(),
                got: responses.nrows(),
            });
        }
        if responses.ncols() == 0 || responses.ncols() > data.n_timepoints() {
            return Err(Error::InvalidConfig(format!(
                "stage panel width {} outside 1..={}",
                responses.ncols(),
                data.n_timepoints()
            )));
        }
        Ok(Self {
            stage,
            responses,
            data,
        })
    }

    /// Stage one: the observed rewards.
    pub fn rewards(data: &'a TrajectorySet) -> Self {
        let (n, t) = (data.n_individuals(), data.n_timepoints());
        let responses = DMatrix::from_fn(n, t, |i, s| data.reward(i, s));
        Self {
            stage: 1,
            responses,
            data,
        }
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn n(&self) -> usize {
        self.responses.nrows()
    }

    pub fn width(&self) -> usize {
        self.responses.ncols()
    }

    pub fn responses(&self) -> &DMatrix<f64> {
        &self.responses
    }

    pub fn obs(&self, i: usize, s: usize) -> &[f64] {
        self.data.obs(i, s)
    }

    pub fn action(&self, i: usize, s: usize) -> usize {
        self.data.action(i, s)
    }
}

/// Interaction design with `N·width` rows (row `s·N + i`) and
/// `n_actions·L` columns; each row carries the basis vector in the block of
/// the observed action.
pub fn build_design(panel: &StagePanel, spec: &BasisSpec, n_actions: usize) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let (n, w, l) = (panel.n(), panel.width(), spec.len());
    let mut phi = DMatrix::zeros(n * w, n_actions * l);
    let mut buf = vec![0.0; l];
    for s in 0..w {
        for i in 0..n {
            let a = panel.action(i, s);
            if a >= n_actions {
                return Err(Error::IndexOutOfRange(format!("action {a} at ({}, {})", i + 1, s + 1)));
            }
            spec.eval_into(panel.obs(i, s), &mut buf)?;
            let row = s * n + i;
            for (j, v) in buf.iter().enumerate() {
                phi[(row, a * l + j)] = *v;
            }
        }
    }
    Ok(phi)
}

/// Balanced-panel within transformation:
/// `x[i][t] − rowmean[i] − colmean[t] + grandmean`.
pub fn two_way_demean(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = x.shape();
    if n == 0 || t == 0 {
        return x.clone();
    }
    let rows: Vec<f64> = (0..n).map(|i| x.row(i).sum() / t as f64).collect();
    let cols: Vec<f64> = (0..t).map(|s| x.column(s).sum() / n as f64).collect();
    let grand = rows.iter().sum::<f64>() / n as f64;
    DMatrix::from_fn(n, t, |i, s| x[(i, s)] - rows[i] - cols[s] + grand)
}

/// Fitted two-way model for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoWayFit {
    /// Sieve coefficients, `n_actions` consecutive blocks of length `L`.
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub offset: f64,
    pub basis: BasisSpec,
    pub n_actions: usize,
    pub constraint: EffectConstraint,
}

impl TwoWayFit {
    pub fn basis_len(&self) -> usize {
        self.basis.len()
    }

    /// `phi(o)ᵀ beta_a` for a precomputed basis vector.
    pub fn main_effect_phi(&self, phi: &[f64], a: usize) -> f64 {
        let l = phi.len();
        self.beta[a * l..(a + 1) * l].iter().zip(phi).map(|(b, p)| b * p).sum()
    }

    pub fn main_effect(&self, o: &[f64], a: usize) -> Result<f64> {
        if a >= self.n_actions {
            return Err(Error::IndexOutOfRange(format!("action {a}")));
        }
        Ok(self.main_effect_phi(&self.basis.eval(o)?, a))
    }

    /// Fitted value at individual `i` and panel column `s` (both 0-based).
    pub fn predict(&self, i: usize, s: usize, o: &[f64], a: usize) -> Result<f64> {
        let theta = self
            .theta
            .get(i)
            .ok_or_else(|| Error::IndexOutOfRange(format!("individual {}", i + 1)))?;
        let lambda = self
            .lambda
            .get(s)
            .ok_or_else(|| Error::IndexOutOfRange(format!("column {}", s + 1)))?;
        Ok(self.offset + theta + lambda + self.main_effect(o, a)?)
    }

    /// `(|Σ theta|, |Σ lambda|)`.
    pub fn sum_zero_residual(&self) -> (f64, f64) {
        (self.theta.iter().sum::<f64>().abs(), self.lambda.iter().sum::<f64>().abs())
    }

    pub fn is_finite(&self) -> bool {
        self.beta
            .iter()
            .chain(&self.theta)
            .chain(&self.lambda)
            .all(|x| x.is_finite())
            && self.offset.is_finite()
    }
}

/// Precomputed pieces shared by both solvers.
struct Projected {
    phi: DMatrix<f64>,
    gram: DMatrix<f64>,
    /// Unit vector along the constant direction of `beta`.
    null_dir: DVector<f64>,
}

impl Projected {
    fn new(panel: &StagePanel, spec: &BasisSpec, n_actions: usize) -> Result<Self> {
        let phi = build_design(panel, spec, n_actions)?;
        let (n, w) = (panel.n(), panel.width());
        let mut sphi = phi.clone();
        for mut col in sphi.column_iter_mut() {
            let m = DMatrix::from_column_slice(n, w, col.as_slice());
            col.copy_from_slice(two_way_demean(&m).as_slice());
        }
        let gram = sphi.transpose() * &sphi;
        let c = spec.constant_coefficients();
        let mut null_dir = DVector::from_iterator(
            n_actions * c.len(),
            (0..n_actions).flat_map(|_| c.iter().copied()),
        );
        null_dir.normalize_mut();
        Ok(Self { phi, gram, null_dir })
    }

    /// System matrix: the Gram matrix plus the ridge, or, without a ridge,
    /// the Gram matrix with its structural null direction filled in.
    fn system(&self, ridge: f64) -> Result<DMatrix<f64>> {
        let p = self.gram.nrows();
        if ridge > 0.0 {
            return Ok(&self.gram + DMatrix::identity(p, p) * ridge);
        }
        let scale = self.gram.trace() / p as f64;
        let m = &self.gram + &self.null_dir * self.null_dir.transpose() * scale;
        let ratio = sym_condition_ratio(&m);
        if !(ratio >= SINGULAR_RTOL) {
            return Err(Error::SingularDesign { ratio });
        }
        Ok(m)
    }

    fn remove_null(&self, beta: &mut DVector<f64>) {
        let c = self.null_dir.dot(beta);
        beta.axpy(-c, &self.null_dir, 1.0);
    }
}

/// Offset and SumZero effects of the residual matrix `y − main`.
fn effects(resid: &DMatrix<f64>) -> (f64, Vec<f64>, Vec<f64>) {
    let (n, w) = resid.shape();
    let rows: Vec<f64> = (0..n).map(|i| resid.row(i).sum() / w as f64).collect();
    let cols: Vec<f64> = (0..w).map(|s| resid.column(s).sum() / n as f64).collect();
    let grand = rows.iter().sum::<f64>() / n as f64;
    (
        grand,
        rows.iter().map(|r| r - grand).collect(),
        cols.iter().map(|c| c - grand).collect(),
    )
}

fn residual_matrix(panel: &StagePanel, phi: &DMatrix<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    let fitted = phi * beta;
    let (n, w) = (panel.n(), panel.width());
    DMatrix::from_fn(n, w, |i, s| panel.responses[(i, s)] - fitted[s * n + i])
}

fn assemble(spec: &BasisSpec, n_actions: usize, beta: &DVector<f64>, eff: (f64, Vec<f64>, Vec<f64>)) -> TwoWayFit {
    TwoWayFit {
        beta: beta.iter().copied().collect(),
        theta: eff.1,
        lambda: eff.2,
        offset: eff.0,
        basis: spec.clone(),
        n_actions,
        constraint: EffectConstraint::SumZero,
    }
}

/// Closed-form partialled-out least squares:
/// `beta = (ΦᵀSΦ + ridge·I)⁻¹ ΦᵀS y`, effects from the residual means.
pub fn fwl_solve(panel: &StagePanel, spec: &BasisSpec, n_actions: usize, ridge: f64) -> Result<TwoWayFit> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be nonnegative, got {ridge}")));
    }
    let proj = Projected::new(panel, spec, n_actions)?;
    let sy = two_way_demean(&panel.responses);
    let rhs = proj.phi.transpose() * DVector::from_column_slice(sy.as_slice());
    let m = proj.system(ridge)?;
    let mut beta = solve_spd(&m, &rhs);
    proj.remove_null(&mut beta);
    let resid = residual_matrix(panel, &proj.phi, &beta);
    Ok(assemble(spec, n_actions, &beta, effects(&resid)))
}

/// Outcome of the alternating solver.
#[derive(Debug, Clone)]
pub struct ProfileFit {
    pub fit: TwoWayFit,
    pub iterations: usize,
}

/// Alternating least squares between the sieve coefficients and the fixed
/// effects, starting from zero effects.
///
/// Each sweep corrects `beta` by the projected regression of the current
/// full residual, then refits the effects to `y − Φ beta`. The correction
/// form converges in two sweeps on an exact system; regressing
/// `y − effects` directly onto Φ does not contract because Φ and the
/// effects share the constant direction.
pub fn profile_solve(
    panel: &StagePanel,
    spec: &BasisSpec,
    n_actions: usize,
    tol: f64,
    max_iter: usize,
) -> Result<ProfileFit> {
    profile_solve_with_ridge(panel, spec, n_actions, tol, max_iter, 0.0)
}

pub fn profile_solve_with_ridge(
    panel: &StagePanel,
    spec: &BasisSpec,
    n_actions: usize,
    tol: f64,
    max_iter: usize,
    ridge: f64,
) -> Result<ProfileFit> {
    if !(ridge >= 0.0) || !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("need ridge >= 0 and tol > 0, got {ridge}, {tol}")));
    }
    let (n, w) = (panel.n(), panel.width());
    let proj = Projected::new(panel, spec, n_actions)?;
    let p = proj.gram.nrows();
    let mut beta = DVector::zeros(p);
    let mut offset = 0.0;
    let mut theta = vec![0.0; n];
    let mut lambda = vec![0.0; w];
    let current = |beta: &DVector<f64>, offset: f64, theta: &[f64], lambda: &[f64]| {
        assemble(spec, n_actions, beta, (offset, theta.to_vec(), lambda.to_vec()))
    };
    if max_iter == 0 {
        return Err(Error::ProfileNonConvergence {
            max_iter,
            last: Box::new(current(&beta, offset, &theta, &lambda)),
        });
    }
    let m = proj.system(ridge)?;
    let chol = m.clone().cholesky();
    for iter in 1..=max_iter {
        let fitted = &proj.phi * &beta;
        let full_resid = DVector::from_fn(n * w, |row, _| {
            let (s, i) = (row / n, row % n);
            panel.responses[(i, s)] - offset - theta[i] - lambda[s] - fitted[row]
        });
        let rhs = proj.phi.transpose() * full_resid;
        let step = match &chol {
            Some(c) => c.solve(&rhs),
            None => solve_spd(&m, &rhs),
        };
        let mut new_beta = &beta + step;
        proj.remove_null(&mut new_beta);
        let (new_offset, new_theta, new_lambda) = effects(&residual_matrix(panel, &proj.phi, &new_beta));
        let change = new_beta
            .iter()
            .zip(beta.iter())
            .chain(new_theta.iter().zip(&theta))
            .chain(new_lambda.iter().zip(&lambda))
            .chain(std::iter::once((&new_offset, &offset)))
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        beta = new_beta;
        offset = new_offset;
        theta = new_theta;
        lambda = new_lambda;
        if change < tol {
            return Ok(ProfileFit {
                fit: current(&beta, offset, &theta, &lambda),
                iterations: iter,
            });
        }
    }
    Err(Error::ProfileNonConvergence {
        max_iter,
        last: Box::new(current(&beta, offset, &theta, &lambda)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ObsKind, TrajectorySet};

    fn tabular(n: usize, t: usize, obs: Vec<f64>, actions: Vec<usize>) -> TrajectorySet {
        TrajectorySet::new(n, t, 2, ObsKind::Tabular { n_states: 2 }, obs, actions, vec![0.0; n * t]).unwrap()
    }

    #[test]
    fn single_cell_design_row() {
        let data = tabular(1, 1, vec![0.0], vec![1]);
        let panel = StagePanel::new(1, DMatrix::zeros(1, 1), &data).unwrap();
        let phi = build_design(&panel, &BasisSpec::indicator(2), 2).unwrap();
        assert_eq!(phi.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn rows_stack_individuals_within_time() {
        let data = tabular(2, 1, vec![0.0, 1.0], vec![0, 0]);
        let panel = StagePanel::new(1, DMatrix::zeros(2, 1), &data).unwrap();
        let phi = build_design(&panel, &BasisSpec::indicator(2), 2).unwrap();
        assert_eq!(phi[(0, 0)], 1.0);
        assert_eq!(phi[(1, 1)], 1.0);
    }

    #[test]
    fn demean_kills_constants() {
        let x = DMatrix::from_element(3, 4, 2.5);
        assert!(two_way_demean(&x).amax() < 1e-15);
    }

    #[test]
    fn unobserved_action_block_is_singular() {
        let data = tabular(3, 3, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0; 9]);
        let panel = StagePanel::rewards(&data);
        assert!(matches!(
            fwl_solve(&panel, &BasisSpec::indicator(2), 2, 0.0),
            Err(Error::SingularDesign { .. })
        ));
        assert!(fwl_solve(&panel, &BasisSpec::indicator(2), 2, 1e-8).is_ok());
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let data = tabular(2, 2, vec![0.0, 1.0, 1.0, 0.0], vec![0, 1, 1, 0]);
        let panel = StagePanel::rewards(&data);
        match profile_solve(&panel, &BasisSpec::indicator(2), 2, 1e-10, 0) {
            Err(Error::ProfileNonConvergence { max_iter: 0, last }) => {
                assert!(last.beta.iter().chain(&last.theta).chain(&last.lambda).all(|x| *x == 0.0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
