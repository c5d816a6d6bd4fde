//! Small dense solves shared by the estimators.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff below which a system counts as singular.
pub const SINGULAR_RTOL: f64 = 1e-10;

/// Ratio of the smallest to the largest eigenvalue magnitude of a symmetric
/// matrix; 0 for the zero matrix.
pub fn sym_condition_ratio(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = m.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x.abs()), hi.max(x.abs())));
    if hi == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

/// Solves a symmetric positive definite system, falling back to an SVD
/// pseudo-inverse if the Cholesky factorization breaks down.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    match m.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        None => m
            .clone()
            .svd(true, true)
            .solve(rhs, f64::EPSILON)
            .expect("svd computed with both factors"),
    }
}

/// Minimum-norm least-squares solution of `a x = b` and the relative size of
/// the smallest singular value.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, f64) {
    let svd = a.clone().svd(true, true);
    let hi = svd.singular_values.max();
    let lo = svd.singular_values.min();
    let ratio = if hi == 0.0 { 0.0 } else { lo / hi };
    let eps = (hi * SINGULAR_RTOL).max(f64::MIN_POSITIVE);
    let x = svd.solve(b, eps).expect("svd computed with both factors");
    (x, ratio)
}

/// Symmetric eigenvalue floor: returns `m` with every eigenvalue raised to
/// at least `floor`.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().all(|&x| x >= floor) {
        return (m + m.transpose()) * 0.5;
    }
    let vals = eig.eigenvalues.map(|x| x.max(floor));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&vals) * v.transpose();
    (&out + out.transpose()) * 0.5
}
