//! Sieve bases: state indicators, polynomials, and tensor-product B-splines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    /// One-hot encoding of a tabular state.
    Indicator { n_states: usize },
    /// Monomials up to `degrees[j]` in coordinate `j`. Without cross terms
    /// the basis is `1, o_1, .., o_1^{d_1}, o_2, ..`; with cross terms it is
    /// the full tensor product of the per-coordinate monomials.
    Polynomial { degrees: Vec<usize>, cross_terms: bool },
    /// Tensor product of per-coordinate B-splines. Inputs outside the knot
    /// span are clamped to its ends.
    BSpline { degree: usize, knots: Vec<Vec<f64>> },
}

impl BasisSpec {
    pub fn indicator(n_states: usize) -> Self {
        BasisSpec::Indicator { n_states }
    }

    /// Univariate or additive polynomial of the same degree in each coordinate.
    pub fn polynomial(degree: usize, dim: usize) -> Self {
        BasisSpec::Polynomial {
            degrees: vec![degree; dim],
            cross_terms: false,
        }
    }

    /// Number of basis functions `L`.
    pub fn len(&self) -> usize {
        match self {
            BasisSpec::Indicator { n_states } => *n_states,
            BasisSpec::Polynomial {
                degrees,
                cross_terms: false,
            } => 1 + degrees.iter().sum::<usize>(),
            BasisSpec::Polynomial {
                degrees,
                cross_terms: true,
            } => degrees.iter().map(|d| d + 1).product(),
            BasisSpec::BSpline { degree, knots } => knots
                .iter()
                .map(|k| k.len().saturating_sub(degree + 1))
                .product(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Observation dimension the basis expects.
    pub fn dim(&self) -> usize {
        match self {
            BasisSpec::Indicator { .. } => 1,
            BasisSpec::Polynomial { degrees, .. } => degrees.len(),
            BasisSpec::BSpline { knots, .. } => knots.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidBasis(m));
        match self {
            BasisSpec::Indicator { n_states } if *n_states == 0 => bad("indicator basis needs at least one state".into()),
            BasisSpec::Polynomial { degrees, .. } if degrees.is_empty() => {
                bad("polynomial basis needs at least one coordinate".into())
            }
            BasisSpec::BSpline { degree, knots } => {
                if knots.is_empty() {
                    return bad("spline basis needs at least one coordinate".into());
                }
                for (j, k) in knots.iter().enumerate() {
                    if k.len() < degree + 2 {
                        return bad(format!("coordinate {j}: need at least {} knots", degree + 2));
                    }
                    if k.iter().any(|x| !x.is_finite()) || k.windows(2).any(|w| w[1] < w[0]) {
                        return bad(format!("coordinate {j}: knots must be finite and non-decreasing"));
                    }
                    if k[*degree] >= k[k.len() - degree - 1] {
                        return bad(format!("coordinate {j}: empty knot span"));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Coefficients `c` with `Φ(o)ᵀc = 1` for every `o`. Every supported
    /// basis reproduces constants, which is why the two-way solvers have to
    /// treat this direction separately.
    pub fn constant_coefficients(&self) -> Vec<f64> {
        match self {
            BasisSpec::Polynomial { .. } => {
                let mut c = vec![0.0; self.len()];
                c[0] = 1.0;
                c
            }
            BasisSpec::Indicator { .. } | BasisSpec::BSpline { .. } => vec![1.0; self.len()],
        }
    }

    pub fn eval(&self, o: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(o, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, o: &[f64], out: &mut [f64]) -> Result<()> {
        if o.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: o.len(),
            });
        }
        debug_assert_eq!(out.len(), self.len());
        match self {
            BasisSpec::Indicator { n_states } => {
                let x = o[0];
                if !(x >= 0.0 && x.fract() == 0.0 && (x as usize) < *n_states) {
                    return Err(Error::UnknownState(x));
                }
                out.fill(0.0);
                out[x as usize] = 1.0;
            }
            BasisSpec::Polynomial {
                degrees,
                cross_terms: false,
            } => {
                out[0] = 1.0;
                let mut at = 1;
                for (x, &deg) in o.iter().zip(degrees) {
                    let mut p = 1.0;
                    for _ in 0..deg {
                        p *= x;
                        out[at] = p;
                        at += 1;
                    }
                }
            }
            BasisSpec::Polynomial {
                degrees,
                cross_terms: true,
            } => {
                let factors: Vec<Vec<f64>> = o
                    .iter()
                    .zip(degrees)
                    .map(|(x, &deg)| {
                        std::iter::successors(Some(1.0), |p| Some(p * x))
                            .take(deg + 1)
                            .collect()
                    })
                    .collect();
                tensor_product(&factors, out);
            }
            BasisSpec::BSpline { degree, knots } => {
                let factors: Vec<Vec<f64>> = o
                    .iter()
                    .zip(knots)
                    .map(|(x, k)| bspline_values(*degree, k, *x))
                    .collect();
                tensor_product(&factors, out);
            }
        }
        Ok(())
    }

    /// Short content hash identifying this basis.
    pub fn digest(&self) -> String {
        fnv1a(serde_json::to_string(self).expect("basis serializes").as_bytes())
    }
}

pub fn eval_basis(spec: &BasisSpec, o: &[f64]) -> Result<Vec<f64>> {
    spec.eval(o)
}

/// Row-major tensor product: the last coordinate varies fastest.
fn tensor_product(factors: &[Vec<f64>], out: &mut [f64]) {
    out[0] = 1.0;
    let mut len = 1;
    for f in factors {
        // expand in place from the back so earlier entries are still intact
        for idx in (0..len).rev() {
            let base = out[idx];
            for (m, v) in f.iter().enumerate().rev() {
                out[idx * f.len() + m] = base * v;
            }
        }
        len *= f.len();
    }
}

/// All B-spline basis values of the given degree at `x` (Cox–de Boor,
/// triangular form). `x` is clamped to the knot span.
fn bspline_values(p: usize, knots: &[f64], x: f64) -> Vec<f64> {
    let m = knots.len();
    let n_basis = m - p - 1;
    let lo = knots[p];
    let hi = knots[n_basis];
    let x = x.clamp(lo, hi);
    // span index with knots[span] <= x < knots[span + 1], last non-empty span at the right end
    let mut span = p;
    while span < n_basis - 1 && !(x < knots[span + 1]) {
        span += 1;
    }
    while knots[span] == knots[span + 1] && span > p {
        span -= 1;
    }
    let mut local = vec![0.0; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    local[0] = 1.0;
    for j in 1..=p {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { local[r] / denom };
            local[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        local[j] = saved;
    }
    let mut out = vec![0.0; n_basis];
    for (r, v) in local.into_iter().enumerate() {
        out[span - p + r] = v;
    }
    out
}
