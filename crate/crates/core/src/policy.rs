//! Stationary policies: maps from the current observation to a probability
//! mass function over actions.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ObsKind;
use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

type CustomFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// User-supplied policy. The closure writes one probability per action into
/// its output slice; outputs are checked on every call.
#[derive(Clone)]
pub struct CustomPolicy {
    n_actions: usize,
    obs_dim: usize,
    f: Arc<CustomFn>,
}

impl CustomPolicy {
    pub fn new<F>(n_actions: usize, obs_dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            n_actions,
            obs_dim,
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for CustomPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomPolicy")
            .field("n_actions", &self.n_actions)
            .field("obs_dim", &self.obs_dim)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum Policy {
    ObservationAgnostic(Vec<f64>),
    /// Row `s` holds the action distribution in state `s`.
    Table(Vec<Vec<f64>>),
    /// `low` when `o[dim] < cutoff`, `high` otherwise.
    Threshold {
        dim: usize,
        cutoff: f64,
        low: Vec<f64>,
        high: Vec<f64>,
    },
    Custom(CustomPolicy),
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidPolicy(format!("{what}: empty distribution")));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidPolicy(format!("{what}: negative or non-finite mass {p:?}")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidPolicy(format!("{what}: masses sum to {s}")));
    }
    Ok(())
}

impl Policy {
    pub fn observation_agnostic(probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs, "observation-agnostic")?;
        Ok(Policy::ObservationAgnostic(probs))
    }

    pub fn table(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = rows.first().map(Vec::len).unwrap_or(0);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::InvalidPolicy(format!("table row {s} has wrong width")));
            }
            check_distribution(row, &format!("table row {s}"))?;
        }
        Ok(Policy::Table(rows))
    }

    pub fn threshold(dim: usize, cutoff: f64, low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        check_distribution(&low, "threshold low branch")?;
        check_distribution(&high, "threshold high branch")?;
        if low.len() != high.len() {
            return Err(Error::InvalidPolicy("threshold branches differ in width".into()));
        }
        if !cutoff.is_finite() {
            return Err(Error::InvalidPolicy("threshold cutoff must be finite".into()));
        }
        Ok(Policy::Threshold {
            dim,
            cutoff,
            low,
            high,
        })
    }

    /// Deterministic policy that always takes `action`.
    pub fn always(action: usize, n_actions: usize) -> Result<Self> {
        if action >= n_actions {
            return Err(Error::InvalidPolicy(format!("action {action} out of range")));
        }
        let mut p = vec![0.0; n_actions];
        p[action] = 1.0;
        Ok(Policy::ObservationAgnostic(p))
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Policy::ObservationAgnostic(p) => p.len(),
            Policy::Table(rows) => rows.first().map(Vec::len).unwrap_or(0),
            Policy::Threshold { low, .. } => low.len(),
            Policy::Custom(c) => c.n_actions,
        }
    }

    /// Checks that this policy can be applied to observations of `kind` with
    /// `n_actions` actions.
    pub fn check_compatible(&self, kind: ObsKind, n_actions: usize) -> Result<()> {
        if self.n_actions() != n_actions {
            return Err(Error::DimensionMismatch {
                expected: n_actions,
                got: self.n_actions(),
            });
        }
        match (self, kind) {
            (Policy::Table(rows), ObsKind::Tabular { n_states }) if rows.len() != n_states => {
                Err(Error::DimensionMismatch {
                    expected: n_states,
                    got: rows.len(),
                })
            }
            (Policy::Table(_), ObsKind::Continuous { .. }) => Err(Error::InvalidPolicy(
                "table policy needs tabular observations".into(),
            )),
            (Policy::Threshold { dim, .. }, k) if *dim >= k.dim() => Err(Error::DimensionMismatch {
                expected: k.dim(),
                got: dim + 1,
            }),
            (Policy::Custom(c), k) if c.obs_dim != k.dim() => Err(Error::DimensionMismatch {
                expected: k.dim(),
                got: c.obs_dim,
            }),
            _ => Ok(()),
        }
    }

    /// Writes `π(·|o)` into `out` without allocating.
    pub fn probs_into(&self, o: &[f64], out: &mut [f64]) -> Result<()> {
        if out.len() != self.n_actions() {
            return Err(Error::DimensionMismatch {
                expected: self.n_actions(),
                got: out.len(),
            });
        }
        match self {
            Policy::ObservationAgnostic(p) => out.copy_from_slice(p),
            Policy::Table(rows) => {
                if o.len() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        got: o.len(),
                    });
                }
                let x = o[0];
                if !(x >= 0.0 && x.fract() == 0.0 && (x as usize) < rows.len()) {
                    return Err(Error::UnknownState(x));
                }
                out.copy_from_slice(&rows[x as usize]);
            }
            Policy::Threshold {
                dim,
                cutoff,
                low,
                high,
            } => {
                let x = *o.get(*dim).ok_or(Error::DimensionMismatch {
                    expected: dim + 1,
                    got: o.len(),
                })?;
                out.copy_from_slice(if x < *cutoff { low } else { high });
            }
            Policy::Custom(c) => {
                if o.len() != c.obs_dim {
                    return Err(Error::DimensionMismatch {
                        expected: c.obs_dim,
                        got: o.len(),
                    });
                }
                (c.f)(o, out);
                check_distribution(out, "custom policy output")?;
            }
        }
        Ok(())
    }

    pub fn probs(&self, o: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_actions()];
        self.probs_into(o, &mut out)?;
        Ok(out)
    }

    /// Draws an action from `π(·|o)`; `scratch` must have one slot per action.
    pub fn sample<R: Rng + ?Sized>(&self, o: &[f64], scratch: &mut [f64], rng: &mut R) -> Result<usize> {
        self.probs_into(o, scratch)?;
        Ok(sample_categorical(scratch, rng))
    }
}

/// Free-function form of [`Policy::probs`].
pub fn policy_probs(p: &Policy, o: &[f64]) -> Result<Vec<f64>> {
    p.probs(o)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding slack above the last partial sum
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Serializable description of a non-custom policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    ObservationAgnostic { probs: Vec<f64> },
    Table { rows: Vec<Vec<f64>> },
    Threshold {
        dim: usize,
        cutoff: f64,
        low: Vec<f64>,
        high: Vec<f64>,
    },
}

impl PolicySpec {
    pub fn build(&self) -> Result<Policy> {
        match self {
            PolicySpec::ObservationAgnostic { probs } => Policy::observation_agnostic(probs.clone()),
            PolicySpec::Table { rows } => Policy::table(rows.clone()),
            PolicySpec::Threshold {
                dim,
                cutoff,
                low,
                high,
            } => Policy::threshold(*dim, *cutoff, low.clone(), high.clone()),
        }
    }

    /// Short stable identifier used in reports.
    pub fn id(&self) -> String {
        fn list(v: &[f64]) -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        match self {
            PolicySpec::ObservationAgnostic { probs } => format!("agnostic:{}", list(probs)),
            PolicySpec::Table { rows } => format!(
                "table:{}",
                rows.iter().map(|r| list(r)).collect::<Vec<_>>().join(";")
            ),
            PolicySpec::Threshold {
                dim,
                cutoff,
                low,
                high,
            } => format!("threshold:{dim}:{cutoff}:{}:{}", list(low), list(high)),
        }
    }

    /// Parses the compact CLI form produced by [`PolicySpec::id`]:
    /// `agnostic:0.2,0.8`, `table:0.7,0.3;0.3,0.7`, or
    /// `threshold:DIM:CUTOFF:LOW_PROBS:HIGH_PROBS`.
    pub fn parse(s: &str) -> Result<Self> {
        fn list(s: &str) -> Result<Vec<f64>> {
            s.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidPolicy(format!("bad number `{x}`")))
                })
                .collect()
        }
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidPolicy(format!("missing kind in `{s}`")))?;
        let spec = match kind {
            "agnostic" => PolicySpec::ObservationAgnostic { probs: list(rest)? },
            "table" => PolicySpec::Table {
                rows: rest.split(';').map(list).collect::<Result<_>>()?,
            },
            "threshold" => {
                let parts: Vec<&str> = rest.split(':').collect();
                if parts.len() != 4 {
                    return Err(Error::InvalidPolicy(format!("threshold needs 4 fields: `{s}`")));
                }
                PolicySpec::Threshold {
                    dim: parts[0]
                        .parse()
                        .map_err(|_| Error::InvalidPolicy(format!("bad dim `{}`", parts[0])))?,
                    cutoff: parts[1]
                        .parse()
                        .map_err(|_| Error::InvalidPolicy(format!("bad cutoff `{}`", parts[1])))?,
                    low: list(parts[2])?,
                    high: list(parts[3])?,
                }
            }
            other => return Err(Error::InvalidPolicy(format!("unknown policy kind `{other}`"))),
        };
        spec.build()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn observation_agnostic_ignores_observation() {
        let p = Policy::observation_agnostic(vec![0.2, 0.8]).unwrap();
        assert_eq!(policy_probs(&p, &[0.0]).unwrap(), vec![0.2, 0.8]);
        assert_eq!(policy_probs(&p, &[-3.5, 9.0]).unwrap(), vec![0.2, 0.8]);
    }

    #[test]
    fn threshold_switches_at_cutoff() {
        let p = Policy::threshold(0, 11.0, vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(p.probs(&[12.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(p.probs(&[10.5]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(p.probs(&[11.0]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn behavior_table_of_tabular_design() {
        let p = Policy::table(vec![vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap();
        assert_eq!(p.probs(&[1.0]).unwrap(), vec![0.3, 0.7]);
        assert!(matches!(p.probs(&[2.0]), Err(Error::UnknownState(_))));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = Policy::threshold(2, 0.0, vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        assert!(matches!(p.probs(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(p
            .check_compatible(ObsKind::Continuous { dim: 2 }, 2)
            .is_err());
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        assert!(Policy::observation_agnostic(vec![0.5, 0.6]).is_err());
        assert!(Policy::observation_agnostic(vec![-0.1, 1.1]).is_err());
        let bad = Policy::Custom(CustomPolicy::new(2, 1, |_, out| {
            out[0] = 0.9;
            out[1] = 0.9;
        }));
        assert!(bad.probs(&[0.0]).is_err());
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in ["agnostic:0.2,0.8", "table:0.7,0.3;0.3,0.7", "threshold:0:11:1,0:0,1"] {
            let spec = PolicySpec::parse(s).unwrap();
            assert_eq!(PolicySpec::parse(&spec.id()).unwrap(), spec);
        }
        assert!(PolicySpec::parse("agnostic:0.5,0.6").is_err());
        assert!(PolicySpec::parse("mystery:1").is_err());
    }

    fn assert_distribution(p: &[f64]) {
        assert!(p.iter().all(|x| *x >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn every_kind_yields_distributions_on_random_observations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let policies = [
            Policy::observation_agnostic(vec![0.1, 0.3, 0.6]).unwrap(),
            Policy::table(vec![vec![0.2, 0.2, 0.6], vec![1.0, 0.0, 0.0]]).unwrap(),
            Policy::threshold(1, 0.0, vec![0.5, 0.25, 0.25], vec![0.0, 0.0, 1.0]).unwrap(),
            Policy::Custom(CustomPolicy::new(3, 2, |o, out| {
                let w = [1.0, (o[0]).exp().min(1e6), (o[1] * o[1]).min(1e6)];
                let s: f64 = w.iter().sum();
                for k in 0..3 {
                    out[k] = w[k] / s;
                }
                // renormalize against rounding
                let s2: f64 = out.iter().sum();
                out.iter_mut().for_each(|x| *x /= s2);
            })),
        ];
        let mut buf = [0.0; 3];
        for p in &policies {
            for _ in 0..10_000 {
                let o: Vec<f64> = match p {
                    Policy::Table(_) => vec![rng.random_range(0..2) as f64],
                    _ => vec![rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
                };
                p.probs_into(&o, &mut buf).unwrap();
                assert_distribution(&buf);
            }
        }
    }

    proptest! {
        #[test]
        fn sampling_respects_support(w in proptest::collection::vec(0.0f64..1.0, 1..6), seed in 0u64..1000) {
            let s: f64 = w.iter().sum();
            prop_assume!(s > 1e-6);
            let p: Vec<f64> = w.iter().map(|x| x / s).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                let k = sample_categorical(&p, &mut rng);
                prop_assert!(p[k] > 0.0);
            }
        }
    }
}
