//! The four value targets and the report every estimator produces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which value to read from a report. Indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimandTarget {
    Average,
    PerIndividual(usize),
    PerTime(usize),
    PerIndividualTime(usize, usize),
}

impl EstimandTarget {
    pub fn check(&self, n: usize, t: usize) -> Result<()> {
        let ok = |x: usize, hi: usize| (1..=hi).contains(&x);
        let valid = match *self {
            EstimandTarget::Average => true,
            EstimandTarget::PerIndividual(i) => ok(i, n),
            EstimandTarget::PerTime(s) => ok(s, t),
            EstimandTarget::PerIndividualTime(i, s) => ok(i, n) && ok(s, t),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange(format!("{self:?} outside 1..={n} x 1..={t}")))
        }
    }
}

/// The four estimand families, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimandFamily {
    Eta,
    EtaI,
    EtaT,
    EtaIt,
}

impl EstimandFamily {
    pub const ALL: [EstimandFamily; 4] = [
        EstimandFamily::Eta,
        EstimandFamily::EtaI,
        EstimandFamily::EtaT,
        EstimandFamily::EtaIt,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimandFamily::Eta => "eta",
            EstimandFamily::EtaI => "eta_i",
            EstimandFamily::EtaT => "eta_t",
            EstimandFamily::EtaIt => "eta_it",
        }
    }
}

/// Value estimates for one policy.
///
/// The aggregates are always the arithmetic means of `eta_it` over the
/// relevant index set. Cells of individuals flagged in `missing_individuals`
/// are NaN and excluded from every mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub estimator_name: String,
    pub target_policy_id: String,
    #[serde(with = "nullable::scalar")]
    pub eta: f64,
    #[serde(with = "nullable::vector")]
    pub eta_i: Vec<f64>,
    #[serde(with = "nullable::vector")]
    pub eta_t: Vec<f64>,
    #[serde(with = "nullable::grid")]
    pub eta_it: Vec<Vec<f64>>,
    pub config_digest: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub missing_individuals: Vec<usize>,
}

/// NaN entries are written as JSON `null` and read back as NaN.
mod nullable {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    fn wrap(x: f64) -> Option<f64> {
        (!x.is_nan()).then_some(x)
    }

    fn unwrap(x: Option<f64>) -> f64 {
        x.unwrap_or(f64::NAN)
    }

    pub mod scalar {
        use super::*;

        pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
            wrap(*x).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            Option::<f64>::deserialize(d).map(unwrap)
        }
    }

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(x: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(x.iter().map(|v| wrap(*v)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Option<f64>>::deserialize(d).map(|v| v.into_iter().map(unwrap).collect())
        }
    }

    pub mod grid {
        use super::*;

        pub fn serialize<S: Serializer>(x: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(x.iter().map(|row| row.iter().map(|v| wrap(*v)).collect::<Vec<_>>()))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
            Vec::<Vec<Option<f64>>>::deserialize(d)
                .map(|g| g.into_iter().map(|row| row.into_iter().map(unwrap).collect()).collect())
        }
    }
}

fn nan_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs
        .filter(|x| !x.is_nan())
        .fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

impl ValueReport {
    /// Builds a report from the N×T grid, deriving the aggregates.
    pub fn from_grid(
        estimator_name: impl Into<String>,
        target_policy_id: impl Into<String>,
        eta_it: Vec<Vec<f64>>,
        config_digest: impl Into<String>,
        seed: u64,
    ) -> Self {
        let n = eta_it.len();
        let t_len = eta_it.first().map(Vec::len).unwrap_or(0);
        let missing_individuals: Vec<usize> = eta_it
            .iter()
            .enumerate()
            .filter(|(_, row)| row.iter().all(|x| x.is_nan()))
            .map(|(i, _)| i + 1)
            .collect();
        let eta_i: Vec<f64> = eta_it.iter().map(|row| nan_mean(row.iter().copied())).collect();
        let eta_t: Vec<f64> = (0..t_len)
            .map(|t| nan_mean((0..n).map(|i| eta_it[i][t])))
            .collect();
        let eta = nan_mean(eta_it.iter().flatten().copied());
        Self {
            estimator_name: estimator_name.into(),
            target_policy_id: target_policy_id.into(),
            eta,
            eta_i,
            eta_t,
            eta_it,
            config_digest: config_digest.into(),
            seed,
            missing_individuals,
        }
    }

    pub fn n_individuals(&self) -> usize {
        self.eta_it.len()
    }

    pub fn n_timepoints(&self) -> usize {
        self.eta_t.len()
    }

    pub fn value(&self, target: EstimandTarget) -> Result<f64> {
        target.check(self.n_individuals(), self.n_timepoints())?;
        Ok(match target {
            EstimandTarget::Average => self.eta,
            EstimandTarget::PerIndividual(i) => self.eta_i[i - 1],
            EstimandTarget::PerTime(t) => self.eta_t[t - 1],
            EstimandTarget::PerIndividualTime(i, t) => self.eta_it[i - 1][t - 1],
        })
    }

    /// Largest deviation between the stored aggregates and the means of the
    /// grid; zero for any report built by [`ValueReport::from_grid`].
    pub fn aggregation_error(&self) -> f64 {
        let fresh = ValueReport::from_grid("", "", self.eta_it.clone(), "", 0);
        let mut worst = (fresh.eta - self.eta).abs();
        for (a, b) in fresh.eta_i.iter().zip(&self.eta_i).chain(fresh.eta_t.iter().zip(&self.eta_t)) {
            if !(a.is_nan() && b.is_nan()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn indices_are_one_based() {
        let r = ValueReport::from_grid("x", "p", vec![vec![1.0, 2.0], vec![3.0, 4.0]], "", 0);
        assert_eq!(r.value(EstimandTarget::PerIndividualTime(2, 1)).unwrap(), 3.0);
        assert_eq!(r.value(EstimandTarget::PerIndividual(1)).unwrap(), 1.5);
        assert_eq!(r.value(EstimandTarget::PerTime(2)).unwrap(), 3.0);
        assert_eq!(r.value(EstimandTarget::Average).unwrap(), 2.5);
        assert!(r.value(EstimandTarget::PerTime(0)).is_err());
        assert!(r.value(EstimandTarget::PerIndividual(3)).is_err());
    }

    #[test]
    fn missing_rows_are_flagged_and_skipped() {
        let r = ValueReport::from_grid(
            "b2",
            "p",
            vec![vec![1.0, 1.0], vec![f64::NAN, f64::NAN], vec![3.0, 3.0]],
            "",
            0,
        );
        assert_eq!(r.missing_individuals, vec![2]);
        assert_eq!(r.eta, 2.0);
        assert_eq!(r.eta_t, vec![2.0, 2.0]);
        assert!(r.eta_i[1].is_nan());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = ValueReport::from_grid("x", "p", vec![vec![0.1, 1.0 / 3.0], vec![-1e-300, 7.25]], "abc", 9);
        assert_eq!(ValueReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn missing_rows_survive_json() {
        let r = ValueReport::from_grid("b2", "p", vec![vec![f64::NAN; 2], vec![2.0, 4.0]], "", 0);
        let text = r.to_json().unwrap();
        assert!(text.contains("null"));
        let back = ValueReport::from_json(&text).unwrap();
        assert!(back.eta_i[0].is_nan() && back.eta_it[0].iter().all(|x| x.is_nan()));
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.missing_individuals, vec![1]);
    }

    proptest! {
        #[test]
        fn aggregates_are_grid_means(n in 1usize..8, t in 1usize..8, seed in proptest::collection::vec(-10.0f64..10.0, 64)) {
            let grid: Vec<Vec<f64>> = (0..n).map(|i| (0..t).map(|s| seed[(i * 8 + s) % 64]).collect()).collect();
            let r = ValueReport::from_grid("x", "p", grid.clone(), "", 0);
            let all: f64 = grid.iter().flatten().sum::<f64>() / (n * t) as f64;
            prop_assert!((r.eta - all).abs() <= 1e-10);
            for i in 0..n {
                let m = grid[i].iter().sum::<f64>() / t as f64;
                prop_assert!((r.eta_i[i] - m).abs() <= 1e-10);
            }
            for s in 0..t {
                let m = (0..n).map(|i| grid[i][s]).sum::<f64>() / n as f64;
                prop_assert!((r.eta_t[s] - m).abs() <= 1e-10);
            }
            prop_assert!(r.aggregation_error() <= 1e-10);
        }
    }
}
