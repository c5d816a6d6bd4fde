//! Balanced panel of observation-action-reward triplets.
//!
//! Cells are stored individual-major: cell `(i, t)` lives at `i * T + t`, and
//! observation component `j` of that cell at `(i * T + t) * d + j`. All
//! indices are 0-based; reports and error messages use 1-based indices.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObsKind {
    Tabular { n_states: usize },
    Continuous { dim: usize },
}

impl ObsKind {
    pub fn dim(&self) -> usize {
        match *self {
            ObsKind::Tabular { .. } => 1,
            ObsKind::Continuous { dim } => dim,
        }
    }

    /// Maps a tabular observation onto its state index.
    pub fn state_of(&self, o: &[f64]) -> Result<usize> {
        match *self {
            ObsKind::Tabular { n_states } => {
                let x = o[0];
                if x >= 0.0 && x.fract() == 0.0 && (x as usize) < n_states {
                    Ok(x as usize)
                } else {
                    Err(Error::UnknownState(x))
                }
            }
            ObsKind::Continuous { .. } => Err(Error::InvalidConfig(
                "state index requested for a continuous observation".into(),
            )),
        }
    }
}

/// One broken invariant of a trajectory set. Indices are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    EmptyPanel,
    ActionOutOfRange { i: usize, t: usize, action: usize },
    StateOutOfRange { i: usize, t: usize, value: f64 },
    NonFiniteObservation { i: usize, t: usize },
    NonFiniteReward { i: usize, t: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape {
                what,
                expected,
                got,
            } => write!(f, "ragged panel: {what} has {got} entries, expected {expected}"),
            Violation::EmptyPanel => write!(f, "panel has no individuals or no time points"),
            Violation::ActionOutOfRange { i, t, action } => {
                write!(f, "action out of range at ({i},{t}): {action}")
            }
            Violation::StateOutOfRange { i, t, value } => {
                write!(f, "state out of range at ({i},{t}): {value}")
            }
            Violation::NonFiniteObservation { i, t } => {
                write!(f, "non-finite observation at ({i},{t})")
            }
            Violation::NonFiniteReward { i, t } => write!(f, "non-finite reward at ({i},{t})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    n_individuals: usize,
    n_timepoints: usize,
    n_actions: usize,
    obs_kind: ObsKind,
    observations: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
}

impl TrajectorySet {
    /// Builds a set and rejects it if any invariant is broken.
    pub fn new(
        n_individuals: usize,
        n_timepoints: usize,
        n_actions: usize,
        obs_kind: ObsKind,
        observations: Vec<f64>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let set = Self::new_unchecked(
            n_individuals,
            n_timepoints,
            n_actions,
            obs_kind,
            observations,
            actions,
            rewards,
        );
        let violations = validate_trajectories(&set);
        if violations.is_empty() {
            Ok(set)
        } else {
            Err(Error::InvalidData(violations))
        }
    }

    /// Builds a set without checking it. Use [`validate_trajectories`] before
    /// handing it to an estimator.
    pub fn new_unchecked(
        n_individuals: usize,
        n_timepoints: usize,
        n_actions: usize,
        obs_kind: ObsKind,
        observations: Vec<f64>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
    ) -> Self {
        Self {
            n_individuals,
            n_timepoints,
            n_actions,
            obs_kind,
            observations,
            actions,
            rewards,
        }
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn n_timepoints(&self) -> usize {
        self.n_timepoints
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn obs_kind(&self) -> ObsKind {
        self.obs_kind
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_kind.dim()
    }

    #[inline]
    pub fn obs(&self, i: usize, t: usize) -> &[f64] {
        let d = self.obs_dim();
        let at = (i * self.n_timepoints + t) * d;
        &self.observations[at..at + d]
    }

    #[inline]
    pub fn action(&self, i: usize, t: usize) -> usize {
        self.actions[i * self.n_timepoints + t]
    }

    #[inline]
    pub fn reward(&self, i: usize, t: usize) -> f64 {
        self.rewards[i * self.n_timepoints + t]
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// Copy of this panel with the rewards replaced.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_individuals,
            self.n_timepoints,
            self.n_actions,
            self.obs_kind,
            self.observations.clone(),
            self.actions.clone(),
            rewards,
        )
    }

    /// The sub-panel made of a single individual's trajectory.
    pub fn individual(&self, i: usize) -> Self {
        let t = self.n_timepoints;
        let d = self.obs_dim();
        Self {
            n_individuals: 1,
            n_timepoints: t,
            n_actions: self.n_actions,
            obs_kind: self.obs_kind,
            observations: self.observations[i * t * d..(i + 1) * t * d].to_vec(),
            actions: self.actions[i * t..(i + 1) * t].to_vec(),
            rewards: self.rewards[i * t..(i + 1) * t].to_vec(),
        }
    }

    /// Writes the panel in the `id,t,action,reward,obs_1..obs_d` format with
    /// 1-based ids and times. Floats use the shortest round-tripping form.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let d = self.obs_dim();
        let mut header = vec!["id".to_string(), "t".into(), "action".into(), "reward".into()];
        header.extend((1..=d).map(|j| format!("obs_{j}")));
        wr.write_record(&header)?;
        for i in 0..self.n_individuals {
            for t in 0..self.n_timepoints {
                let mut rec = vec![
                    (i + 1).to_string(),
                    (t + 1).to_string(),
                    self.action(i, t).to_string(),
                    self.reward(i, t).to_string(),
                ];
                rec.extend(self.obs(i, t).iter().map(|x| x.to_string()));
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Checks every invariant and returns the broken ones; empty means valid.
pub fn validate_trajectories(data: &TrajectorySet) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = data.n_individuals;
    let t_len = data.n_timepoints;
    if n == 0 || t_len == 0 {
        out.push(Violation::EmptyPanel);
        return out;
    }
    let cells = n * t_len;
    let d = data.obs_kind.dim();
    let mut shape_ok = true;
    for (what, expected, got) in [
        ("observations", cells * d, data.observations.len()),
        ("actions", cells, data.actions.len()),
        ("rewards", cells, data.rewards.len()),
    ] {
        if expected != got {
            shape_ok = false;
            out.push(Violation::Shape {
                what,
                expected,
                got,
            });
        }
    }
    if !shape_ok {
        return out;
    }
    for i in 0..n {
        for t in 0..t_len {
            let a = data.action(i, t);
            if a >= data.n_actions {
                out.push(Violation::ActionOutOfRange {
                    i: i + 1,
                    t: t + 1,
                    action: a,
                });
            }
            let o = data.obs(i, t);
            if o.iter().any(|x| !x.is_finite()) {
                out.push(Violation::NonFiniteObservation { i: i + 1, t: t + 1 });
            } else if let ObsKind::Tabular { .. } = data.obs_kind {
                if data.obs_kind.state_of(o).is_err() {
                    out.push(Violation::StateOutOfRange {
                        i: i + 1,
                        t: t + 1,
                        value: o[0],
                    });
                }
            }
            if !data.reward(i, t).is_finite() {
                out.push(Violation::NonFiniteReward { i: i + 1, t: t + 1 });
            }
        }
    }
    out
}

/// How to interpret the observation columns of an ingested CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObsKindHint {
    /// Tabular when there is one observation column holding small
    /// non-negative integers, continuous otherwise.
    #[default]
    Auto,
    Tabular { n_states: Option<usize> },
    Continuous,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    pub obs_kind: ObsKindHint,
    /// Defaults to one plus the largest action seen.
    pub n_actions: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Label {
    Int(i64),
    Text(String),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Int(x) => write!(f, "{x}"),
            Label::Text(s) => f.write_str(s),
        }
    }
}

fn relabel(raw: &[String]) -> (Vec<usize>, Vec<Label>) {
    let all_int = raw.iter().all(|s| s.trim().parse::<i64>().is_ok());
    let labels: Vec<Label> = raw
        .iter()
        .map(|s| {
            if all_int {
                Label::Int(s.trim().parse().unwrap())
            } else {
                Label::Text(s.trim().to_string())
            }
        })
        .collect();
    let mut dense: BTreeMap<Label, usize> = labels.iter().map(|l| (l.clone(), 0)).collect();
    for (k, v) in dense.values_mut().enumerate() {
        *v = k;
    }
    let idx = labels.iter().map(|l| dense[l]).collect();
    (idx, dense.into_keys().collect())
}

/// Reads a panel from CSV. Rows may come in any order; ids and times are
/// relabeled to dense ranges in sorted order. Every `(id, t)` cell must be
/// present exactly once.
pub fn read_csv<R: Read>(reader: R, opts: IngestOptions) -> Result<TrajectorySet> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rd.headers()?.clone();
    let mut errors = Vec::new();
    let expected = ["id", "t", "action", "reward"];
    for (k, name) in expected.iter().enumerate() {
        if headers.get(k) != Some(*name) {
            errors.push(format!("header column {} must be `{name}`", k + 1));
        }
    }
    let d = headers.len().saturating_sub(4);
    if d == 0 {
        errors.push("no observation columns (expected obs_1..obs_d)".into());
    }
    for j in 0..d {
        let want = format!("obs_{}", j + 1);
        if headers.get(4 + j) != Some(want.as_str()) {
            errors.push(format!("header column {} must be `{want}`", 5 + j));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Ingestion(errors));
    }

    let mut ids = Vec::new();
    let mut times = Vec::new();
    let mut acts = Vec::new();
    let mut rews = Vec::new();
    let mut obs = Vec::new();
    let mut lines = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        // header is line 1
        let line = row + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("line {line}: {e}"));
                continue;
            }
        };
        if rec.len() != 4 + d {
            errors.push(format!("line {line}: expected {} fields, got {}", 4 + d, rec.len()));
            continue;
        }
        let action = rec[2].parse::<usize>();
        let reward = rec[3].parse::<f64>();
        let o: std::result::Result<Vec<f64>, _> = (0..d).map(|j| rec[4 + j].parse::<f64>()).collect();
        let t_ok = rec[1].parse::<i64>().is_ok();
        match (action, reward, o, t_ok) {
            (Ok(a), Ok(r), Ok(o), true) => {
                ids.push(rec[0].to_string());
                times.push(rec[1].to_string());
                acts.push(a);
                rews.push(r);
                obs.extend(o);
                lines.push(line);
            }
            (a, r, o, t_ok) => {
                let mut what = Vec::new();
                if !t_ok {
                    what.push("t");
                }
                if a.is_err() {
                    what.push("action");
                }
                if r.is_err() {
                    what.push("reward");
                }
                if o.is_err() {
                    what.push("observation");
                }
                errors.push(format!("line {line}: unparsable {}", what.join(", ")));
            }
        }
    }
    if !errors.is_empty() {
        return Err(Error::Ingestion(errors));
    }
    if ids.is_empty() {
        return Err(Error::Ingestion(vec!["no data rows".into()]));
    }

    let (id_idx, id_labels) = relabel(&ids);
    let (t_idx, t_labels) = relabel(&times);
    let n = id_labels.len();
    let t_len = t_labels.len();
    let mut slot: Vec<Option<usize>> = vec![None; n * t_len];
    for (row, (&i, &t)) in id_idx.iter().zip(&t_idx).enumerate() {
        let cell = &mut slot[i * t_len + t];
        if let Some(prev) = cell {
            errors.push(format!(
                "line {}: duplicate cell (id {}, t {}) first seen on line {}",
                lines[row], id_labels[i], t_labels[t], lines[*prev]
            ));
        } else {
            *cell = Some(row);
        }
    }
    for i in 0..n {
        for t in 0..t_len {
            if slot[i * t_len + t].is_none() {
                errors.push(format!(
                    "missing cell ({},{}) (id {}, t {})",
                    i + 1,
                    t + 1,
                    id_labels[i],
                    t_labels[t]
                ));
            }
        }
    }
    if !errors.is_empty() {
        return Err(Error::Ingestion(errors));
    }

    let mut observations = vec![0.0; n * t_len * d];
    let mut actions = vec![0; n * t_len];
    let mut rewards = vec![0.0; n * t_len];
    for (cell, row) in slot.iter().enumerate() {
        let row = row.expect("checked above");
        actions[cell] = acts[row];
        rewards[cell] = rews[row];
        observations[cell * d..(cell + 1) * d].copy_from_slice(&obs[row * d..(row + 1) * d]);
    }

    let integral = d == 1 && observations.iter().all(|x| *x >= 0.0 && x.fract() == 0.0);
    let max_state = observations.iter().fold(0.0f64, |m, x| m.max(*x)) as usize;
    let obs_kind = match opts.obs_kind {
        ObsKindHint::Continuous => ObsKind::Continuous { dim: d },
        ObsKindHint::Tabular { n_states } => {
            if d != 1 {
                return Err(Error::Ingestion(vec![format!(
                    "tabular observations need exactly one column, found {d}"
                )]));
            }
            ObsKind::Tabular {
                n_states: n_states.unwrap_or(max_state + 1),
            }
        }
        ObsKindHint::Auto if integral && max_state < 64 => ObsKind::Tabular {
            n_states: max_state + 1,
        },
        ObsKindHint::Auto => ObsKind::Continuous { dim: d },
    };
    let n_actions = opts
        .n_actions
        .unwrap_or_else(|| actions.iter().copied().max().unwrap_or(0) + 1);

    let set = TrajectorySet::new_unchecked(
        n,
        t_len,
        n_actions,
        obs_kind,
        observations,
        actions,
        rewards,
    );
    let violations = validate_trajectories(&set);
    if violations.is_empty() {
        Ok(set)
    } else {
        // Point each violation back at its source line.
        let msgs = violations
            .iter()
            .map(|v| match v {
                Violation::ActionOutOfRange { i, t, .. }
                | Violation::StateOutOfRange { i, t, .. }
                | Violation::NonFiniteObservation { i, t }
                | Violation::NonFiniteReward { i, t } => {
                    let row = slot[(i - 1) * t_len + (t - 1)].unwrap();
                    format!("line {}: {v}", lines[row])
                }
                other => other.to_string(),
            })
            .collect();
        Err(Error::Ingestion(msgs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrajectorySet {
        TrajectorySet::new(
            2,
            2,
            2,
            ObsKind::Tabular { n_states: 2 },
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0, 1, 1, 0],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap()
    }

    #[test]
    fn well_formed_tabular_set_is_valid() {
        assert!(validate_trajectories(&tiny()).is_empty());
    }

    #[test]
    fn action_out_of_range_is_reported() {
        let bad = TrajectorySet::new_unchecked(
            2,
            2,
            2,
            ObsKind::Tabular { n_states: 2 },
            vec![0.0; 4],
            vec![0, 5, 0, 0],
            vec![0.0; 4],
        );
        let v = validate_trajectories(&bad);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("action out of range"));
    }

    #[test]
    fn nan_reward_is_reported_with_one_based_cell() {
        let mut rewards = vec![0.0; 6];
        rewards[2] = f64::NAN; // i = 0, t = 2
        let bad = TrajectorySet::new_unchecked(
            2,
            3,
            2,
            ObsKind::Continuous { dim: 1 },
            vec![0.0; 6],
            vec![0; 6],
            rewards,
        );
        let v = validate_trajectories(&bad);
        assert_eq!(v, vec![Violation::NonFiniteReward { i: 1, t: 3 }]);
        assert_eq!(v[0].to_string(), "non-finite reward at (1,3)");
    }

    #[test]
    fn ragged_panel_is_reported() {
        let bad = TrajectorySet::new_unchecked(
            2,
            2,
            2,
            ObsKind::Tabular { n_states: 2 },
            vec![0.0; 3],
            vec![0; 4],
            vec![0.0; 4],
        );
        assert!(matches!(validate_trajectories(&bad)[0], Violation::Shape { .. }));
        assert!(TrajectorySet::new(
            2,
            2,
            2,
            ObsKind::Tabular { n_states: 2 },
            vec![0.0; 3],
            vec![0; 4],
            vec![0.0; 4],
        )
        .is_err());
    }

    #[test]
    fn unknown_state_is_reported() {
        let bad = TrajectorySet::new_unchecked(
            1,
            2,
            2,
            ObsKind::Tabular { n_states: 2 },
            vec![0.0, 2.0],
            vec![0, 0],
            vec![0.0; 2],
        );
        assert!(matches!(
            validate_trajectories(&bad)[0],
            Violation::StateOutOfRange { i: 1, t: 2, .. }
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = tiny().with_rewards(vec![0.1, 1.0 / 3.0, -2.5e-17, 7.0]).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), IngestOptions::default()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn csv_rows_in_any_order_are_relabeled() {
        let text = "id,t,action,reward,obs_1\n\
                    b,20,1,4.0,1\n\
                    a,10,0,1.0,0\n\
                    b,10,0,3.0,0\n\
                    a,20,1,2.0,1\n";
        let data = read_csv(text.as_bytes(), IngestOptions::default()).unwrap();
        assert_eq!(data.n_individuals(), 2);
        assert_eq!(data.reward(0, 0), 1.0);
        assert_eq!(data.reward(1, 1), 4.0);
        assert_eq!(data.obs_kind(), ObsKind::Tabular { n_states: 2 });
    }

    #[test]
    fn csv_missing_cell_is_named() {
        let mut text = String::from("id,t,action,reward,obs_1\n");
        for i in 1..=3 {
            for t in 1..=7 {
                if (i, t) != (3, 7) {
                    text.push_str(&format!("{i},{t},0,1.0,0.5\n"));
                }
            }
        }
        let err = read_csv(text.as_bytes(), IngestOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing cell (3,7)"), "{msg}");
    }

    #[test]
    fn csv_duplicate_and_bad_lines_carry_line_numbers() {
        let text = "id,t,action,reward,obs_1\n1,1,0,1.0,0\n1,1,0,1.0,0\n1,2,x,1.0,0\n";
        let msg = read_csv(text.as_bytes(), IngestOptions::default())
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 4: unparsable action"), "{msg}");
        let text = "id,t,action,reward,obs_1\n1,1,0,1.0,0\n1,1,0,1.0,0\n";
        let msg = read_csv(text.as_bytes(), IngestOptions::default())
            .unwrap_err()
            .to_string();
        assert!(msg.contains("line 3: duplicate cell"), "{msg}");
    }
}
