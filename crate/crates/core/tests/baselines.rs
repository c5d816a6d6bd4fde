mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use panel_ope::baselines::{b1_solve, b2_temporal_stationary, b3_individual_homogeneous, b4_homogeneous_model_based, B1System};
use panel_ope::envsim::{dp_oracle_tabular, generate, EnvSpec, TransitionSpec};
use panel_ope::{BasisSpec, Policy, TrajectorySet};

fn target() -> Policy {
    Policy::observation_agnostic(vec![0.2, 0.8]).unwrap()
}

/// Estimating equations evaluated cell by cell, followed by the
/// normalization row.
fn stacked_residual(data: &TrajectorySet, pi: &Policy, spec: &BasisSpec, x: &[f64]) -> Vec<f64> {
    let (n, t_len, na, l) = (data.n_individuals(), data.n_timepoints(), data.n_actions(), spec.len());
    let p = na * l;
    let (eta, beta) = (x[0], &x[1..]);
    let q = |o: &[f64], a: usize| -> f64 {
        let phi = spec.eval(o).unwrap();
        (0..l).map(|j| phi[j] * beta[a * l + j]).sum()
    };
    let mut out = vec![0.0; p + 2];
    for i in 0..n {
        for t in 0..t_len - 1 {
            let (o, a, o2) = (data.obs(i, t), data.action(i, t), data.obs(i, t + 1));
            let probs = pi.probs(o2).unwrap();
            let v_next: f64 = (0..na).map(|b| probs[b] * q(o2, b)).sum();
            let err = data.reward(i, t) - eta + v_next - q(o, a);
            out[0] += err;
            let phi = spec.eval(o).unwrap();
            for j in 0..l {
                out[1 + a * l + j] += phi[j] * err;
            }
        }
    }
    let dir = constant_direction(spec, na);
    out[p + 1] = (0..p).map(|k| dir[k] * beta[k]).sum();
    out
}

#[test]
fn b1_matches_an_iterative_root_finder() {
    let mut r = rng(31);
    let data = random_continuous(&mut r, 10, 10, 2);
    let spec = BasisSpec::polynomial(2, 1);
    let pi = Policy::observation_agnostic(vec![0.35, 0.65]).unwrap();
    let sol = b1_solve(&data, &pi, &spec).unwrap();

    let m = 1 + 2 * spec.len();
    let mut x = vec![0.0; m];
    let h = 1e-3;
    for _ in 0..20 {
        let f0 = DVector::from_vec(stacked_residual(&data, &pi, &spec, &x));
        let mut jac = DMatrix::zeros(f0.len(), m);
        for k in 0..m {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fp = stacked_residual(&data, &pi, &spec, &xp);
            let fm = stacked_residual(&data, &pi, &spec, &xm);
            for row in 0..f0.len() {
                jac[(row, k)] = (fp[row] - fm[row]) / (2.0 * h);
            }
        }
        let step = jac.svd(true, true).solve(&(-f0), 1e-12).unwrap();
        for k in 0..m {
            x[k] += step[k];
        }
        if step.amax() < 1e-13 {
            break;
        }
    }
    assert!((sol.eta - x[0]).abs() <= 1e-8, "{} vs {}", sol.eta, x[0]);
    for (a, b) in sol.beta.iter().zip(&x[1..]) {
        assert!((a - b).abs() <= 1e-8);
    }
    let sys = B1System::build(&data, &pi, &spec).unwrap();
    let full = DVector::from_iterator(m, std::iter::once(sol.eta).chain(sol.beta.iter().copied()));
    assert!(sys.residual(&full).norm() <= 1e-8 * 100.0);
    assert!(sol.residual <= 1e-8 * 100.0);
}

/// Long-run average reward of the shared component under `pi`.
fn stationary_average(spec: &EnvSpec, pi: &Policy) -> f64 {
    let TransitionSpec::Tabular { main, .. } = &spec.transitions else {
        unreachable!()
    };
    let probs: Vec<Vec<f64>> = (0..2).map(|s| pi.probs(&[s as f64]).unwrap()).collect();
    let step = |s: usize, s2: usize| (0..2).map(|a| probs[s][a] * main[s][a][s2]).sum::<f64>();
    // two-state chain: stationary mass on state 1 balances the flows
    let (up, down) = (step(0, 1), step(1, 0));
    let mu = [down / (up + down), up / (up + down)];
    let rw = &spec.rewards;
    (0..2)
        .map(|s| {
            mu[s]
                * (0..2)
                    .map(|a| probs[s][a] * (rw.intercept + rw.obs_coef[0] * s as f64 + rw.action_effect[a]))
                    .sum::<f64>()
        })
        .sum()
}

#[test]
fn b1_recovers_the_stationary_average_of_a_homogeneous_chain() {
    let pi = target();
    let truth = stationary_average(&EnvSpec::preset("homogeneous-tabular", 80, 80, 0).unwrap(), &pi);
    let etas: Vec<f64> = (0..30)
        .map(|rep| {
            let data = generate(&EnvSpec::preset("homogeneous-tabular", 80, 80, 50 + rep).unwrap()).unwrap();
            b1_solve(&data, &pi, &BasisSpec::indicator(2)).unwrap().eta
        })
        .collect();
    let (m, se) = (mean(&etas), std_error(&etas));
    assert!((m - truth).abs() <= 3.0 * se, "{m} vs {truth} (se {se})");
}

#[test]
fn b2_on_replicated_trajectories_equals_b1_on_one() {
    let one = generate(&EnvSpec::paper_tabular(1, 30, 8)).unwrap();
    let n = 6;
    let rep = |v: &[f64]| v.iter().cycle().take(v.len() * n).copied().collect::<Vec<_>>();
    let data = TrajectorySet::new(
        n,
        30,
        2,
        one.obs_kind(),
        rep(one.observations()),
        one.actions().iter().cycle().take(30 * n).copied().collect(),
        rep(one.rewards()),
    )
    .unwrap();
    let spec = BasisSpec::indicator(2);
    let report = b2_temporal_stationary(&data, &target(), &spec).unwrap();
    let single = b1_solve(&one, &target(), &spec).unwrap().eta;
    assert!(report.missing_individuals.is_empty());
    for e in &report.eta_i {
        assert_eq!(*e, report.eta_i[0]);
        assert!((e - single).abs() <= 1e-12);
    }
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|a, b| x[*a].total_cmp(&x[*b]));
    let mut r = vec![0.0; x.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn b2_orders_individuals_by_their_effect() {
    let (n, t) = (40, 200);
    let theta = EnvSpec::paper_tabular(n, t, 0).rewards.individual_mean;
    let rhos: Vec<f64> = (0..50)
        .map(|rep| {
            let data = generate(&EnvSpec::paper_tabular(n, t, 900 + rep)).unwrap();
            let report = b2_temporal_stationary(&data, &target(), &BasisSpec::indicator(2)).unwrap();
            spearman(&report.eta_i, &theta)
        })
        .collect();
    assert!(mean(&rhos) >= 0.8, "mean Spearman {}", mean(&rhos));
}

#[test]
fn b3_tracks_exact_values_without_individual_effects() {
    let (n, t) = (500, 8);
    let pi = target();
    let mut diffs = vec![Vec::new(); t];
    for rep in 0..20 {
        let spec = EnvSpec::paper_tabular(n, t, 400 + rep).with_weights([0.6, 0.0, 0.4]);
        let data = generate(&spec).unwrap();
        let truth = dp_oracle_tabular(&spec, &pi).unwrap();
        let report = b3_individual_homogeneous(&data, &pi, &BasisSpec::indicator(2), 0.0).unwrap();
        for s in 0..t {
            let exact = truth.iter().map(|row| row[s]).sum::<f64>() / n as f64;
            diffs[s].push(report.eta_t[s] - exact);
        }
    }
    for (s, d) in diffs.iter().enumerate() {
        assert!(mean(d).abs() <= 3.0 * std_error(d), "t={s}: bias {} se {}", mean(d), std_error(d));
    }
}

#[test]
fn b4_matches_exact_values_on_a_homogeneous_chain() {
    let pi = target();
    let spec_for = |rep: u64| EnvSpec::preset("homogeneous-tabular", 40, 40, 700 + rep).unwrap();
    let diffs: Vec<f64> = (0..20)
        .map(|rep| {
            let spec = spec_for(rep);
            let data = generate(&spec).unwrap();
            let truth = dp_oracle_tabular(&spec, &pi).unwrap();
            let exact = truth.iter().flatten().sum::<f64>() / (40.0 * 40.0);
            let report = b4_homogeneous_model_based(&data, &pi, &BasisSpec::indicator(2), 0.0, 200, rep).unwrap();
            report.eta - exact
        })
        .collect();
    assert!(mean(&diffs).abs() <= 3.0 * std_error(&diffs), "bias {} se {}", mean(&diffs), std_error(&diffs));
}

#[test]
fn baselines_fill_the_whole_grid() {
    let data = generate(&EnvSpec::paper_tabular(12, 15, 6)).unwrap();
    let spec = BasisSpec::indicator(2);
    let pi = target();
    let reports = [
        panel_ope::baselines::b1_doubly_homogeneous(&data, &pi, &spec).unwrap(),
        b2_temporal_stationary(&data, &pi, &spec).unwrap(),
        b3_individual_homogeneous(&data, &pi, &spec, 1e-8).unwrap(),
        b4_homogeneous_model_based(&data, &pi, &spec, 1e-8, 50, 1).unwrap(),
    ];
    for r in &reports {
        assert_eq!(r.eta_it.len(), 12);
        assert!(r.eta_it.iter().all(|row| row.len() == 15));
        let finite = r.eta_it.iter().flatten().all(|v| v.is_finite());
        assert!(finite || !r.missing_individuals.is_empty(), "{}", r.estimator_name);
    }
}
