use super::*;
use crate::fluctuations::{extract_coefficients, kalman_update, solve_lqg, StepCoefficients};
use crate::meanfield::{optimize, rollout, OptimizeOptions};
use crate::model::{IsingModel, IsingParams, SirModel, SirParams, TableModel};
use rand::Rng;

fn two_state(rate: f64) -> TableModel {
    TableModel::symmetric_two_state(rate)
}

fn constant_controls(a: f64, n: usize) -> Controller {
    Controller::OpenLoop {
        controls: vec![DVector::from_element(1, a); n],
    }
}

#[test]
fn rounding_preserves_population() {
    assert_eq!(round_counts(&[0.5, 0.5], 3), vec![2, 1]);
    assert_eq!(round_counts(&[0.99, 0.01, 0.0], 100), vec![99, 1, 0]);
    assert_eq!(round_counts(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
    assert_eq!(round_counts(&[0.26, 0.37, 0.37], 10), vec![2, 4, 4]);
    let mut rng = step_rng(1, 0);
    for _ in 0..200 {
        let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        let tot: f64 = raw.iter().sum();
        let s: Vec<f64> = raw.iter().map(|v| v / tot).collect();
        let n = rng.random_range(1..10_000u64);
        let c = round_counts(&s, n);
        assert_eq!(c.iter().sum::<u64>(), n);
        for (ci, si) in c.iter().zip(&s) {
            assert!((*ci as f64 - si * n as f64).abs() < 1.0 + 1e-9);
        }
    }
}

#[test]
fn zero_rates_leave_replica_unchanged() {
    let m = two_state(0.0);
    let mut r = SimReplica::new(vec![3, 7], 0, 5);
    for k in 0..20 {
        let mut rng = step_rng(5, k);
        step(&m, &mut r, &[0.0], 0.1, &mut rng).unwrap();
    }
    assert_eq!(r.counts, vec![3, 7]);
    assert_eq!(r.step, 20);
}

#[test]
fn single_agent_with_zero_rates_pays_constant_cost() {
    let m = two_state(0.0);
    let cfg = SimConfig {
        n_agents: 1,
        dt: 0.5,
        n_steps: 8,
        s0: vec![1.0, 0.0],
        init: InitialCondition::Rounded,
    };
    let ep = run_episode(&m, &constant_controls(0.6, 8), &cfg, 9).unwrap();
    assert!(ep.counts.iter().all(|c| c == &vec![1, 0]));
    let expected = 4.0 * m.running_cost(&[1.0, 0.0], &[0.6]) + m.terminal_cost(&[1.0, 0.0]);
    assert!((ep.realized_cost - expected).abs() < 1e-12);
}

#[test]
fn transition_counts_respect_binomial_tail() {
    let m = two_state(1.0);
    let mut inside = 0;
    let trials = 300;
    for seed in 0..trials {
        let mut r = SimReplica::new(vec![1_000_000, 0], 0, seed);
        let mut rng = step_rng(seed, 0);
        advance(&m, &mut r, &[0.0], 1e-3, &mut rng).unwrap();
        if (900..=1100).contains(&r.counts[1]) {
            inside += 1;
        }
    }
    // P(|X − 1000| > 100) ≈ 0.16% for X ~ Bin(10⁶, 10⁻³)
    assert!(trials - inside <= 3, "{} outside", trials - inside);
}

#[test]
fn agents_are_conserved() {
    let m = SirModel::new(SirParams::paper_defaults()).unwrap();
    let mut r = SimReplica::new(vec![600, 300, 100], 1, 77);
    let mut rng0 = step_rng(77, usize::MAX);
    let mut obs_prev = 0;
    for k in 0..100_000 {
        let a = rng0.random_range(0.0..1.0);
        let mut rng = step_rng(77, k);
        step(&m, &mut r, &[a], 0.5, &mut rng).unwrap();
        assert_eq!(r.n_agents(), 1000);
        assert!(r.obs_counts[0] >= obs_prev);
        obs_prev = r.obs_counts[0];
    }
}

#[test]
fn oversized_step_is_rejected() {
    let m = two_state(3.0);
    let mut r = SimReplica::new(vec![5, 5], 0, 1);
    let mut rng = step_rng(1, 0);
    assert!(matches!(
        advance(&m, &mut r, &[0.0], 0.5, &mut rng),
        Err(Error::StepTooLarge { .. })
    ));
}

/// Mean and standard error of samples.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn one_step_increments_match_drift_and_noise() {
    let m = SirModel::new(SirParams::paper_defaults()).unwrap();
    let (n, dt, a) = (1000u64, 1e-3, 0.7);
    let counts = vec![500, 400, 100];
    let s: Vec<f64> = counts.iter().map(|c| *c as f64 / n as f64).collect();
    let samples = 100_000;
    let mut incs: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(samples)).collect();
    for seed in 0..samples as u64 {
        let mut r = SimReplica::new(counts.clone(), 1, seed);
        let mut rng = step_rng(seed, 0);
        advance(&m, &mut r, &[a], dt, &mut rng).unwrap();
        for i in 0..3 {
            incs[i].push((r.counts[i] as f64 - counts[i] as f64) / n as f64);
        }
    }
    let b = model::drift(&m, &s, &[a]).unwrap();
    let (theta, _) = model::noise_covariances(&m, &s, &[a]).unwrap();
    for i in 0..3 {
        let scaled: Vec<f64> = incs[i].iter().map(|v| v / dt).collect();
        let (mean, se) = mean_se(&scaled);
        assert!((mean - b[i]).abs() <= 3.0 * se + 1e-12, "drift {i}: {mean} vs {} (se {se})", b[i]);
    }
    for i in 0..3 {
        for j in 0..3 {
            let (mi, _) = mean_se(&incs[i]);
            let (mj, _) = mean_se(&incs[j]);
            let prods: Vec<f64> = incs[i]
                .iter()
                .zip(&incs[j])
                .map(|(x, y)| (x - mi) * (y - mj) * n as f64 / dt)
                .collect();
            let (c, se) = mean_se(&prods);
            assert!(
                (c - theta[(i, j)]).abs() <= 3.0 * se + 1e-12,
                "cov {i}{j}: {c} vs {} (se {se})",
                theta[(i, j)]
            );
        }
    }
}

#[test]
fn same_seed_same_episode() {
    let m = SirModel::new(SirParams::paper_defaults()).unwrap();
    let cfg = SimConfig {
        n_agents: 5000,
        dt: 1.0,
        n_steps: 50,
        s0: vec![0.99, 0.01, 0.0],
        init: InitialCondition::Rounded,
    };
    let ctrl = constant_controls(0.8, 50);
    let a = run_episode(&m, &ctrl, &cfg, 42).unwrap();
    let b = run_episode(&m, &ctrl, &cfg, 42).unwrap();
    assert_eq!(a, b);
    let c = run_episode(&m, &ctrl, &cfg, 43).unwrap();
    assert_ne!(a.counts, c.counts);
}

fn ising_pipeline(q: f64, coupling: f64, dt: f64, n: usize) -> (IsingModel, MeanFieldSolution, KalmanFeedback) {
    let m = IsingModel::new(IsingParams {
        beta: 1.0,
        field: 0.0,
        coupling,
        obs_rate: q,
    })
    .unwrap();
    let mf = optimize(&m, &[0.5, 0.5], dt, n, &OptimizeOptions::default()).unwrap();
    let coef = extract_coefficients(&m, &mf).unwrap();
    let lqg = solve_lqg(&coef, &DVector::zeros(2), &DMatrix::zeros(2, 2)).unwrap();
    let kf = KalmanFeedback::new(&m, &mf, &coef, &lqg).unwrap();
    (m, mf, kf)
}

#[test]
fn no_observations_recover_open_loop() {
    let (m, mf, kf) = ising_pipeline(0.0, -1.0, 0.01, 200);
    let cfg = SimConfig {
        n_agents: 2000,
        dt: 0.01,
        n_steps: 200,
        s0: vec![0.5, 0.5],
        init: InitialCondition::Rounded,
    };
    let ep = run_episode(&m, &Controller::KalmanFeedback(kf), &cfg, 3).unwrap();
    assert_eq!(ep.clamps, 0);
    for (a, b) in ep.controls.iter().zip(&mf.controls) {
        assert_eq!(a, b);
    }
    assert!(ep.s_hat_prior.iter().all(|s| s.amax() == 0.0));
}

#[test]
fn zero_innovations_recover_open_loop() {
    let (m, mf, mut kf) = ising_pipeline(2.0, -1.0, 0.01, 20);
    for inc in kf.mean_obs_increments.iter_mut() {
        inc.fill(0.05);
    }
    let mut filter = Controller::KalmanFeedback(kf.clone()).initial_state(2);
    for k in 0..20 {
        let (a, clamped) = kalman_controller_step(&kf, &m, &mut filter, &[5, 5], k, 100).unwrap();
        assert!(!clamped);
        assert_eq!(a, mf.controls[k]);
        assert_eq!(filter.posterior.amax(), 0.0);
    }
}

#[test]
fn filter_matches_gaussian_conditioning() {
    // s ~ N(m, P), u = h s + v, v ~ N(0, V): E[s | u] = m + Cov(s,u)/Var(u) (u − h m)
    let (p, h, v) = (0.7, 0.3, 0.05);
    let c = StepCoefficients {
        r: DMatrix::identity(1, 1),
        b: DMatrix::zeros(1, 1),
        e: DMatrix::zeros(1, 1),
        q: DMatrix::zeros(1, 1),
        w: DMatrix::zeros(1, 1),
        e_obs: DMatrix::from_element(1, 1, h),
        theta: DMatrix::zeros(1, 1),
        theta_obs: DMatrix::from_element(1, 1, v),
    };
    let (gain, post) = kalman_update(&c, &DMatrix::from_element(1, 1, p), 0).unwrap();
    let joint = nalgebra::Matrix2::new(p, p * h, p * h, h * h * p + v);
    assert!((gain[(0, 0)] - joint[(0, 1)] / joint[(1, 1)]).abs() < 1e-15);
    assert!((post[(0, 0)] - (joint[(0, 0)] - joint[(0, 1)].powi(2) / joint[(1, 1)])).abs() < 1e-15);

    let model = two_state(0.5);
    let kf = KalmanFeedback {
        mean_controls: vec![DVector::from_element(1, 0.0)],
        feedback_gains: vec![DMatrix::zeros(1, 2)],
        kalman_gains: vec![DMatrix::from_row_slice(2, 1, &[0.0, gain[(0, 0)]])],
        e: vec![DMatrix::zeros(2, 2)],
        b: vec![DMatrix::zeros(2, 1)],
        e_obs: vec![DMatrix::from_row_slice(1, 2, &[0.0, h])],
        mean_obs_increments: vec![DVector::from_element(1, 0.02)],
        s0_hat: DVector::from_column_slice(&[0.0, 0.4]),
    };
    let mut filter = Controller::KalmanFeedback(kf.clone()).initial_state(2);
    let (n, count) = (400u64, 11u64);
    kalman_controller_step(&kf, &model, &mut filter, &[count], 0, n).unwrap();
    let u = (count as f64 / n as f64 - 0.02) * (n as f64).sqrt();
    let expected = 0.4 + joint[(0, 1)] / joint[(1, 1)] * (u - h * 0.4);
    assert!((filter.posterior[1] - expected).abs() < 1e-14);
}

#[test]
fn controls_depend_only_on_observations() {
    let (m, _, kf) = ising_pipeline(2.0, -1.0, 0.01, 100);
    let cfg = SimConfig {
        n_agents: 1000,
        dt: 0.01,
        n_steps: 100,
        s0: vec![0.5, 0.5],
        init: InitialCondition::Rounded,
    };
    let ctrl = Controller::KalmanFeedback(kf.clone());
    let ep = run_episode(&m, &ctrl, &cfg, 8).unwrap();
    let increments: Vec<Vec<u64>> = (0..100)
        .map(|k| {
            let prev = if k == 0 { vec![0, 0] } else { ep.obs[k - 1].clone() };
            ep.obs[k].iter().zip(&prev).map(|(a, b)| a - b).collect()
        })
        .collect();
    // replay the observation stream alone, with no access to the counts
    let mut filter = ctrl.initial_state(2);
    for (k, inc) in increments.iter().enumerate() {
        let (a, _) = kalman_controller_step(&kf, &m, &mut filter, inc, k, 1000).unwrap();
        assert_eq!(a, ep.controls[k]);
    }
    // a replica with different hidden counts fed the same stream acts the same
    let mut hidden = SimReplica::new(vec![900, 100], 2, 8);
    let mut filter = ctrl.initial_state(2);
    for (k, inc) in increments.iter().enumerate() {
        let (a, _) = kalman_controller_step(&kf, &m, &mut filter, inc, k, 1000).unwrap();
        let mut rng = step_rng(99, k);
        advance(&m, &mut hidden, a.as_slice(), 0.01, &mut rng).unwrap();
        assert_eq!(a, ep.controls[k]);
    }
}

#[test]
fn ensemble_is_independent_of_thread_count() {
    let m = SirModel::new(SirParams::paper_defaults()).unwrap();
    let cfg = SimConfig {
        n_agents: 500,
        dt: 1.0,
        n_steps: 30,
        s0: vec![0.9, 0.1, 0.0],
        init: InitialCondition::Rounded,
    };
    let ctrl = constant_controls(0.6, 30);
    let reference = rollout(&m, &cfg.s0, &vec![DVector::from_element(1, 0.6); 30], 1.0).unwrap().states;
    let run = |threads| {
        let ens = EnsembleConfig {
            replicas: 150,
            base_seed: 10,
            snapshot_steps: vec![5, 30],
            threads: Some(threads),
        };
        run_ensemble(&m, &ctrl, &cfg, &ens, &reference).unwrap()
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a, b);
    assert_eq!(a.snapshots[1].fluct.len(), 150);
}

#[test]
fn deterministic_model_has_no_fluctuations() {
    let m = two_state(0.0);
    let cfg = SimConfig {
        n_agents: 100,
        dt: 0.1,
        n_steps: 10,
        s0: vec![0.25, 0.75],
        init: InitialCondition::Rounded,
    };
    let reference = vec![DVector::from_column_slice(&[0.25, 0.75]); 11];
    let ens = EnsembleConfig {
        replicas: 20,
        base_seed: 0,
        snapshot_steps: vec![],
        threads: None,
    };
    let stats = run_ensemble(&m, &constant_controls(0.0, 10), &cfg, &ens, &reference).unwrap();
    assert!(stats.fluct_cov.iter().all(|c| c.amax() == 0.0));
    let report = scaling_study(&m, &constant_controls(0.0, 10), &cfg, &[10, 100, 1000], &ens, &reference, 0.0).unwrap();
    assert!(report.slope.is_none());
}

#[test]
fn stationary_two_state_fluctuations_match_lyapunov() {
    // with symmetric flipping at rate r the count dynamics are exactly linear:
    // 𝔰¹ = √N(Σ¹ − ½) obeys Π' = (1 − 2p)² Π + p(1 − p), p = rΔt
    let (rate, dt) = (1.0, 0.01);
    let m = two_state(rate);
    let n_steps = 400;
    let cfg = SimConfig {
        n_agents: 1000,
        dt,
        n_steps,
        s0: vec![0.5, 0.5],
        init: InitialCondition::Rounded,
    };
    let reference = vec![DVector::from_column_slice(&[0.5, 0.5]); n_steps + 1];
    let ens = EnsembleConfig {
        replicas: 400,
        base_seed: 1000,
        snapshot_steps: vec![n_steps],
        threads: None,
    };
    let stats = run_ensemble(&m, &constant_controls(0.0, n_steps), &cfg, &ens, &reference).unwrap();
    let p = rate * dt;
    let mut pi = 0.0;
    for _ in 0..n_steps {
        pi = (1.0 - 2.0 * p).powi(2) * pi + p * (1.0 - p);
    }
    let xs: Vec<f64> = stats.snapshots[0].fluct.iter().map(|f| f[1] * f[1]).collect();
    let (var, se) = mean_se(&xs);
    assert!((var - pi).abs() <= 3.0 * se, "{var} vs {pi} (se {se})");
}

#[test]
fn ols_recovers_exact_line() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
    let fit = ols_slope(&x, &y).unwrap();
    assert!((fit.slope + 0.5).abs() < 1e-14);
    assert!((fit.intercept - 2.0).abs() < 1e-14);
    assert!(fit.stderr < 1e-12);
    assert!(ols_slope(&x[..2], &y[..2]).is_none());
    // t quantile for 2 degrees of freedom
    let y2 = [0.0, 1.0, 1.0, 3.0];
    let fit = ols_slope(&x, &y2).unwrap();
    assert!((fit.ci_high - fit.slope - 4.302653 * fit.stderr).abs() < 1e-5);
}
