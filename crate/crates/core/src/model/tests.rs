use super::*;
use crate::model::table::{AffineRate, QuadraticCost};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_state(r01: f64, r10: f64) -> TableModel {
    let t = |from, to, base| AffineRate {
        from,
        to,
        base,
        state_coef: vec![],
        control_coef: vec![],
    };
    TableModel::new(TableSpec {
        n_states: 2,
        n_controls: 1,
        n_obs_channels: 0,
        transitions: vec![t(0, 1, r01), t(1, 0, r10)],
        observations: vec![],
        running_cost: QuadraticCost::default(),
        terminal_cost: QuadraticCost::default(),
        control_bounds: vec![],
        baseline_control: vec![],
    })
    .unwrap()
}

fn ising(beta: f64, field: f64, coupling: f64, q: f64) -> IsingModel {
    IsingModel::new(IsingParams {
        beta,
        field,
        coupling,
        obs_rate: q,
    })
    .unwrap()
}

fn sir() -> SirModel {
    SirModel::new(SirParams::paper_defaults()).unwrap()
}

fn random_simplex(rng: &mut impl Rng, l: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..l).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

#[test]
fn drift_symmetric_rates_vanish() {
    let m = two_state(1.0, 1.0);
    let b = drift(&m, &[0.5, 0.5], &[0.0]).unwrap();
    assert_eq!(b.as_slice(), &[0.0, 0.0]);
}

#[test]
fn drift_one_way_rate() {
    let m = two_state(2.0, 0.0);
    let b = drift(&m, &[1.0, 0.0], &[0.0]).unwrap();
    assert_eq!(b.as_slice(), &[-2.0, 2.0]);
}

#[test]
fn drift_sir_example() {
    let b = drift(&sir(), &[0.99, 0.01, 0.0], &[0.87]).unwrap();
    assert!((b[0] + 0.0086130).abs() < 1e-9);
    assert!((b[1] - (0.0086130 - 0.00217)).abs() < 1e-9);
    assert!((b[1] - 0.0064430).abs() < 1e-9);
    assert!((b[2] - 0.00217).abs() < 1e-12);
}

#[test]
fn drift_rejects_off_simplex() {
    let m = two_state(1.0, 1.0);
    assert!(matches!(drift(&m, &[0.6, 0.6], &[0.0]), Err(Error::NotOnSimplex(_))));
    assert!(matches!(drift(&m, &[1.1, -0.1], &[0.0]), Err(Error::NotOnSimplex(_))));
    assert!(drift(&m, &[0.5, 0.5 + 5e-10], &[0.0]).is_ok());
}

#[test]
fn drift_rejects_non_finite_rate() {
    let m = two_state(f64::NAN, 1.0);
    assert!(matches!(drift(&m, &[0.5, 0.5], &[0.0]), Err(Error::InvalidRate { .. })));
}

#[test]
fn obs_drift_examples() {
    let b = obs_drift(&sir(), &[0.99, 0.01, 0.0]).unwrap();
    assert!((b[0] - 0.01 / 3.0).abs() < 1e-12);
    let b = obs_drift(&ising(1.0, 0.0, 0.0, 1.0), &[0.5, 0.5]).unwrap();
    assert_eq!(b.as_slice(), &[0.5, 0.5]);
    let b = obs_drift(&two_state(1.0, 1.0), &[0.5, 0.5]).unwrap();
    assert_eq!(b.len(), 0);
}

#[test]
fn theta_two_state() {
    let (theta, tt) = noise_covariances(&two_state(1.0, 1.0), &[0.5, 0.5], &[0.0]).unwrap();
    assert_eq!(theta.as_slice(), &[1.0, -1.0, -1.0, 1.0]);
    assert_eq!(tt.nrows(), 0);
}

#[test]
fn theta_ising_reduced_coordinate() {
    // Ŝ = cᵀΣ with c = (−1, 1); its noise variance is cᵀΘc.
    let m = ising(1.0, 0.0, 0.0, 2.0);
    let (theta, tt) = noise_covariances(&m, &[0.5, 0.5], &[1.0, 1.0]).unwrap();
    let c = DVector::from_vec(vec![-1.0, 1.0]);
    let reduced = c.dot(&(&theta * &c));
    // Ŝ jumps by ±2/N at total rate N(α⁰Σ⁰ + α¹Σ¹) = N, so N·var rate = 4.
    assert!((reduced - 4.0).abs() < 1e-14);
    // α⁰(1−Ŝ) + α¹(1+Ŝ) = 2 is the total jump intensity, half the reduced variance.
    let intensity = 1.0 * (1.0 - 0.0) + 1.0 * (1.0 + 0.0);
    assert!((reduced - 2.0 * intensity).abs() < 1e-14);
    // difference of the two observation channels has variance q
    let reduced_obs = c.dot(&(&tt * &c));
    assert!((reduced_obs - 2.0).abs() < 1e-14);
}

#[test]
fn ising_builtin_examples() {
    let beta = 2.0;
    let m = ising(beta, 0.0, 0.0, 1.0);
    assert!((m.running_cost(&[0.5, 0.5], &[1.0, 1.0]) + 1.0 / beta).abs() < 1e-15);
    assert_eq!(m.transition_rate(0, 1, &[0.3, 0.7], &[0.4, 2.5]), 0.4);
    assert_eq!(m.transition_rate(1, 0, &[0.3, 0.7], &[0.4, 2.5]), 2.5);
    assert!(IsingModel::new(IsingParams {
        beta: 0.0,
        field: 0.0,
        coupling: 0.0,
        obs_rate: 1.0
    })
    .is_err());
    assert_eq!(ising(1.0, 0.0, 0.0, 0.0).dims().obs_channels, 0);
}

#[test]
fn ising_symmetric_equilibrium_is_stationary() {
    let m = ising(1.0, 0.0, 0.7, 1.0);
    let s = IsingModel::full_state(0.0);
    let p = [0.0, 0.0];
    let (_, a) = hamiltonian(&m, &s, &p, None).unwrap();
    assert_eq!(a.as_slice(), &[1.0, 1.0]);
    let b = drift(&m, &s, a.as_slice()).unwrap();
    assert!(b.amax() < 1e-15);
    // D_S 𝓗 = D_S b ᵀ P − D_S L projected on the tangent direction
    let (ds_b, _) = drift_jacobians(&m, &s, a.as_slice());
    let cost = running_cost_derivs(&m, &s, a.as_slice());
    let dsh = ds_b.transpose() * DVector::from_column_slice(&p) - cost.grad.rows(0, 2);
    let tangent = DVector::from_vec(vec![-0.5, 0.5]);
    assert!(dsh.dot(&tangent).abs() < 1e-15);
}

#[test]
fn ising_argmax_reduced_form() {
    let beta = 0.8;
    let m = ising(beta, 0.0, 0.0, 1.0);
    let p_hat = 0.3;
    let p = [-p_hat, p_hat];
    let (_, a) = hamiltonian(&m, &[0.4, 0.6], &p, None).unwrap();
    assert!((a[0] - (2.0 * beta * p_hat).exp()).abs() < 1e-14);
    assert!((a[1] - (-2.0 * beta * p_hat).exp()).abs() < 1e-14);
}

#[test]
fn sir_builtin_examples() {
    let m = sir();
    let s = [0.7, 0.2, 0.1];
    assert!((m.running_cost(&s, &[0.87]) - 8000.0 * 0.2).abs() < 1e-9);
    assert_eq!(m.observation_rate(1, 0, &s), 1.0 / 3.0);
    assert_eq!(m.observation_rate(0, 0, &s), 0.0);
    assert_eq!(m.observation_rate(2, 0, &s), 0.0);
    let (h, a) = hamiltonian(&m, &s, &[1.5, 1.5, 0.0], None).unwrap();
    assert!((a[0] - 0.87).abs() < 1e-15);
    // P·b = 1.5 (b⁰ + b¹) = −1.5 γ Σ¹
    assert!((h - (-1.5 * 0.217 * 0.2 - 8000.0 * 0.2)).abs() < 1e-9);
    let bad = SirParams {
        control_cost: 0.0,
        ..SirParams::paper_defaults()
    };
    assert!(SirModel::new(bad).is_err());
    let bad = SirParams {
        base_rate: -1.0,
        ..SirParams::paper_defaults()
    };
    assert!(SirModel::new(bad).is_err());
    let ok = SirParams {
        test_rate: 0.0,
        ..SirParams::paper_defaults()
    };
    assert!(SirModel::new(ok).is_ok());
}

#[test]
fn sir_argmax_closed_form() {
    let m = sir();
    let s = [0.6, 0.3, 0.1];
    let p = [-2.0, -50.0, 0.0];
    let (_, a) = hamiltonian(&m, &s, &p, None).unwrap();
    let expected = 0.87 * 100.0 / (100.0 - 0.87 * 0.6 * 0.3 * (-48.0));
    assert!((a[0] - expected).abs() < 1e-12);
    // unbounded when the denominator is nonpositive
    assert!(matches!(
        hamiltonian(&m, &s, &[0.0, 1e4, 0.0], None),
        Err(Error::UnboundedHamiltonian)
    ));
}

#[test]
fn newton_maximizer_matches_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fd_sir = FiniteDifference(sir());
    let fd_ising = FiniteDifference(ising(1.3, 0.2, -0.4, 1.0));
    for _ in 0..20 {
        let s = random_simplex(&mut rng, 3);
        let p: Vec<f64> = (0..3).map(|_| rng.random_range(-100.0..100.0)).collect();
        let exact = sir().optimal_control(&s, &p).unwrap();
        let (_, a) = hamiltonian(&fd_sir, &s, &p, None).unwrap();
        assert!((a[0] - exact).abs() < 1e-6 * exact, "{} vs {}", a[0], exact);

        let s = random_simplex(&mut rng, 2);
        let p: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (_, a) = hamiltonian(&fd_ising, &s, &p, None).unwrap();
        let x = 1.3 * (p[1] - p[0]);
        assert!((a[0] - x.exp()).abs() < 1e-6);
        assert!((a[1] - (-x).exp()).abs() < 1e-6);
    }
}

#[test]
fn argmax_is_stationary_and_maximal() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let models: Vec<Box<dyn AgentModel>> = vec![Box::new(sir()), Box::new(ising(0.7, 0.3, 1.5, 2.0))];
    for m in &models {
        let l = m.dims().states;
        for _ in 0..100 {
            let s = random_simplex(&mut rng, l);
            let p: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (h, a) = hamiltonian(m.as_ref(), &s, &p, None).unwrap();
            let (g, _) = hamiltonian_control_derivs(m.as_ref(), &s, a.as_slice(), &p);
            assert!(g.norm() <= 1e-8, "gradient {}", g.norm());
            for _ in 0..100 {
                let pert: Vec<f64> = a.iter().map(|v| v * (1.0 + rng.random_range(-0.3..0.3))).collect();
                let hp = hamiltonian_value(m.as_ref(), &s, &pert, &p).unwrap();
                assert!(hp <= h + 1e-12);
            }
        }
    }
}

fn rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let scale = a.amax().max(1.0);
    (a - b).amax() <= tol * scale
}

#[test]
fn analytic_derivatives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let models: Vec<(Box<dyn AgentModel>, Box<dyn AgentModel>)> = vec![
        (Box::new(sir()), Box::new(FiniteDifference(sir()))),
        (
            Box::new(ising(0.9, 0.4, -1.2, 2.0)),
            Box::new(FiniteDifference(ising(0.9, 0.4, -1.2, 2.0))),
        ),
    ];
    for (exact, approx) in &models {
        let d = exact.dims();
        for _ in 0..100 {
            let s = random_simplex(&mut rng, d.states);
            let a: Vec<f64> = (0..d.controls).map(|_| rng.random_range(0.2..2.0)).collect();
            let p: Vec<f64> = (0..d.states).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (e1, e2) = drift_jacobians(exact.as_ref(), &s, &a);
            let (f1, f2) = drift_jacobians(approx.as_ref(), &s, &a);
            assert!(rel_close(&e1, &f1, 1e-4) && rel_close(&e2, &f2, 1e-4));
            let eh = costate_drift_hessian(exact.as_ref(), &s, &a, &p);
            let fh = costate_drift_hessian(approx.as_ref(), &s, &a, &p);
            assert!(rel_close(&eh, &fh, 1e-4));
            let ec = running_cost_derivs(exact.as_ref(), &s, &a);
            let fc = running_cost_derivs(approx.as_ref(), &s, &a);
            let eg = DMatrix::from_column_slice(ec.grad.len(), 1, ec.grad.as_slice());
            let fg = DMatrix::from_column_slice(fc.grad.len(), 1, fc.grad.as_slice());
            assert!(rel_close(&eg, &fg, 1e-4));
            assert!(rel_close(&ec.hess, &fc.hess, 1e-4), "{} vs {}", ec.hess, fc.hess);
            let eo = obs_drift_jacobian(exact.as_ref(), &s);
            let fo = obs_drift_jacobian(approx.as_ref(), &s);
            assert!(rel_close(&eo, &fo, 1e-4));
        }
    }
}

#[test]
fn theta_psd_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let models: Vec<Box<dyn AgentModel>> = vec![Box::new(sir()), Box::new(ising(1.0, 0.0, 0.5, 2.0))];
    for m in &models {
        let d = m.dims();
        for _ in 0..10_000 {
            let s = random_simplex(&mut rng, d.states);
            let a: Vec<f64> = (0..d.controls).map(|_| rng.random_range(0.01..5.0)).collect();
            let (theta, tt) = noise_covariances(m.as_ref(), &s, &a).unwrap();
            assert!(linalg::min_eigenvalue(&theta) >= -1e-10);
            for i in 0..d.states {
                assert!(theta.row(i).sum().abs() <= 1e-15);
            }
            for i in 0..tt.nrows() {
                assert!(tt[(i, i)] >= 0.0);
            }
        }
    }
}

proptest! {
    #[test]
    fn drift_conserves_probability(
        w in proptest::collection::vec(0.0f64..1.0, 3),
        a in 0.01f64..5.0,
    ) {
        let total: f64 = w.iter().sum::<f64>() + 1e-9;
        let s: Vec<f64> = w.iter().map(|x| (x + 1e-9 / 3.0) / total).collect();
        let b = drift(&sir(), &s, &[a]).unwrap();
        prop_assert!(b.sum().abs() <= 1e-12);
        let b = drift(&ising(1.0, 0.3, 0.2, 1.0), &s[..2].iter().map(|x| x / (s[0] + s[1])).collect::<Vec<_>>(), &[a, 1.0 / a]).unwrap();
        prop_assert!(b.sum().abs() <= 1e-12);
    }
}

#[test]
fn renormalize_projects_onto_simplex() {
    let mut s = [0.5, -1e-12, 0.5 + 1e-12];
    renormalize(&mut s);
    assert!(check_simplex(&s, 3).is_ok());
    assert_eq!(s[1], 0.0);
}
