//! Acceptance suite. Each criterion returns a verdict with the measured
//! values, the tolerance it was judged against and its wall-clock time.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Result;
use crate::fluctuations::{
    extract_coefficients, ising_closed_form, ising_printed_coefficients, ising_reduction_maps, kalman_forward,
    riccati_backward, solve_lqg, FilterAndGain, LqgCoefficients, StepCoefficients,
};
use crate::meanfield::{cost_gradient, costate, optimize, rollout, MeanFieldSolution, OptimizeOptions, StepRule};
use crate::model::{AgentModel, IsingModel, IsingParams, SirModel, SirParams, TableModel};
use crate::simulator::{
    run_ensemble, scaling_study, Controller, EnsembleConfig, InitialCondition, KalmanFeedback, SimConfig,
};

pub const CRITERIA: usize = 10;
pub const DEFAULT_SEED: u64 = 20240501;

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub measured: Value,
    pub tolerance: String,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} {} ({:.2}s) {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

struct Outcome {
    passed: bool,
    measured: Value,
    tolerance: String,
    detail: String,
}

const NAMES: [&str; CRITERIA] = [
    "ising-kalman-fixed-point",
    "ising-riccati-phase-boundary",
    "adjoint-gradient",
    "mean-field-convergence",
    "fluctuation-covariance",
    "filter-consistency",
    "first-order-cost",
    "value-of-information",
    "sir-qualitative",
    "scalar-lqg-brute-force",
];

const BUDGETS: [f64; CRITERIA] = [1.0, 1.0, 10.0, 300.0, 120.0, 180.0, 300.0, 300.0, 60.0, 60.0];

/// Run one criterion (1-based). Errors become failed verdicts.
pub fn run(id: usize, seed: u64) -> Verdict {
    assert!((1..=CRITERIA).contains(&id), "criterion {id} out of range");
    let start = Instant::now();
    let outcome = match id {
        1 => ising_kalman_fixed_point(),
        2 => ising_riccati_phase_boundary(),
        3 => adjoint_gradient(seed),
        4 => mean_field_convergence(seed),
        5 => fluctuation_covariance(seed),
        6 => filter_consistency(seed),
        7 => first_order_cost(seed),
        8 => value_of_information(seed),
        9 => sir_qualitative(seed),
        _ => scalar_lqg_brute_force(seed),
    };
    let seconds = start.elapsed().as_secs_f64();
    let budget = BUDGETS[id - 1];
    let (passed, measured, tolerance, mut detail) = match outcome {
        Ok(o) => (o.passed, o.measured, o.tolerance, o.detail),
        Err(e) => (false, Value::Null, String::new(), format!("error: {e}")),
    };
    let in_time = seconds <= budget;
    if !in_time {
        detail.push_str(&format!(" [over runtime budget {budget}s]"));
    }
    Verdict {
        id,
        name: NAMES[id - 1],
        passed: passed && in_time,
        measured,
        tolerance,
        detail,
        seconds,
        budget_seconds: budget,
    }
}

pub fn run_all(seed: u64) -> Vec<Verdict> {
    (1..=CRITERIA).map(|id| run(id, seed)).collect()
}

fn ising(beta: f64, coupling: f64, q: f64) -> Result<IsingModel> {
    IsingModel::new(IsingParams {
        beta,
        field: 0.0,
        coupling,
        obs_rate: q,
    })
}

/// Reduced one-step coefficients of the Ising model at its symmetric
/// equilibrium, extracted from the model.
fn ising_equilibrium_step(beta: f64, coupling: f64, q: f64, dt: f64) -> Result<StepCoefficients> {
    let m = ising(beta, coupling, q)?;
    let mf = optimize(&m, &[0.5, 0.5], dt, 1, &OptimizeOptions::default())?;
    let coef = extract_coefficients(&m, &mf)?;
    let (embed, project, obs) = ising_reduction_maps(m.dims().obs_channels);
    Ok(coef.steps[0].reduce(&embed, &project, &obs))
}

fn ising_kalman_fixed_point() -> Result<Outcome> {
    let dt = 1e-3;
    let n = 20_000;
    let stationary = |step: StepCoefficients| -> Result<f64> {
        let coef = LqgCoefficients::time_invariant(dt, n, step, DMatrix::zeros(1, 1))?;
        Ok(kalman_forward(&coef, &DMatrix::zeros(1, 1))?.prior[n][(0, 0)])
    };
    let target = ising_closed_form(1.0, 0.5, 2.0)?.pi;
    let printed = stationary(ising_printed_coefficients(1.0, 0.5, 2.0, dt))?;
    let model_derived = stationary(ising_equilibrium_step(1.0, 0.5, 2.0, dt)?)?;
    let err = (printed - target).abs();
    Ok(Outcome {
        passed: err <= 1e-3,
        measured: json!({
            "pi": printed,
            "target": target,
            "abs_error": err,
            "pi_with_model_noise": model_derived,
        }),
        tolerance: "|Π − 1/(1+√2)| ≤ 1e-3".into(),
        detail: format!("Π = {printed:.7} vs {target:.7}; with the model's own jump noise Π = {model_derived:.7}"),
    })
}

fn ising_riccati_phase_boundary() -> Result<Outcome> {
    let dt = 1e-3;
    let solve = |coupling: f64, horizon: f64| -> Result<crate::fluctuations::RiccatiSolution> {
        let n = (horizon / dt).round() as usize;
        let step = ising_equilibrium_step(1.0, coupling, 2.0, dt)?;
        let coef = LqgCoefficients::time_invariant(dt, n, step, DMatrix::zeros(1, 1))?;
        Ok(riccati_backward(&coef))
    };
    let stable = solve(0.75, 30.0)?;
    let z = if stable.exists { stable.z[0][(0, 0)] } else { f64::NAN };
    let z_ok = (z + 0.125).abs() <= 1e-4;
    let critical = solve(1.0, 1000.0)?;
    let beyond = solve(1.2, 1000.0)?;
    let z_critical = critical.z[0][(0, 0)];
    let horizon_steps = 1_000_000;
    let step_of_failure = |r: &crate::fluctuations::RiccatiSolution| r.failure_step.map(|k| horizon_steps - k);
    Ok(Outcome {
        passed: z_ok && !critical.exists && !beyond.exists,
        measured: json!({
            "z_bj_0.75": z,
            "exists_bj_1.0": critical.exists,
            "z0_bj_1.0": z_critical,
            "failure_steps_from_end_bj_1.0": step_of_failure(&critical),
            "exists_bj_1.2": beyond.exists,
            "failure_steps_from_end_bj_1.2": step_of_failure(&beyond),
        }),
        tolerance: "Z(βJ=0.75) = −0.125 ± 1e-4; exists = false for βJ ∈ {1.0, 1.2} within horizon 10³".into(),
        detail: format!(
            "Z = {z:.6}; βJ=1.0 exists={} (Z(0) = {z_critical:.6}); βJ=1.2 exists={}",
            critical.exists, beyond.exists
        ),
    })
}

fn sir() -> Result<SirModel> {
    SirModel::new(SirParams::paper_defaults())
}

const SIR_S0: [f64; 3] = [0.99, 0.01, 0.0];

fn sir_mean_field(dt: f64, n_steps: usize) -> Result<(SirModel, MeanFieldSolution)> {
    let m = sir()?;
    let opts = OptimizeOptions {
        step_rule: StepRule::Lbfgs,
        ..OptimizeOptions::default()
    };
    let mf = optimize(&m, &SIR_S0, dt, n_steps, &opts)?;
    Ok((m, mf))
}

fn adjoint_gradient(seed: u64) -> Result<Outcome> {
    let m = sir()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, dt) = (20, 1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let controls: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_element(1, rng.random_range(0.2..1.5))).collect();
        let r = rollout(&m, &SIR_S0, &controls, dt)?;
        let p = costate(&m, &r.states, &controls, dt)?;
        let g = cost_gradient(&m, &r.states, &controls, &p, dt)?;
        for k in 0..n {
            let h = 1e-5 * controls[k][0];
            let mut plus = controls.clone();
            let mut minus = controls.clone();
            plus[k][0] += h;
            minus[k][0] -= h;
            let fd = (rollout(&m, &SIR_S0, &plus, dt)?.cost - rollout(&m, &SIR_S0, &minus, dt)?.cost) / (2.0 * h);
            let rel = (g[k][0] - fd).abs() / fd.abs().max(g[k][0].abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(Outcome {
        passed: worst <= 1e-5,
        measured: json!({ "max_relative_error": worst }),
        tolerance: "max relative error ≤ 1e-5".into(),
        detail: format!("max relative error {worst:.3e} over 50 trajectories"),
    })
}

fn mean_field_convergence(seed: u64) -> Result<Outcome> {
    let (m, mf) = sir_mean_field(1.0, 100)?;
    let cfg = SimConfig {
        n_agents: 0,
        dt: 1.0,
        n_steps: 100,
        s0: SIR_S0.to_vec(),
        init: InitialCondition::Rounded,
    };
    let ens = EnsembleConfig {
        replicas: 200,
        base_seed: seed,
        snapshot_steps: vec![],
        threads: None,
    };
    let report = scaling_study(&m, &Controller::open_loop(&mf), &cfg, &[100, 400, 1600, 6400], &ens, &mf.states, mf.cost)?;
    let slope = report.slope.map(|s| s.slope).unwrap_or(f64::NAN);
    let sups: Vec<f64> = report.points.iter().map(|p| p.sup_sq_dev).collect();
    // the optimal path dips to a handful of infected agents at these sizes;
    // report the same fit once N·min S¹ is large
    let large = scaling_study(&m, &Controller::open_loop(&mf), &cfg, &[100_000, 1_000_000, 10_000_000], &ens, &mf.states, mf.cost)?;
    let large_slope = large.slope.map(|s| s.slope).unwrap_or(f64::NAN);
    let min_infected = mf.states.iter().map(|s| s[1]).fold(f64::INFINITY, f64::min);
    Ok(Outcome {
        passed: (-1.2..=-0.8).contains(&slope),
        measured: json!({
            "slope": slope,
            "fit": report.slope,
            "sup_sq_dev": sups,
            "converged": mf.converged,
            "min_infected_fraction": min_infected,
            "slope_large_n": large_slope,
        }),
        tolerance: "log-log slope in [−1.2, −0.8]".into(),
        detail: format!(
            "slope {slope:.3}; sup E|Σᴺ−S*|² = [{}]; min S¹ = {min_infected:.2e}; slope over N = 1e5..1e7 is {large_slope:.3}",
            sups.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    })
}

/// Standard error of an empirical covariance entry from per-replica samples.
fn cov_entry(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let c = prods.iter().sum::<f64>() / (n - 1.0);
    let mp = prods.iter().sum::<f64>() / n;
    let var = prods.iter().map(|p| (p - mp).powi(2)).sum::<f64>() / (n - 1.0);
    (c, (var / n).sqrt())
}

fn fluctuation_covariance(seed: u64) -> Result<Outcome> {
    let m = TableModel::symmetric_two_state(1.0);
    let (dt, n_steps) = (0.01, 500);
    let mf = optimize(&m, &[0.5, 0.5], dt, n_steps, &OptimizeOptions::default())?;
    let coef = extract_coefficients(&m, &mf)?;
    let lyap = kalman_forward(&coef, &DMatrix::zeros(2, 2))?;
    let cfg = SimConfig {
        n_agents: 10_000,
        dt,
        n_steps,
        s0: vec![0.5, 0.5],
        init: InitialCondition::Rounded,
    };
    let ens = EnsembleConfig {
        replicas: 1000,
        base_seed: seed,
        snapshot_steps: vec![n_steps],
        threads: None,
    };
    let stats = run_ensemble(&m, &Controller::open_loop(&mf), &cfg, &ens, &mf.states)?;
    let snap = &stats.snapshots[0];
    let target = &lyap.prior[n_steps];
    let mut ok = true;
    let mut entries = Vec::new();
    for i in 0..2 {
        for j in i..2 {
            let xi: Vec<f64> = snap.fluct.iter().map(|f| f[i]).collect();
            let xj: Vec<f64> = snap.fluct.iter().map(|f| f[j]).collect();
            let (c, se) = cov_entry(&xi, &xj);
            let within = (c - target[(i, j)]).abs() <= 3.0 * se;
            ok &= within;
            entries.push(json!({ "i": i, "j": j, "empirical": c, "lyapunov": target[(i, j)], "stderr": se }));
        }
    }
    Ok(Outcome {
        passed: ok,
        measured: json!({ "entries": entries }),
        tolerance: "each covariance entry within 3 standard errors".into(),
        detail: format!(
            "var 𝔰¹: empirical {:.4} vs Lyapunov {:.4}",
            entries[2]["empirical"].as_f64().unwrap_or(f64::NAN),
            target[(1, 1)]
        ),
    })
}

struct IsingFeedback {
    model: IsingModel,
    mf: MeanFieldSolution,
    lqg: FilterAndGain,
    controller: Controller,
}

/// Ising chain linearized at the symmetric equilibrium, with the
/// filter-and-gain controller built from the model's own coefficients.
fn ising_feedback(coupling: f64, q: f64, dt: f64, n_steps: usize) -> Result<IsingFeedback> {
    let model = ising(1.0, coupling, q)?;
    let mf = optimize(&model, &[0.5, 0.5], dt, n_steps, &OptimizeOptions::default())?;
    let coef = extract_coefficients(&model, &mf)?;
    let lqg = solve_lqg(&coef, &DVector::zeros(2), &DMatrix::zeros(2, 2))?;
    let controller = Controller::KalmanFeedback(KalmanFeedback::new(&model, &mf, &coef, &lqg)?);
    Ok(IsingFeedback {
        model,
        mf,
        lqg,
        controller,
    })
}

fn ising_sim(n_steps: usize, dt: f64) -> SimConfig {
    SimConfig {
        n_agents: 10_000,
        dt,
        n_steps,
        s0: vec![0.5, 0.5],
        init: InitialCondition::Rounded,
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn filter_consistency(seed: u64) -> Result<Outcome> {
    let (dt, n_steps) = (0.01, 500);
    let setup = ising_feedback(-1.0, 2.0, dt, n_steps)?;
    let ens = EnsembleConfig {
        replicas: 1000,
        base_seed: seed,
        snapshot_steps: vec![n_steps],
        threads: None,
    };
    let stats = run_ensemble(&setup.model, &setup.controller, &ising_sim(n_steps, dt), &ens, &setup.mf.states)?;
    let snap = &stats.snapshots[0];
    let reduce = |v: &DVector<f64>| v[1] - v[0];
    let err: Vec<f64> = snap.fluct.iter().zip(&snap.s_hat).map(|(f, h)| reduce(f) - reduce(h)).collect();
    let est: Vec<f64> = snap.s_hat.iter().map(reduce).collect();
    let (err_var, err_var_se) = cov_entry(&err, &err);
    let (cross_mean, cross_se) = mean_se(&err.iter().zip(&est).map(|(e, h)| e * h).collect::<Vec<_>>());
    let target = ising_closed_form(1.0, -1.0, 2.0)?.pi;
    let prior = &setup.lqg.kalman.prior[n_steps];
    let model_pi = prior[(1, 1)] - prior[(0, 1)] - prior[(1, 0)] + prior[(0, 0)];
    let literal_ok = (err_var - target).abs() <= 3.0 * err_var_se;
    let model_ok = (err_var - model_pi).abs() <= 3.0 * err_var_se;
    let orthogonal = cross_mean.abs() <= 3.0 * cross_se;
    Ok(Outcome {
        passed: literal_ok && orthogonal,
        measured: json!({
            "error_variance": err_var,
            "error_variance_stderr": err_var_se,
            "closed_form_pi": target,
            "model_filter_pi": model_pi,
            "matches_model_filter": model_ok,
            "error_estimate_cross": cross_mean,
            "error_estimate_cross_stderr": cross_se,
            "clamps": stats.clamps,
        }),
        tolerance: "Var(𝔰−ŝ) within 3 SE of the closed-form Π; |E[(𝔰−ŝ)ŝ]| ≤ 3 SE".into(),
        detail: format!(
            "Var(𝔰−ŝ) = {err_var:.4} ± {err_var_se:.4} vs closed form {target:.4} (model filter {model_pi:.4}); \
             E[(𝔰−ŝ)ŝ] = {cross_mean:.4} ± {cross_se:.4}"
        ),
    })
}

fn first_order_cost(seed: u64) -> Result<Outcome> {
    let (dt, n_steps) = (0.01, 1000);
    let setup = ising_feedback(-1.0, 2.0, dt, n_steps)?;
    let cfg = ising_sim(n_steps, dt);
    let ens = EnsembleConfig {
        replicas: 1000,
        base_seed: seed,
        snapshot_steps: vec![],
        threads: None,
    };
    let stats = run_ensemble(&setup.model, &setup.controller, &cfg, &ens, &setup.mf.states)?;
    let n = cfg.n_agents as f64;
    let gap = n * (stats.cost_mean - setup.mf.cost);
    let gap_se = n * stats.cost_stderr;
    let predicted = setup.lqg.predicted_cost.unwrap_or(f64::NAN);
    // initial rounding offset ζ = N(Σᴺ₀ − S₀) enters through −P₀·ζ
    let counts = crate::simulator::round_counts(&cfg.s0, cfg.n_agents);
    let nuisance: f64 = setup.mf.costates[0]
        .iter()
        .zip(counts.iter().zip(&cfg.s0))
        .map(|(p, (&c, s))| -p * (c as f64 - n * s))
        .sum();
    let expected = predicted + nuisance;
    let tol = (0.15 * expected.abs()).max(3.0 * gap_se);
    Ok(Outcome {
        passed: (gap - expected).abs() <= tol,
        measured: json!({
            "measured_gap": gap,
            "measured_gap_stderr": gap_se,
            "predicted": predicted,
            "rounding_term": nuisance,
            "mean_field_cost": setup.mf.cost,
            "clamps": stats.clamps,
        }),
        tolerance: "|N(Ĵ − J_MF) − predicted| ≤ max(15%, 3 SE)".into(),
        detail: format!("N(Ĵ−J) = {gap:.4} ± {gap_se:.4} vs predicted {expected:.4} (tolerance {tol:.4})"),
    })
}

fn value_of_information(seed: u64) -> Result<Outcome> {
    let (dt, n_steps) = (0.01, 2000);
    let setup = ising_feedback(-1.0, 2.0, dt, n_steps)?;
    let cfg = ising_sim(n_steps, dt);
    let ens = EnsembleConfig {
        replicas: 1000,
        base_seed: seed,
        snapshot_steps: vec![],
        threads: None,
    };
    let fb = run_ensemble(&setup.model, &setup.controller, &cfg, &ens, &setup.mf.states)?;
    let ol = run_ensemble(&setup.model, &Controller::open_loop(&setup.mf), &cfg, &ens, &setup.mf.states)?;
    let n = cfg.n_agents as f64;
    let diffs: Vec<f64> = ol.costs.iter().zip(&fb.costs).map(|(o, f)| n * (o - f)).collect();
    let (diff, se) = mean_se(&diffs);
    Ok(Outcome {
        passed: diff > 3.0 * se,
        measured: json!({
            "open_loop_gap": n * (ol.cost_mean - setup.mf.cost),
            "feedback_gap": n * (fb.cost_mean - setup.mf.cost),
            "paired_difference": diff,
            "paired_stderr": se,
        }),
        tolerance: "open-loop minus feedback cost > 3 paired SE".into(),
        detail: format!("N(Ĵ_open − Ĵ_feedback) = {diff:.4} ± {se:.4}"),
    })
}

fn sir_qualitative(seed: u64) -> Result<Outcome> {
    let (model, mf) = sir_mean_field(1.0, 100)?;
    let b = model.params.base_rate;
    let infected: Vec<f64> = mf.states.iter().map(|s| s[1]).collect();
    let peak = (0..infected.len())
        .max_by(|&i, &j| infected[i].total_cmp(&infected[j]))
        .unwrap_or(0);
    let local_maxima = (1..infected.len() - 1)
        .filter(|&k| infected[k] > infected[k - 1] && infected[k] >= infected[k + 1])
        .count();
    let single_peak = local_maxima == 1 && peak > 0 && peak < infected.len() - 1;
    let below: Vec<usize> = (0..mf.controls.len()).filter(|&k| mf.controls[k][0] < b - 1e-9).collect();
    let contiguous = !below.is_empty() && below.windows(2).all(|w| w[1] == w[0] + 1);
    let covers_peak = below.first().is_some_and(|&a| a <= peak) && below.last().is_some_and(|&z| z >= peak);

    let coef = extract_coefficients(&model, &mf)?;
    let lqg = solve_lqg(&coef, &DVector::zeros(3), &DMatrix::zeros(3, 3))?;
    let controller = Controller::KalmanFeedback(KalmanFeedback::new(&model, &mf, &coef, &lqg)?);
    let cfg = SimConfig {
        n_agents: 10_000,
        dt: 1.0,
        n_steps: 100,
        s0: SIR_S0.to_vec(),
        init: InitialCondition::Rounded,
    };
    // tests are drawn from the counts at the start of a step, so the last
    // observed step stands in for a peak on the horizon
    let tests_step = peak.min(cfg.n_steps - 1);
    let mut clamps = 0;
    let mut tests = Vec::with_capacity(200);
    for i in 0..200u64 {
        let ep = crate::simulator::run_episode(&model, &controller, &cfg, seed.wrapping_add(i))?;
        let before = if tests_step == 0 { 0 } else { ep.obs[tests_step - 1][0] };
        tests.push((ep.obs[tests_step][0] - before) as f64);
        clamps += ep.clamps;
    }
    let (tests_mean, tests_se) = mean_se(&tests);
    let expected_tests = model.params.test_rate * infected[tests_step] * cfg.n_agents as f64 * cfg.dt;
    let tests_ok = (tests_mean - expected_tests).abs() <= 3.0 * tests_se;
    Ok(Outcome {
        passed: single_peak && contiguous && covers_peak && tests_ok,
        measured: json!({
            "peak_step": peak,
            "peak_infected": infected[peak],
            "local_maxima": local_maxima,
            "reduced_interval": [below.first(), below.last()],
            "reduced_contiguous": contiguous,
            "tests_step": tests_step,
            "tests_at_peak": tests_mean,
            "tests_at_peak_stderr": tests_se,
            "expected_tests": expected_tests,
            "min_infected_fraction": infected.iter().cloned().fold(f64::INFINITY, f64::min),
            "clamps": clamps,
        }),
        tolerance: "single interior peak; A < b on one interval containing it; tests at peak within 3 SE of νS¹N".into(),
        detail: format!(
            "peak at day {peak} (I = {:.4}); A < b on days {}; tests {tests_mean:.1} ± {tests_se:.1} vs {expected_tests:.1}",
            infected[peak],
            match (below.first(), below.last()) {
                (Some(a), Some(b)) => format!("{a}..={b}"),
                _ => "none".into(),
            }
        ),
    })
}

/// Scalar linear-quadratic problem driven by three-point noise that matches
/// the Gaussian mean and variance.
#[derive(Debug, Clone, Serialize)]
struct ScalarInstance {
    e: f64,
    b: f64,
    q: f64,
    w: f64,
    r: f64,
    f: f64,
    h: f64,
    theta: f64,
    theta_obs: f64,
    s0_hat: f64,
    pi0: f64,
    n_steps: usize,
}

const LATTICE: [(f64, f64); 3] = [(-1.0, 1.0 / 6.0), (0.0, 2.0 / 3.0), (1.0, 1.0 / 6.0)];

impl ScalarInstance {
    fn random(rng: &mut ChaCha8Rng, n_steps: usize) -> Self {
        let q = rng.random_range(0.5..2.0);
        let r = rng.random_range(0.5..2.0);
        Self {
            e: rng.random_range(-0.3..0.3),
            b: rng.random_range(0.5..1.5),
            q,
            w: rng.random_range(-0.5..0.5) * (q * r).sqrt(),
            r,
            f: rng.random_range(0.5..2.0),
            h: rng.random_range(0.5..1.5),
            theta: rng.random_range(0.1..1.0),
            theta_obs: rng.random_range(0.1..1.0),
            s0_hat: rng.random_range(-1.0..1.0),
            pi0: rng.random_range(0.2..1.0),
            n_steps,
        }
    }

    fn coefficients(&self) -> Result<LqgCoefficients> {
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        let step = StepCoefficients {
            r: m(self.r),
            b: m(self.b),
            e: m(self.e),
            q: m(self.q),
            w: m(self.w),
            e_obs: m(self.h),
            theta: m(self.theta),
            theta_obs: m(self.theta_obs),
        };
        LqgCoefficients::time_invariant(1.0, self.n_steps, step, m(self.f))
    }

    /// Every noise realization `(s0, w_0, v_0, …)` with its probability.
    fn paths(&self) -> Vec<(f64, f64, Vec<f64>, Vec<f64>)> {
        let n = self.n_steps;
        let draws = 1 + 2 * n;
        let scale = |var: f64| (3.0 * var).sqrt();
        let mut out = Vec::with_capacity(3usize.pow(draws as u32));
        for code in 0..3usize.pow(draws as u32) {
            let digit = |i: usize| LATTICE[(code / 3usize.pow(i as u32)) % 3];
            let (x0, mut p) = digit(0);
            let mut w = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for k in 0..n {
                let (xw, pw) = digit(1 + 2 * k);
                let (xv, pv) = digit(2 + 2 * k);
                w.push(xw * scale(self.theta));
                v.push(xv * scale(self.theta_obs));
                p *= pw * pv;
            }
            out.push((p, self.s0_hat + x0 * scale(self.pi0), w, v));
        }
        out
    }

    /// Observations with the effect of past controls removed.
    fn purified(&self, s0: f64, w: &[f64], v: &[f64]) -> Vec<f64> {
        let mut s = s0;
        (0..self.n_steps)
            .map(|k| {
                let y = self.h * s + v[k];
                s = (1.0 + self.e) * s + w[k];
                y
            })
            .collect()
    }

    /// Exact lattice expectation of the cost of the filter-and-gain policy.
    fn recursive_policy_cost(&self, lqg: &FilterAndGain) -> f64 {
        let mut total = 0.0;
        for (p, s0, w, v) in self.paths() {
            let (mut s, mut prior) = (s0, self.s0_hat);
            let mut cost = 0.0;
            for k in 0..self.n_steps {
                let y = self.h * s + v[k];
                let post = prior + lqg.kalman.gains[k][(0, 0)] * (y - self.h * prior);
                let a = lqg.riccati.gains[k][(0, 0)] * post;
                cost += self.q * s * s + 2.0 * self.w * s * a + self.r * a * a;
                s = (1.0 + self.e) * s + self.b * a + w[k];
                prior = (1.0 + self.e) * post + self.b * a;
            }
            total += p * (cost + self.f * s * s);
        }
        total
    }

    /// Minimum expected cost over a policy class. `form(k, ȳ)` returns the
    /// control at step `k` as a sparse linear form in the class parameters.
    fn minimize<F>(&self, n_vars: usize, form: F) -> Result<f64>
    where
        F: Fn(usize, &[f64]) -> Vec<(usize, f64)>,
    {
        // cost = c + 2 gᵀx + xᵀHx
        let mut hess = DMatrix::<f64>::zeros(n_vars, n_vars);
        let mut lin = DVector::<f64>::zeros(n_vars);
        let mut c = 0.0;
        let mut add = |wt: f64, a: &(f64, Vec<(usize, f64)>), b: &(f64, Vec<(usize, f64)>)| {
            c += wt * a.0 * b.0;
            for &(i, x) in &a.1 {
                lin[i] += 0.5 * wt * x * b.0;
                for &(j, y) in &b.1 {
                    hess[(i, j)] += 0.5 * wt * x * y;
                    hess[(j, i)] += 0.5 * wt * x * y;
                }
            }
            for &(j, y) in &b.1 {
                lin[j] += 0.5 * wt * y * a.0;
            }
        };
        for (p, s0, w, v) in self.paths() {
            let ybar = self.purified(s0, &w, &v);
            // state as constant plus sparse form in the parameters
            let mut s: (f64, Vec<(usize, f64)>) = (s0, Vec::new());
            for k in 0..self.n_steps {
                let a = (0.0, form(k, &ybar[..=k]));
                add(p * self.q, &s, &s);
                add(p * 2.0 * self.w, &s, &a);
                add(p * self.r, &a, &a);
                let mut next: Vec<(usize, f64)> = s.1.iter().map(|&(i, x)| (i, (1.0 + self.e) * x)).collect();
                next.extend(a.1.iter().map(|&(i, x)| (i, self.b * x)));
                s = ((1.0 + self.e) * s.0 + w[k], next);
            }
            add(p * self.f, &s, &s);
        }
        let chol = hess
            .clone()
            .cholesky()
            .ok_or(crate::Error::NotPositiveDefinite {
                step: 0,
                min_eig: crate::linalg::min_eigenvalue(&hess),
            })?;
        let x = chol.solve(&lin);
        Ok(c - lin.dot(&x))
    }

    /// Best policy that is affine in the purified observation history.
    fn best_linear_policy(&self) -> Result<f64> {
        let offset = |k: usize| (0..k).map(|j| j + 2).sum::<usize>();
        let n_vars = offset(self.n_steps);
        self.minimize(n_vars, |k, ybar| {
            let base = offset(k);
            let mut f: Vec<(usize, f64)> = ybar.iter().enumerate().map(|(j, &y)| (base + j, y)).collect();
            f.push((base + k + 1, 1.0));
            f
        })
    }

    /// Best policy among all maps from observation histories to controls.
    fn best_policy(&self) -> Result<f64> {
        use std::collections::HashMap;
        let key = |ybar: &[f64]| -> Vec<i64> { ybar.iter().map(|y| (y * 1e9).round() as i64).collect() };
        let mut nodes: HashMap<Vec<i64>, usize> = HashMap::new();
        for (_, s0, w, v) in self.paths() {
            let ybar = self.purified(s0, &w, &v);
            for k in 0..self.n_steps {
                let next = nodes.len();
                nodes.entry(key(&ybar[..=k])).or_insert(next);
            }
        }
        self.minimize(nodes.len(), |_, ybar| vec![(nodes[&key(ybar)], 1.0)])
    }
}

fn scalar_lqg_brute_force(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_all: f64 = 0.0;
    let mut worst_linear: f64 = 0.0;
    let mut worst_lattice: f64 = 0.0;
    let mut cases = Vec::new();
    for n_steps in 1..=3 {
        let inst = ScalarInstance::random(&mut rng, n_steps);
        let coef = inst.coefficients()?;
        let lqg = solve_lqg(&coef, &DVector::from_element(1, inst.s0_hat), &DMatrix::from_element(1, 1, inst.pi0))?;
        let predicted = lqg.predicted_cost.unwrap_or(f64::NAN);
        let lattice = inst.recursive_policy_cost(&lqg);
        let linear = inst.best_linear_policy()?;
        let all = inst.best_policy()?;
        worst_all = worst_all.max((predicted - all).abs());
        worst_linear = worst_linear.max((predicted - linear).abs());
        worst_lattice = worst_lattice.max((predicted - lattice).abs());
        cases.push(json!({
            "instance": inst,
            "predicted": predicted,
            "recursive_policy_on_lattice": lattice,
            "best_linear_policy": linear,
            "best_policy": all,
        }));
    }
    Ok(Outcome {
        passed: worst_all <= 1e-6,
        measured: json!({
            "max_gap_best_policy": worst_all,
            "max_gap_best_linear_policy": worst_linear,
            "max_gap_recursive_policy_on_lattice": worst_lattice,
            "cases": cases,
        }),
        tolerance: "|recursive cost − exhaustive optimum| ≤ 1e-6".into(),
        detail: format!(
            "gap to exhaustive optimum {worst_all:.3e}; to best linear policy {worst_linear:.3e}; \
             recursive policy evaluated on the lattice {worst_lattice:.3e}"
        ),
    })
}
