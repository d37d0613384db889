//! Social-distancing control of an SIR epidemic observed through positive
//! tests: mean-field optimum, filter-and-gain correction, and one finite
//! population run with the corrected control.
//!
//! Run with `cargo run --release --example sir_epidemic_control [N]`.

use meanfield_lqg::fluctuations::{extract_coefficients, solve_lqg};
use meanfield_lqg::meanfield::{optimize, OptimizeOptions, StepRule};
use meanfield_lqg::model::{SirModel, SirParams};
use meanfield_lqg::simulator::{run_ensemble, run_episode, Controller, EnsembleConfig, KalmanFeedback, SimConfig};
use nalgebra::{DMatrix, DVector};

fn main() -> meanfield_lqg::Result<()> {
    let n_agents: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let params = SirParams::paper_defaults();
    let model = SirModel::new(params)?;
    let s0 = [0.99, 0.01, 0.0];
    let opts = OptimizeOptions {
        step_rule: StepRule::Lbfgs,
        ..OptimizeOptions::default()
    };
    let mf = optimize(&model, &s0, 1.0, 100, &opts)?;
    println!(
        "mean-field cost {:.3}, gradient {:.1e} after {} iterations",
        mf.cost, mf.grad_norm, mf.iterations
    );

    let coef = extract_coefficients(&model, &mf)?;
    let lqg = solve_lqg(&coef, &DVector::zeros(3), &DMatrix::zeros(3, 3))?;
    let predicted = lqg.predicted_cost.expect("Riccati solution exists for these parameters");
    println!("predicted fluctuation cost N(J - J_mf) = {predicted:.4e}");

    let controller = Controller::KalmanFeedback(KalmanFeedback::new(&model, &mf, &coef, &lqg)?);
    let cfg = SimConfig {
        n_agents,
        dt: 1.0,
        n_steps: 100,
        s0: s0.to_vec(),
        init: Default::default(),
    };
    let ep = run_episode(&model, &controller, &cfg, 1)?;
    println!();
    println!("{:>4} {:>10} {:>10} {:>8} {:>8} {:>8}", "day", "I (mf)", "I (sim)", "tests", "A (mf)", "A (sim)");
    for k in (0..100).step_by(5).chain(std::iter::once(99)) {
        let tests = ep.obs[k][0] - if k == 0 { 0 } else { ep.obs[k - 1][0] };
        println!(
            "{:>4} {:>10.5} {:>10.5} {:>8} {:>8.4} {:>8.4}",
            k,
            mf.states[k][1],
            ep.counts[k][1] as f64 / n_agents as f64,
            tests,
            mf.controls[k][0],
            ep.controls[k][0]
        );
    }

    let ens = EnsembleConfig {
        replicas: 200,
        base_seed: 1,
        snapshot_steps: vec![],
        threads: None,
    };
    for ctrl in [Controller::open_loop(&mf), controller] {
        let stats = run_ensemble(&model, &ctrl, &cfg, &ens, &mf.states)?;
        let n = n_agents as f64;
        println!(
            "{:>10}: N(J - J_mf) = {:.4e} ± {:.1e}  (clamped steps {})",
            ctrl.name(),
            n * (stats.cost_mean - mf.cost),
            n * stats.cost_stderr,
            stats.clamps
        );
    }
    Ok(())
}
