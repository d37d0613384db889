//! A model defined by a rate table instead of code: agents switch between
//! "idle" and "busy", a subsidy raises the idle-to-busy rate, and busy
//! agents are observed. The same table can be saved as JSON and used from
//! the command line with `"model": {"name": "custom-file", "file": ...}`.
//!
//! Run with `cargo run --release --example custom_model`.

use meanfield_lqg::fluctuations::{extract_coefficients, solve_lqg};
use meanfield_lqg::meanfield::{optimize, OptimizeOptions};
use meanfield_lqg::model::{AffineRate, ObservationRate, QuadraticCost, TableModel, TableSpec};
use meanfield_lqg::simulator::{run_ensemble, Controller, EnsembleConfig, KalmanFeedback, SimConfig};
use nalgebra::{DMatrix, DVector};

fn main() -> meanfield_lqg::Result<()> {
    let spec = TableSpec {
        n_states: 2,
        n_controls: 1,
        n_obs_channels: 1,
        transitions: vec![
            AffineRate {
                from: 0,
                to: 1,
                base: 0.5,
                state_coef: vec![0.0, 1.0],
                control_coef: vec![1.0],
            },
            AffineRate {
                from: 1,
                to: 0,
                base: 1.5,
                state_coef: vec![],
                control_coef: vec![],
            },
        ],
        observations: vec![ObservationRate {
            from: 1,
            channel: 0,
            rate: 3.0,
        }],
        // stacked (state, control): penalize idleness and the subsidy
        running_cost: QuadraticCost {
            hessian: vec![vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 4.0]],
            linear: vec![],
        },
        terminal_cost: QuadraticCost::default(),
        control_bounds: vec![[-0.5, 10.0]],
        baseline_control: vec![0.0],
    };
    println!("{}", serde_json::to_string_pretty(&spec)?);
    let model = TableModel::new(spec)?;

    let (dt, n_steps, s0) = (0.02, 250, [0.9, 0.1]);
    let mf = optimize(&model, &s0, dt, n_steps, &OptimizeOptions::default())?;
    println!("mean-field cost {:.6} (converged {})", mf.cost, mf.converged);
    for k in (0..n_steps).step_by(50) {
        println!(
            "  t = {:>4.1}  busy {:.4}  subsidy {:.4}",
            k as f64 * dt,
            mf.states[k][1],
            mf.controls[k][0]
        );
    }

    let coef = extract_coefficients(&model, &mf)?;
    let lqg = solve_lqg(&coef, &DVector::zeros(2), &DMatrix::zeros(2, 2))?;
    println!("predicted N(J - J_mf) = {:?}", lqg.predicted_cost);
    let controller = Controller::KalmanFeedback(KalmanFeedback::new(&model, &mf, &coef, &lqg)?);
    let cfg = SimConfig {
        n_agents: 5000,
        dt,
        n_steps,
        s0: s0.to_vec(),
        init: Default::default(),
    };
    let ens = EnsembleConfig {
        replicas: 4000,
        base_seed: 2,
        snapshot_steps: vec![],
        threads: None,
    };
    for ctrl in [Controller::open_loop(&mf), controller] {
        let stats = run_ensemble(&model, &ctrl, &cfg, &ens, &mf.states)?;
        let n = cfg.n_agents as f64;
        println!(
            "{:>10}: measured N(J - J_mf) = {:.4} ± {:.4}",
            ctrl.name(),
            n * (stats.cost_mean - mf.cost),
            n * stats.cost_stderr
        );
    }
    Ok(())
}
