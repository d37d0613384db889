//! Checks the fluctuation filter against a finite population: the spread of
//! the estimation error should match the filter's own covariance, and the
//! error should be uncorrelated with the estimate.
//!
//! Run with `cargo run --release --example kalman_filter_consistency`.

use meanfield_lqg::fluctuations::{extract_coefficients, solve_lqg};
use meanfield_lqg::meanfield::{optimize, OptimizeOptions};
use meanfield_lqg::model::{IsingModel, IsingParams};
use meanfield_lqg::simulator::{run_ensemble, Controller, EnsembleConfig, KalmanFeedback, SimConfig};
use nalgebra::{DMatrix, DVector};

fn main() -> meanfield_lqg::Result<()> {
    let (dt, n_steps) = (0.01, 500);
    let model = IsingModel::new(IsingParams {
        beta: 1.0,
        field: 0.0,
        coupling: -1.0,
        obs_rate: 2.0,
    })?;
    let mf = optimize(&model, &[0.5, 0.5], dt, n_steps, &OptimizeOptions::default())?;
    let coef = extract_coefficients(&model, &mf)?;
    let lqg = solve_lqg(&coef, &DVector::zeros(2), &DMatrix::zeros(2, 2))?;
    let controller = Controller::KalmanFeedback(KalmanFeedback::new(&model, &mf, &coef, &lqg)?);
    let cfg = SimConfig {
        n_agents: 10_000,
        dt,
        n_steps,
        s0: vec![0.5, 0.5],
        init: Default::default(),
    };
    let ens = EnsembleConfig {
        replicas: 1000,
        base_seed: 3,
        snapshot_steps: vec![],
        threads: None,
    };
    let stats = run_ensemble(&model, &controller, &cfg, &ens, &mf.states)?;
    let err = stats.filter_err_cov.as_ref().expect("feedback run");
    let cross = stats.filter_cross.as_ref().expect("feedback run");
    // reduced coordinate: difference of the two occupations
    let reduce = |m: &DMatrix<f64>| m[(1, 1)] - m[(0, 1)] - m[(1, 0)] + m[(0, 0)];
    println!("{:>6} {:>14} {:>14} {:>16}", "t", "filter Π", "empirical", "E[(s-ŝ)ŝ]");
    for k in (0..=n_steps).step_by(50) {
        println!(
            "{:>6.2} {:>14.4} {:>14.4} {:>16.4}",
            k as f64 * dt,
            reduce(&lqg.kalman.prior[k]),
            reduce(&err[k]),
            reduce(&cross[k])
        );
    }
    Ok(())
}
