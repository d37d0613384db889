//! Filter and Riccati behaviour of the two-state Ising chain as the coupling
//! crosses the critical value βJ = 1.
//!
//! Run with `cargo run --release --example ising_phase_transition`.

use meanfield_lqg::fluctuations::{
    extract_coefficients, ising_closed_form, ising_reduction_maps, kalman_forward, riccati_backward, LqgCoefficients,
};
use meanfield_lqg::meanfield::{optimize, OptimizeOptions};
use meanfield_lqg::model::{AgentModel, IsingModel, IsingParams};
use nalgebra::DMatrix;

fn main() -> meanfield_lqg::Result<()> {
    let (beta, q, dt, horizon) = (1.0, 2.0, 1e-3, 30.0);
    let n = (horizon / dt) as usize;
    println!("{:>6} {:>12} {:>12} {:>10} {:>14}", "βJ", "Z closed", "Z(0)", "exists", "failure (t)");
    for coupling in [-1.0, 0.0, 0.5, 0.75, 0.9, 0.99, 1.0, 1.05, 1.2, 1.5] {
        let model = IsingModel::new(IsingParams {
            beta,
            field: 0.0,
            coupling,
            obs_rate: q,
        })?;
        // the symmetric state is an equilibrium for every coupling
        let mf = optimize(&model, &[0.5, 0.5], dt, 1, &OptimizeOptions::default())?;
        let (embed, project, obs) = ising_reduction_maps(model.dims().obs_channels);
        let step = extract_coefficients(&model, &mf)?.steps[0].reduce(&embed, &project, &obs);
        let coef = LqgCoefficients::time_invariant(dt, n, step, DMatrix::zeros(1, 1))?;
        let ric = riccati_backward(&coef);
        let closed = ising_closed_form(beta, coupling, q)?;
        let z_closed = closed.z.map_or("-".to_string(), |z| format!("{z:.6}"));
        let failure = ric
            .failure_step
            .map_or("-".to_string(), |k| format!("{:.3}", horizon - k as f64 * dt));
        println!(
            "{:>6.2} {:>12} {:>12.6} {:>10} {:>14}",
            beta * coupling,
            z_closed,
            ric.z[0][(0, 0)],
            ric.exists,
            failure
        );
    }

    // The filter does not depend on the coupling. With the model's own jump
    // noise it settles at 2/(1+√(1+q)); the reduced closed form uses half
    // that noise and gives 1/(1+√(1+q)).
    let model = IsingModel::new(IsingParams {
        beta,
        field: 0.0,
        coupling: 0.5,
        obs_rate: q,
    })?;
    let mf = optimize(&model, &[0.5, 0.5], dt, 1, &OptimizeOptions::default())?;
    let (embed, project, obs) = ising_reduction_maps(model.dims().obs_channels);
    let step = extract_coefficients(&model, &mf)?.steps[0].reduce(&embed, &project, &obs);
    let coef = LqgCoefficients::time_invariant(dt, 20_000, step, DMatrix::zeros(1, 1))?;
    let pi = kalman_forward(&coef, &DMatrix::zeros(1, 1))?.prior[20_000][(0, 0)];
    println!();
    println!("stationary filter variance (model noise): {pi:.6}");
    println!("closed form with printed noise:           {:.6}", ising_closed_form(beta, 0.5, q)?.pi);
    println!("closed form with model noise:             {:.6}", 2.0 / (1.0 + (1.0 + q).sqrt()));
    Ok(())
}
