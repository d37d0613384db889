//! Compares the adjoint (costate) gradient of the mean-field cost with
//! central finite differences on random SIR control paths.
//!
//! Run with `cargo run --release --example adjoint_gradient_check`.

use meanfield_lqg::meanfield::{cost_gradient, costate, rollout};
use meanfield_lqg::model::{SirModel, SirParams};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> meanfield_lqg::Result<()> {
    let model = SirModel::new(SirParams::paper_defaults())?;
    let s0 = [0.99, 0.01, 0.0];
    let (n, dt) = (20, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..5 {
        let a: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_element(1, rng.random_range(0.2..1.5))).collect();
        let r = rollout(&model, &s0, &a, dt)?;
        let p = costate(&model, &r.states, &a, dt)?;
        let g = cost_gradient(&model, &r.states, &a, &p, dt)?;
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let h = 1e-5 * a[k][0];
            let (mut up, mut down) = (a.clone(), a.clone());
            up[k][0] += h;
            down[k][0] -= h;
            let fd = (rollout(&model, &s0, &up, dt)?.cost - rollout(&model, &s0, &down, dt)?.cost) / (2.0 * h);
            worst = worst.max((g[k][0] - fd).abs() / fd.abs().max(1e-12));
        }
        println!("path {trial}: cost {:.4}, worst relative gradient error {worst:.2e}", r.cost);
    }
    Ok(())
}
