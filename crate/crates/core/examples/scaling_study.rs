//! Mean-squared distance between the finite population and its mean-field
//! limit as the population grows, for the SIR optimum and an Ising chain.
//!
//! The SIR optimum dips to a few hundredths of a percent infected, so the
//! 1/N regime only starts once that is many agents.
//!
//! Run with `cargo run --release --example scaling_study`.

use meanfield_lqg::meanfield::{optimize, MeanFieldSolution, OptimizeOptions, StepRule};
use meanfield_lqg::model::{AgentModel, IsingModel, IsingParams, SirModel, SirParams};
use meanfield_lqg::simulator::{scaling_study, Controller, EnsembleConfig, SimConfig};

fn report(name: &str, model: &dyn AgentModel, mf: &MeanFieldSolution, s0: &[f64], n_list: &[u64]) -> meanfield_lqg::Result<()> {
    let cfg = SimConfig {
        n_agents: 0,
        dt: mf.dt,
        n_steps: mf.n_steps,
        s0: s0.to_vec(),
        init: Default::default(),
    };
    let ens = EnsembleConfig {
        replicas: 200,
        base_seed: 11,
        snapshot_steps: vec![],
        threads: None,
    };
    let r = scaling_study(model, &Controller::open_loop(mf), &cfg, n_list, &ens, &mf.states, mf.cost)?;
    println!("{name}");
    for p in &r.points {
        println!(
            "  N = {:>10}   sup E|Σ - S|² = {:.3e} ± {:.1e} (step {})",
            p.n_agents, p.sup_sq_dev, p.sup_sq_dev_stderr, p.sup_step
        );
    }
    if let Some(f) = r.slope {
        println!("  slope {:.3}  95% CI [{:.3}, {:.3}]", f.slope, f.ci_low, f.ci_high);
    }
    Ok(())
}

fn main() -> meanfield_lqg::Result<()> {
    let sir = SirModel::new(SirParams::paper_defaults())?;
    let s0 = [0.99, 0.01, 0.0];
    let opts = OptimizeOptions {
        step_rule: StepRule::Lbfgs,
        ..OptimizeOptions::default()
    };
    let mf = optimize(&sir, &s0, 1.0, 100, &opts)?;
    let min_i = mf.states.iter().map(|s| s[1]).fold(f64::INFINITY, f64::min);
    println!("SIR optimum: smallest infected fraction {min_i:.2e}");
    report("SIR, small populations", &sir, &mf, &s0, &[100, 400, 1600, 6400])?;
    report("SIR, large populations", &sir, &mf, &s0, &[100_000, 1_000_000, 10_000_000])?;

    let ising = IsingModel::new(IsingParams {
        beta: 1.0,
        field: 0.0,
        coupling: -1.0,
        obs_rate: 2.0,
    })?;
    let s0 = [0.3, 0.7];
    let mf = optimize(&ising, &s0, 0.01, 300, &OptimizeOptions::default())?;
    report("Ising relaxing from (0.3, 0.7)", &ising, &mf, &s0, &[100, 400, 1600, 6400])?;
    Ok(())
}
