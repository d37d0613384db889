use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use meanfield_lqg::commands::{self, Context, ControllerKind};
use meanfield_lqg::{Error, Result};

#[derive(Parser)]
#[command(name = "mflqg", version, about = "Mean-field control with Kalman-filtered fluctuation corrections")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true, env = "MFLQG_OUT")]
    out: Option<PathBuf>,

    /// Base seed, overriding the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// open-loop or kalman
    #[arg(long, global = true, default_value = "kalman")]
    controller: String,

    /// Worker threads for ensembles (results do not depend on it)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the mean-field control; writes meanfield.csv and meanfield.json
    SolveMeanfield,
    /// Filter and gain around the mean-field solution; writes pi.csv, z.csv, gains.csv, lqg.json
    SolveLqg,
    /// Finite-N ensemble; writes episode.csv, ensemble.csv, summary.json
    Simulate,
    /// Ensembles over the config's n_list; writes scaling.csv, scaling.json
    ScalingStudy,
    /// Run the acceptance criteria; writes acceptance.json
    Acceptance {
        /// Run a single criterion
        #[arg(long)]
        only: Option<usize>,
    },
}

fn context(cli: &Cli) -> Result<Context> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::MissingParam("--config".into()))?;
    let mut ctx = Context::load(path, cli.out.clone(), cli.seed)?;
    ctx.controller = cli.controller.parse::<ControllerKind>()?;
    ctx.threads = cli.threads;
    Ok(ctx)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SolveMeanfield => {
            let mf = commands::solve_meanfield(&context(cli)?)?;
            println!(
                "cost {:.10e}  grad_norm {:.3e}  iterations {}  converged {}",
                mf.cost, mf.grad_norm, mf.iterations, mf.converged
            );
        }
        Command::SolveLqg => {
            let r = commands::solve_lqg_files(&context(cli)?)?;
            println!("exists {}  predicted_cost {:?}", r.exists, r.predicted_cost);
        }
        Command::Simulate => {
            let s = commands::simulate(&context(cli)?)?;
            println!(
                "{}: N(J - J_mf) = {:.6} +/- {:.6} over {} replicas",
                s.controller, s.cost_gap, s.cost_gap_stderr, s.replicas
            );
        }
        Command::ScalingStudy => {
            let r = commands::scaling(&context(cli)?)?;
            match r.slope {
                Some(f) => println!("slope {:.4} [{:.4}, {:.4}]", f.slope, f.ci_low, f.ci_high),
                None => println!("slope undefined"),
            }
        }
        Command::Acceptance { only } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let verdicts = commands::acceptance(&out, cli.seed.unwrap_or(meanfield_lqg::acceptance::DEFAULT_SEED), *only)?;
            let passed = verdicts.iter().filter(|v| v.passed).count();
            println!("{passed}/{} criteria passed", verdicts.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
