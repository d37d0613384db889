//! Pipeline behind the command-line tool: solve the mean field, solve the
//! fluctuation filter and gain, simulate, and report.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::acceptance::{self, Verdict};
use crate::config::{CoefficientSource, ExperimentConfig, InitialCovariance};
use crate::error::{Error, Result};
use crate::fluctuations::{
    extract_coefficients, ising_closed_form, ising_printed_coefficients, ising_reduction_maps, solve_lqg,
    FilterAndGain, IsingClosedForm, LqgCoefficients,
};
use crate::io::{self, indexed, matrix_cells, matrix_columns, real_cells, Cell, CsvWriter};
use crate::meanfield::{optimize, MeanFieldSolution};
use crate::model::AgentModel;
use crate::simulator::{
    run_ensemble, run_episode, scaling_study, Controller, EnsembleConfig, InitialCondition, KalmanFeedback,
    ScalingReport, SimConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ControllerKind {
    OpenLoop,
    #[default]
    Kalman,
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "open-loop" => Ok(Self::OpenLoop),
            "kalman" => Ok(Self::Kalman),
            other => Err(Error::InvalidParam {
                name: "controller".into(),
                reason: format!("unknown controller `{other}` (expected open-loop or kalman)"),
            }),
        }
    }
}

/// Everything a subcommand needs besides its own name.
pub struct Context {
    pub config: ExperimentConfig,
    /// Directory that relative paths in the config resolve against.
    pub config_dir: PathBuf,
    pub out: PathBuf,
    pub controller: ControllerKind,
    pub threads: Option<usize>,
}

impl Context {
    /// Loads and validates a config; `seed` overrides its base seed and
    /// `out` its output directory.
    pub fn load(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::load(path)?;
        if let Some(s) = seed {
            config.base_seed = s;
        }
        let config_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = out
            .or_else(|| config.output_dir.as_ref().map(|d| config_dir.join(d)))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            config,
            config_dir,
            out,
            controller: ControllerKind::default(),
            threads: None,
        })
    }

    pub fn model(&self) -> Result<Box<dyn AgentModel>> {
        let m = self.config.build_model(&self.config_dir)?;
        self.config.validate(m.as_ref())?;
        Ok(m)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }

    fn meanfield(&self) -> Result<MeanFieldSolution> {
        if !self.out.join("meanfield.json").exists() {
            return Err(Error::Config(format!(
                "no mean-field solution in {} (run solve-meanfield first)",
                self.out.display()
            )));
        }
        let (meta, mf) = io::read_meanfield(&self.out)?;
        if meta.model != self.config.model.name || meta.n_steps != self.config.n_steps || meta.dt != self.config.dt() {
            return Err(Error::Config(format!(
                "mean-field files in {} were solved for a different config",
                self.out.display()
            )));
        }
        Ok(mf)
    }

    fn sim_config(&self, n_agents: u64) -> SimConfig {
        SimConfig {
            n_agents,
            dt: self.config.dt(),
            n_steps: self.config.n_steps,
            s0: self.config.s0(),
            init: match self.config.pi0 {
                InitialCovariance::Deterministic => InitialCondition::Rounded,
                InitialCovariance::Multinomial => InitialCondition::Multinomial,
            },
        }
    }

    fn ensemble_config(&self) -> EnsembleConfig {
        EnsembleConfig {
            replicas: self.config.replicas,
            base_seed: self.config.base_seed,
            snapshot_steps: vec![],
            threads: self.threads,
        }
    }
}

/// Exit status for a failed command: 2 for configuration problems.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::MissingParam(_) | Error::InvalidParam { .. } => 2,
        _ => 1,
    }
}

/// Writes `meanfield.csv` and `meanfield.json`.
pub fn solve_meanfield(ctx: &Context) -> Result<MeanFieldSolution> {
    let model = ctx.model()?;
    let cfg = &ctx.config;
    let mf = optimize(model.as_ref(), &cfg.s0(), cfg.dt(), cfg.n_steps, &cfg.optimizer)?;
    io::write_meanfield(ctx.out_dir()?, &cfg.model.name, &mf)?;
    Ok(mf)
}

#[derive(Debug, Clone, Serialize)]
pub struct LqgReport {
    pub coefficients: CoefficientSource,
    pub dimension: usize,
    pub exists: bool,
    pub failure_step: Option<usize>,
    pub predicted_cost: Option<f64>,
    /// Filter covariance before the last observation.
    pub final_pi: Vec<f64>,
    /// Reduced-coordinate closed forms, Ising only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ising_closed_form: Option<IsingClosedForm>,
}

fn coefficients(ctx: &Context, model: &dyn AgentModel, mf: &MeanFieldSolution) -> Result<(LqgCoefficients, DMatrix<f64>)> {
    let pi0 = ctx.config.initial_covariance();
    match ctx.config.lqg_coefficients {
        CoefficientSource::Extracted => Ok((extract_coefficients(model, mf)?, pi0)),
        CoefficientSource::IsingPrinted => {
            let p = ising_params(&ctx.config)?;
            let step = ising_printed_coefficients(p.0, p.1, p.2, mf.dt);
            let coef = LqgCoefficients::time_invariant(mf.dt, mf.n_steps, step, DMatrix::zeros(1, 1))?;
            let (_, project, _) = ising_reduction_maps(model.dims().obs_channels);
            Ok((coef, &project * pi0 * project.transpose()))
        }
    }
}

/// `(β, J, q)` of an Ising config.
fn ising_params(cfg: &ExperimentConfig) -> Result<(f64, f64, f64)> {
    let get = |k: &str| {
        cfg.model
            .params
            .get(k)
            .map(|n| n.0)
            .ok_or_else(|| Error::MissingParam(format!("model.params.{k}")))
    };
    Ok((get("beta")?, get("coupling")?, get("obs_rate")?))
}

fn lqg_for(ctx: &Context, model: &dyn AgentModel, mf: &MeanFieldSolution) -> Result<(LqgCoefficients, FilterAndGain)> {
    let (coef, pi0) = coefficients(ctx, model, mf)?;
    let l = coef.states();
    let lqg = solve_lqg(&coef, &DVector::zeros(l), &pi0)?;
    Ok((coef, lqg))
}

/// Writes `pi.csv`, `z.csv`, `gains.csv` and `lqg.json`.
pub fn solve_lqg_files(ctx: &Context) -> Result<LqgReport> {
    let model = ctx.model()?;
    let mf = ctx.meanfield()?;
    let (coef, lqg) = lqg_for(ctx, model.as_ref(), &mf)?;
    let dir = ctx.out_dir()?;
    let (l, m, c) = (coef.states(), coef.controls(), coef.channels());
    let n = coef.n_steps;
    let t = |k: usize| Cell::Real(k as f64 * coef.dt);
    let head = |rest: Vec<String>| -> Vec<String> { ["k".to_string(), "t".to_string()].into_iter().chain(rest).collect() };

    let mut w = CsvWriter::create(
        &dir.join("pi.csv"),
        &head([matrix_columns("prior", l, l), matrix_columns("posterior", l, l)].concat()),
    )?;
    for k in 0..=n {
        let mut cells = vec![Cell::Int(k as i64), t(k)];
        cells.extend(matrix_cells(&lqg.kalman.prior[k]));
        match lqg.kalman.posterior.get(k) {
            Some(p) => cells.extend(matrix_cells(p)),
            None => cells.extend(std::iter::repeat_n(Cell::Empty, l * l)),
        }
        w.row(&cells)?;
    }
    w.finish()?;

    let mut w = CsvWriter::create(&dir.join("z.csv"), &head(matrix_columns("Z", l, l)))?;
    for k in 0..=n {
        let mut cells = vec![Cell::Int(k as i64), t(k)];
        cells.extend(matrix_cells(&lqg.riccati.z[k]));
        w.row(&cells)?;
    }
    w.finish()?;

    let mut w = CsvWriter::create(
        &dir.join("gains.csv"),
        &head([matrix_columns("G", m, l), matrix_columns("K", l, c)].concat()),
    )?;
    for k in 0..n {
        let mut cells = vec![Cell::Int(k as i64), t(k)];
        match lqg.riccati.gains.get(k) {
            Some(g) => cells.extend(matrix_cells(g)),
            None => cells.extend(std::iter::repeat_n(Cell::Empty, m * l)),
        }
        cells.extend(matrix_cells(&lqg.kalman.gains[k]));
        w.row(&cells)?;
    }
    w.finish()?;

    let ising_closed_form = if ctx.config.model.name == "ising" {
        let (beta, coupling, q) = ising_params(&ctx.config)?;
        Some(ising_closed_form(beta, coupling, q)?)
    } else {
        None
    };
    let report = LqgReport {
        coefficients: ctx.config.lqg_coefficients,
        dimension: l,
        exists: lqg.riccati.exists,
        failure_step: lqg.riccati.failure_step,
        predicted_cost: lqg.predicted_cost,
        final_pi: lqg.kalman.prior[n].iter().cloned().collect(),
        ising_closed_form,
    };
    io::write_json(&dir.join("lqg.json"), &report)?;
    Ok(report)
}

fn controller(ctx: &Context, model: &dyn AgentModel, mf: &MeanFieldSolution) -> Result<(Controller, Option<f64>)> {
    match ctx.controller {
        ControllerKind::OpenLoop => Ok((Controller::open_loop(mf), None)),
        ControllerKind::Kalman => {
            if ctx.config.lqg_coefficients != CoefficientSource::Extracted {
                return Err(Error::InvalidParam {
                    name: "lqg_coefficients".into(),
                    reason: "the kalman controller needs coefficients extracted from the model".into(),
                });
            }
            let (coef, lqg) = lqg_for(ctx, model, mf)?;
            let predicted = lqg.predicted_cost;
            Ok((Controller::KalmanFeedback(KalmanFeedback::new(model, mf, &coef, &lqg)?), predicted))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub controller: &'static str,
    pub n_agents: u64,
    pub replicas: usize,
    pub base_seed: u64,
    pub dt: f64,
    pub n_steps: usize,
    pub mean_field_cost: f64,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// `N (Ĵ − J_MF)`.
    pub cost_gap: f64,
    pub cost_gap_stderr: f64,
    pub predicted_cost_gap: Option<f64>,
    pub clamps: usize,
}

/// Writes `episode.csv` (the replica with the base seed), `ensemble.csv` and `summary.json`.
pub fn simulate(ctx: &Context) -> Result<SimulationSummary> {
    let model = ctx.model()?;
    let mf = ctx.meanfield()?;
    let (ctrl, predicted) = controller(ctx, model.as_ref(), &mf)?;
    let cfg = ctx.sim_config(ctx.config.n_agents);
    let dir = ctx.out_dir()?.to_path_buf();
    let d = model.dims();

    let ep = run_episode(model.as_ref(), &ctrl, &cfg, ctx.config.base_seed)?;
    let header: Vec<String> = ["k", "t"]
        .iter()
        .map(|s| s.to_string())
        .chain(indexed("count", d.states))
        .chain(indexed("obs", d.obs_channels))
        .chain(indexed("control", d.controls))
        .chain(indexed("shat", d.states))
        .collect();
    let mut w = CsvWriter::create(&dir.join("episode.csv"), &header)?;
    for k in 0..=cfg.n_steps {
        let mut cells = vec![Cell::Int(k as i64), Cell::Real(k as f64 * cfg.dt)];
        cells.extend(ep.counts[k].iter().map(|&c| Cell::Int(c as i64)));
        // per-step observation counts, not the running totals
        match ep.obs.get(k) {
            Some(now) => {
                let before = if k == 0 { vec![0; now.len()] } else { ep.obs[k - 1].clone() };
                cells.extend(now.iter().zip(before).map(|(a, b)| Cell::Int((a - b) as i64)));
            }
            None => cells.extend(std::iter::repeat_n(Cell::Empty, d.obs_channels)),
        }
        match ep.controls.get(k) {
            Some(a) => cells.extend(real_cells(a.as_slice())),
            None => cells.extend(std::iter::repeat_n(Cell::Empty, d.controls)),
        }
        cells.extend(real_cells(ep.s_hat_prior[k].as_slice()));
        w.row(&cells)?;
    }
    w.finish()?;

    let stats = run_ensemble(model.as_ref(), &ctrl, &cfg, &ctx.ensemble_config(), &mf.states)?;
    let header: Vec<String> = ["k", "t"]
        .iter()
        .map(|s| s.to_string())
        .chain(indexed("mean_field", d.states))
        .chain(indexed("mean", d.states))
        .chain(indexed("fluct_var", d.states))
        .chain(["sq_dev".to_string(), "sq_dev_stderr".to_string()])
        .collect();
    let mut w = CsvWriter::create(&dir.join("ensemble.csv"), &header)?;
    for k in 0..=cfg.n_steps {
        let mut cells = vec![Cell::Int(k as i64), Cell::Real(k as f64 * cfg.dt)];
        cells.extend(real_cells(mf.states[k].as_slice()));
        cells.extend(real_cells(stats.mean_states[k].as_slice()));
        cells.extend(stats.fluct_cov[k].diagonal().iter().map(|&v| Cell::Real(v)));
        cells.push(Cell::Real(stats.sq_dev_mean[k]));
        cells.push(Cell::Real(stats.sq_dev_stderr[k]));
        w.row(&cells)?;
    }
    w.finish()?;

    let n = cfg.n_agents as f64;
    let summary = SimulationSummary {
        controller: ctrl.name(),
        n_agents: cfg.n_agents,
        replicas: stats.replicas,
        base_seed: ctx.config.base_seed,
        dt: cfg.dt,
        n_steps: cfg.n_steps,
        mean_field_cost: mf.cost,
        cost_mean: stats.cost_mean,
        cost_stderr: stats.cost_stderr,
        cost_gap: n * (stats.cost_mean - mf.cost),
        cost_gap_stderr: n * stats.cost_stderr,
        predicted_cost_gap: predicted,
        clamps: stats.clamps,
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes `scaling.csv` and `scaling.json` over the config's `n_list`.
pub fn scaling(ctx: &Context) -> Result<ScalingReport> {
    if ctx.config.n_list.is_empty() {
        return Err(Error::MissingParam("n_list".into()));
    }
    let model = ctx.model()?;
    let mf = ctx.meanfield()?;
    let (ctrl, _) = controller(ctx, model.as_ref(), &mf)?;
    let report = scaling_study(
        model.as_ref(),
        &ctrl,
        &ctx.sim_config(0),
        &ctx.config.n_list,
        &ctx.ensemble_config(),
        &mf.states,
        mf.cost,
    )?;
    let dir = ctx.out_dir()?;
    let header: Vec<String> = [
        "n_agents",
        "sup_sq_dev",
        "sup_sq_dev_stderr",
        "sup_step",
        "cost_mean",
        "cost_stderr",
        "cost_gap",
        "cost_gap_stderr",
        "clamps",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut w = CsvWriter::create(&dir.join("scaling.csv"), &header)?;
    for p in &report.points {
        w.row(&[
            Cell::Int(p.n_agents as i64),
            Cell::Real(p.sup_sq_dev),
            Cell::Real(p.sup_sq_dev_stderr),
            Cell::Int(p.sup_step as i64),
            Cell::Real(p.cost_mean),
            Cell::Real(p.cost_stderr),
            Cell::Real(p.cost_gap),
            Cell::Real(p.cost_gap_stderr),
            Cell::Int(p.clamps as i64),
        ])?;
    }
    w.finish()?;
    io::write_json(&dir.join("scaling.json"), &report)?;
    Ok(report)
}

/// Runs the acceptance criteria (all, or only `only`) and writes `acceptance.json`.
pub fn acceptance(out: &Path, seed: u64, only: Option<usize>) -> Result<Vec<Verdict>> {
    if let Some(id) = only {
        if !(1..=acceptance::CRITERIA).contains(&id) {
            return Err(Error::InvalidParam {
                name: "criterion".into(),
                reason: format!("must be between 1 and {}", acceptance::CRITERIA),
            });
        }
    }
    let ids: Vec<usize> = match only {
        Some(id) => vec![id],
        None => (1..=acceptance::CRITERIA).collect(),
    };
    let mut verdicts = Vec::with_capacity(ids.len());
    for id in ids {
        let v = acceptance::run(id, seed);
        println!("{}", v.line());
        verdicts.push(v);
    }
    fs::create_dir_all(out)?;
    io::write_json(&out.join("acceptance.json"), &verdicts)?;
    Ok(verdicts)
}
