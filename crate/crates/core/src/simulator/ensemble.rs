use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{run_episode, Controller, SimConfig};
use crate::error::{Error, Result};
use crate::model::AgentModel;

/// Replicas simulated in parallel before their statistics are folded in, in
/// replica order.
const BLOCK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EnsembleConfig {
    pub replicas: usize,
    pub base_seed: u64,
    /// Steps at which per-replica fluctuation samples are kept.
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
    /// Worker threads; `None` uses the global pool. Results do not depend on it.
    #[serde(default)]
    pub threads: Option<usize>,
}

/// Per-replica samples at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    /// `√N(Σᴺ_k − S*_k)` per replica.
    pub fluct: Vec<DVector<f64>>,
    /// Prior filter estimate per replica (empty for open loop).
    pub s_hat: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub n_agents: u64,
    pub replicas: usize,
    pub dt: f64,
    pub n_steps: usize,
    pub mean_states: Vec<DVector<f64>>,
    /// Mean and unbiased covariance of `√N(Σᴺ_k − S*_k)`.
    pub fluct_mean: Vec<DVector<f64>>,
    pub fluct_cov: Vec<DMatrix<f64>>,
    /// `E|Σᴺ_k − S*_k|²` and its standard error.
    pub sq_dev_mean: Vec<f64>,
    pub sq_dev_stderr: Vec<f64>,
    /// Covariance of the prior filter error `𝔰 − ŝ` (feedback only).
    pub filter_err_cov: Option<Vec<DMatrix<f64>>>,
    /// `E[(𝔰 − ŝ) ŝᵀ]` (feedback only).
    pub filter_cross: Option<Vec<DMatrix<f64>>>,
    pub costs: Vec<f64>,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    pub clamps: usize,
    pub snapshots: Vec<Snapshot>,
}

struct Moments {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn cov(&self) -> DMatrix<f64> {
        if self.n < 2 {
            return DMatrix::zeros(self.mean.len(), self.mean.len());
        }
        let c = &self.m2 / (self.n - 1) as f64;
        crate::linalg::symmetric(c)
    }
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

struct ReplicaSummary {
    states: Vec<DVector<f64>>,
    fluct: Vec<DVector<f64>>,
    s_hat: Option<Vec<DVector<f64>>>,
    cost: f64,
    clamps: usize,
}

fn summarize(
    model: &dyn AgentModel,
    controller: &Controller,
    cfg: &SimConfig,
    reference: &[DVector<f64>],
    seed: u64,
) -> Result<ReplicaSummary> {
    let ep = run_episode(model, controller, cfg, seed)?;
    let n = cfg.n_agents as f64;
    let states: Vec<DVector<f64>> = ep
        .counts
        .iter()
        .map(|c| DVector::from_iterator(c.len(), c.iter().map(|v| *v as f64 / n)))
        .collect();
    let fluct = states.iter().zip(reference).map(|(s, r)| (s - r) * n.sqrt()).collect();
    let s_hat = matches!(controller, Controller::KalmanFeedback(_)).then_some(ep.s_hat_prior);
    Ok(ReplicaSummary {
        states,
        fluct,
        s_hat,
        cost: ep.realized_cost,
        clamps: ep.clamps,
    })
}

pub fn run_ensemble(
    model: &dyn AgentModel,
    controller: &Controller,
    cfg: &SimConfig,
    ens: &EnsembleConfig,
    reference: &[DVector<f64>],
) -> Result<EnsembleStats> {
    if ens.replicas < 2 {
        return Err(Error::InvalidParam {
            name: "replicas".into(),
            reason: format!("need at least 2, got {}", ens.replicas),
        });
    }
    if reference.len() < cfg.n_steps + 1 {
        return Err(Error::Dimension(format!(
            "reference path has {} entries, need {}",
            reference.len(),
            cfg.n_steps + 1
        )));
    }
    match ens.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| ensemble_inner(model, controller, cfg, ens, reference)),
        None => ensemble_inner(model, controller, cfg, ens, reference),
    }
}

fn ensemble_inner(
    model: &dyn AgentModel,
    controller: &Controller,
    cfg: &SimConfig,
    ens: &EnsembleConfig,
    reference: &[DVector<f64>],
) -> Result<EnsembleStats> {
    let l = model.dims().states;
    let steps = cfg.n_steps + 1;
    let feedback = matches!(controller, Controller::KalmanFeedback(_));
    let n = cfg.n_agents as f64;
    let mut state_mom: Vec<Moments> = (0..steps).map(|_| Moments::new(l)).collect();
    let mut fluct_mom: Vec<Moments> = (0..steps).map(|_| Moments::new(l)).collect();
    let mut err_mom: Vec<Moments> = (0..steps).map(|_| Moments::new(l)).collect();
    let mut cross: Vec<DMatrix<f64>> = vec![DMatrix::zeros(l, l); steps];
    let mut sq_dev: Vec<Vec<f64>> = vec![Vec::with_capacity(ens.replicas); steps];
    let mut snapshots: Vec<Snapshot> = ens
        .snapshot_steps
        .iter()
        .filter(|&&k| k < steps)
        .map(|&k| Snapshot {
            step: k,
            fluct: Vec::new(),
            s_hat: Vec::new(),
        })
        .collect();
    let mut costs = Vec::with_capacity(ens.replicas);
    let mut clamps = 0;
    for start in (0..ens.replicas).step_by(BLOCK) {
        let end = (start + BLOCK).min(ens.replicas);
        let block: Vec<Result<ReplicaSummary>> = (start..end)
            .into_par_iter()
            .map(|i| summarize(model, controller, cfg, reference, ens.base_seed.wrapping_add(i as u64)))
            .collect();
        for r in block {
            let r = r?;
            for k in 0..steps {
                state_mom[k].push(&r.states[k]);
                fluct_mom[k].push(&r.fluct[k]);
                sq_dev[k].push(r.fluct[k].norm_squared() / n);
                if let Some(sh) = &r.s_hat {
                    let err = &r.fluct[k] - &sh[k];
                    cross[k] += &err * sh[k].transpose();
                    err_mom[k].push(&err);
                }
            }
            for snap in snapshots.iter_mut() {
                snap.fluct.push(r.fluct[snap.step].clone());
                if let Some(sh) = &r.s_hat {
                    snap.s_hat.push(sh[snap.step].clone());
                }
            }
            costs.push(r.cost);
            clamps += r.clamps;
        }
    }
    let (sq_dev_mean, sq_dev_stderr): (Vec<f64>, Vec<f64>) = sq_dev.iter().map(|xs| mean_stderr(xs)).unzip();
    let (cost_mean, cost_stderr) = mean_stderr(&costs);
    let m = ens.replicas as f64;
    Ok(EnsembleStats {
        n_agents: cfg.n_agents,
        replicas: ens.replicas,
        dt: cfg.dt,
        n_steps: cfg.n_steps,
        mean_states: state_mom.iter().map(|s| s.mean.clone()).collect(),
        fluct_mean: fluct_mom.iter().map(|s| s.mean.clone()).collect(),
        fluct_cov: fluct_mom.iter().map(Moments::cov).collect(),
        sq_dev_mean,
        sq_dev_stderr,
        filter_err_cov: feedback.then(|| err_mom.iter().map(Moments::cov).collect()),
        filter_cross: feedback.then(|| cross.iter().map(|c| c / m).collect()),
        costs,
        cost_mean,
        cost_stderr,
        clamps,
        snapshots,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// 95% confidence interval from the t distribution with `n − 2` degrees
    /// of freedom.
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Ordinary least squares of `y` on `x`. `None` with fewer than three points
/// or a degenerate design.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<SlopeFit> {
    let n = x.len();
    if n < 3 || y.len() != n || x.iter().chain(y).any(|v| !v.is_finite()) {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let stderr = (rss / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0).ok()?.inverse_cdf(0.975);
    Some(SlopeFit {
        slope,
        intercept,
        stderr,
        ci_low: slope - t * stderr,
        ci_high: slope + t * stderr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub n_agents: u64,
    /// `sup_k E|Σᴺ_k − S*_k|²` and the standard error at the maximizing step.
    pub sup_sq_dev: f64,
    pub sup_sq_dev_stderr: f64,
    pub sup_step: usize,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// `N (Ĵᴺ − J^MF)` and its standard error.
    pub cost_gap: f64,
    pub cost_gap_stderr: f64,
    pub clamps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub controller: String,
    pub points: Vec<ScalingPoint>,
    /// Log-log slope of the sup deviation against `N`; absent when undefined.
    pub slope: Option<SlopeFit>,
}

pub fn scaling_study(
    model: &dyn AgentModel,
    controller: &Controller,
    cfg: &SimConfig,
    n_list: &[u64],
    ens: &EnsembleConfig,
    reference: &[DVector<f64>],
    mean_field_cost: f64,
) -> Result<ScalingReport> {
    if n_list.len() < 3 {
        return Err(Error::InvalidParam {
            name: "n_list".into(),
            reason: "need at least three population sizes".into(),
        });
    }
    let mut points = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let c = SimConfig {
            n_agents: n,
            ..cfg.clone()
        };
        let stats = run_ensemble(model, controller, &c, ens, reference)?;
        let (sup_step, sup) = stats
            .sq_dev_mean
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, v)| if *v > b.1 { (k, *v) } else { b });
        let nf = n as f64;
        points.push(ScalingPoint {
            n_agents: n,
            sup_sq_dev: sup,
            sup_sq_dev_stderr: stats.sq_dev_stderr[sup_step],
            sup_step,
            cost_mean: stats.cost_mean,
            cost_stderr: stats.cost_stderr,
            cost_gap: nf * (stats.cost_mean - mean_field_cost),
            cost_gap_stderr: nf * stats.cost_stderr,
            clamps: stats.clamps,
        });
    }
    let slope = if points.iter().all(|p| p.sup_sq_dev > 0.0) {
        let x: Vec<f64> = points.iter().map(|p| (p.n_agents as f64).ln()).collect();
        let y: Vec<f64> = points.iter().map(|p| p.sup_sq_dev.ln()).collect();
        ols_slope(&x, &y)
    } else {
        None
    };
    Ok(ScalingReport {
        controller: controller.name().to_string(),
        points,
        slope,
    })
}
