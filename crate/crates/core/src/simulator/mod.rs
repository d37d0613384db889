//! Discrete-time simulation of the N-agent jump process.
//!
//! Within step `k` a replica first draws observation counts with rates at
//! its current empirical distribution, then the controller picks the rates,
//! then transitions are drawn and the running cost is accrued.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluctuations::{FilterAndGain, LqgCoefficients};
use crate::meanfield::MeanFieldSolution;
use crate::model::{self, AgentModel};

mod ensemble;

pub use ensemble::{
    ols_slope, run_ensemble, scaling_study, EnsembleConfig, EnsembleStats, ScalingPoint, ScalingReport, Snapshot,
    SlopeFit,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SimReplica {
    pub counts: Vec<u64>,
    /// Cumulative observation counts per channel.
    pub obs_counts: Vec<u64>,
    pub step: usize,
    pub realized_cost: f64,
    pub seed: u64,
}

impl SimReplica {
    pub fn new(counts: Vec<u64>, channels: usize, seed: u64) -> Self {
        Self {
            counts,
            obs_counts: vec![0; channels],
            step: 0,
            realized_cost: 0.0,
            seed,
        }
    }

    pub fn n_agents(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn distribution(&self) -> Vec<f64> {
        let n = self.n_agents() as f64;
        self.counts.iter().map(|c| *c as f64 / n).collect()
    }
}

/// Generator for one step of one replica; keyed by the replica seed and the
/// step index so scheduling cannot change the draws.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Largest-remainder rounding of `n · s0` to integer counts summing to `n`.
pub fn round_counts(s0: &[f64], n: u64) -> Vec<u64> {
    let scaled: Vec<f64> = s0.iter().map(|s| s * n as f64).collect();
    let mut counts: Vec<u64> = scaled.iter().map(|v| v.floor().max(0.0) as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..s0.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned) as usize) {
        counts[i] += 1;
    }
    counts
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

/// Draw one step of observation counts at the replica's current state and
/// add them to its cumulative counts; returns the increments.
pub fn observe(model: &dyn AgentModel, replica: &mut SimReplica, dt: f64, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let d = model.dims();
    let state = replica.distribution();
    let mut inc = vec![0; d.obs_channels];
    for (ch, slot) in inc.iter_mut().enumerate() {
        for x in 0..d.states {
            let rate = model.observation_rate(x, ch, &state);
            *slot += poisson(rng, replica.counts[x] as f64 * rate * dt);
        }
    }
    for (c, i) in replica.obs_counts.iter_mut().zip(&inc) {
        *c += i;
    }
    inc
}

/// Draw transitions for one step: one multinomial per source state over its
/// targets and staying put. Accrues `L(Σᴺ, α) Δt`.
pub fn advance(
    model: &dyn AgentModel,
    replica: &mut SimReplica,
    control: &[f64],
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let l = model.dims().states;
    let state = replica.distribution();
    let mut targets: Vec<Vec<(usize, f64)>> = vec![Vec::new(); l];
    for (x, y) in model.transitions() {
        let p = model::rate_checked(model, x, y, &state, control)? * dt;
        if p > 0.0 {
            targets[x].push((y, p));
        }
    }
    let mut delta = vec![0i64; l];
    for (x, outs) in targets.iter().enumerate() {
        let total: f64 = outs.iter().map(|(_, p)| p).sum();
        if total >= 1.0 {
            return Err(Error::StepTooLarge {
                step: replica.step,
                state: x,
                value: total,
            });
        }
        let mut remaining = replica.counts[x];
        let mut mass = 1.0;
        for &(y, p) in outs {
            if remaining == 0 {
                break;
            }
            let cond = (p / mass).clamp(0.0, 1.0);
            let moved = Binomial::new(remaining, cond).expect("probability in [0, 1]").sample(rng);
            remaining -= moved;
            mass -= p;
            delta[x] -= moved as i64;
            delta[y] += moved as i64;
        }
    }
    replica.realized_cost += model.running_cost(&state, control) * dt;
    for (c, d) in replica.counts.iter_mut().zip(&delta) {
        *c = (*c as i64 + d) as u64;
    }
    replica.step += 1;
    Ok(())
}

/// One full step with a fixed control.
pub fn step(model: &dyn AgentModel, replica: &mut SimReplica, control: &[f64], dt: f64, rng: &mut ChaCha8Rng) -> Result<Vec<u64>> {
    let inc = observe(model, replica, dt, rng);
    advance(model, replica, control, dt, rng)?;
    Ok(inc)
}

/// Approximate Kalman-filter feedback around a mean-field solution.
#[derive(Debug, Clone)]
pub struct KalmanFeedback {
    pub mean_controls: Vec<DVector<f64>>,
    pub feedback_gains: Vec<DMatrix<f64>>,
    pub kalman_gains: Vec<DMatrix<f64>>,
    pub e: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub e_obs: Vec<DMatrix<f64>>,
    /// `b̃(S*_k) Δt`.
    pub mean_obs_increments: Vec<DVector<f64>>,
    pub s0_hat: DVector<f64>,
}

impl KalmanFeedback {
    pub fn new(model: &dyn AgentModel, mf: &MeanFieldSolution, coef: &LqgCoefficients, lqg: &FilterAndGain) -> Result<Self> {
        if !lqg.riccati.exists {
            return Err(Error::RiccatiNonExistent {
                step: lqg.riccati.failure_step.unwrap_or(0),
            });
        }
        let n = mf.n_steps;
        if coef.n_steps != n || lqg.kalman.gains.len() != n {
            return Err(Error::Dimension("gains and mean-field horizon differ".into()));
        }
        let mean_obs_increments = (0..n)
            .map(|k| Ok(model::obs_drift(model, mf.states[k].as_slice())? * mf.dt))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mean_controls: mf.controls.clone(),
            feedback_gains: lqg.riccati.gains.clone(),
            kalman_gains: lqg.kalman.gains.clone(),
            e: (0..n).map(|k| coef.step(k).e.clone()).collect(),
            b: (0..n).map(|k| coef.step(k).b.clone()).collect(),
            e_obs: (0..n).map(|k| coef.step(k).e_obs.clone()).collect(),
            mean_obs_increments,
            s0_hat: DVector::zeros(model.dims().states),
        })
    }
}

#[derive(Debug, Clone)]
pub enum Controller {
    OpenLoop { controls: Vec<DVector<f64>> },
    KalmanFeedback(KalmanFeedback),
}

impl Controller {
    pub fn open_loop(mf: &MeanFieldSolution) -> Self {
        Self::OpenLoop {
            controls: mf.controls.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::OpenLoop { .. } => "open-loop",
            Self::KalmanFeedback(_) => "kalman",
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Self::OpenLoop { controls } => controls.len(),
            Self::KalmanFeedback(c) => c.mean_controls.len(),
        }
    }

    pub fn initial_state(&self, l: usize) -> FilterState {
        let prior = match self {
            Self::KalmanFeedback(c) => c.s0_hat.clone(),
            Self::OpenLoop { .. } => DVector::zeros(l),
        };
        FilterState {
            posterior: prior.clone(),
            prior,
        }
    }
}

/// Filter estimate of the fluctuation `𝔰 = √N(Σᴺ − S*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    /// Estimate before the current step's observation.
    pub prior: DVector<f64>,
    /// Estimate after it.
    pub posterior: DVector<f64>,
}

/// Correct with the observation increment, choose the control, and predict
/// the next estimate. Returns the applied control and whether it was clamped.
pub fn kalman_controller_step(
    ctrl: &KalmanFeedback,
    model: &dyn AgentModel,
    filter: &mut FilterState,
    obs_increment: &[u64],
    k: usize,
    n_agents: u64,
) -> Result<(DVector<f64>, bool)> {
    let gain = ctrl.feedback_gains.get(k).ok_or(Error::MissingGain(k))?;
    let kgain = ctrl.kalman_gains.get(k).ok_or(Error::MissingGain(k))?;
    let root_n = (n_agents as f64).sqrt();
    let n = n_agents as f64;
    let measured = DVector::from_iterator(obs_increment.len(), obs_increment.iter().map(|c| *c as f64 / n));
    let innovation = (measured - &ctrl.mean_obs_increments[k]) * root_n - &ctrl.e_obs[k] * &filter.prior;
    filter.posterior = &filter.prior + kgain * innovation;
    let mean = &ctrl.mean_controls[k];
    let mut control = mean + gain * &filter.posterior / root_n;
    let clamped = model.project_control(control.as_mut_slice());
    let applied = (&control - mean) * root_n;
    filter.prior = &filter.posterior + &ctrl.e[k] * &filter.posterior + &ctrl.b[k] * applied;
    Ok((control, clamped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitialCondition {
    /// Largest-remainder rounding of `N · S0`.
    #[default]
    Rounded,
    /// Multinomial sample of `N` agents from `S0`.
    Multinomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_agents: u64,
    pub dt: f64,
    pub n_steps: usize,
    pub s0: Vec<f64>,
    #[serde(default)]
    pub init: InitialCondition,
}

fn initial_counts(cfg: &SimConfig, seed: u64) -> Vec<u64> {
    match cfg.init {
        InitialCondition::Rounded => round_counts(&cfg.s0, cfg.n_agents),
        InitialCondition::Multinomial => {
            // stream past any step index so the draw is independent of step 0
            let mut rng = step_rng(seed, usize::MAX);
            let mut remaining = cfg.n_agents;
            let mut mass = 1.0;
            let mut counts = vec![0; cfg.s0.len()];
            for (i, &p) in cfg.s0.iter().enumerate() {
                if i + 1 == cfg.s0.len() {
                    counts[i] = remaining;
                    break;
                }
                let x = Binomial::new(remaining, (p / mass).clamp(0.0, 1.0)).expect("probability").sample(&mut rng);
                counts[i] = x;
                remaining -= x;
                mass -= p;
            }
            counts
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Counts at steps `0..=n`.
    pub counts: Vec<Vec<u64>>,
    /// Cumulative observation counts after each step's draw, `0..n`.
    pub obs: Vec<Vec<u64>>,
    pub controls: Vec<DVector<f64>>,
    /// Prior estimates `0..=n`.
    pub s_hat_prior: Vec<DVector<f64>>,
    /// Posterior estimates `0..n`.
    pub s_hat_posterior: Vec<DVector<f64>>,
    pub realized_cost: f64,
    pub clamps: usize,
}

pub fn run_episode(model: &dyn AgentModel, controller: &Controller, cfg: &SimConfig, seed: u64) -> Result<Episode> {
    let d = model.dims();
    if cfg.n_agents == 0 {
        return Err(Error::InvalidParam {
            name: "n_agents".into(),
            reason: "must be >= 1".into(),
        });
    }
    model::check_simplex(&cfg.s0, d.states)?;
    if controller.horizon() < cfg.n_steps {
        return Err(Error::MissingGain(controller.horizon()));
    }
    let mut replica = SimReplica::new(initial_counts(cfg, seed), d.obs_channels, seed);
    let mut filter = controller.initial_state(d.states);
    let mut ep = Episode {
        counts: Vec::with_capacity(cfg.n_steps + 1),
        obs: Vec::with_capacity(cfg.n_steps),
        controls: Vec::with_capacity(cfg.n_steps),
        s_hat_prior: Vec::with_capacity(cfg.n_steps + 1),
        s_hat_posterior: Vec::with_capacity(cfg.n_steps),
        realized_cost: 0.0,
        clamps: 0,
    };
    for k in 0..cfg.n_steps {
        let mut rng = step_rng(seed, k);
        ep.counts.push(replica.counts.clone());
        ep.s_hat_prior.push(filter.prior.clone());
        let inc = observe(model, &mut replica, cfg.dt, &mut rng);
        let control = match controller {
            Controller::OpenLoop { controls } => controls[k].clone(),
            Controller::KalmanFeedback(c) => {
                let (a, clamped) = kalman_controller_step(c, model, &mut filter, &inc, k, cfg.n_agents)?;
                if clamped {
                    ep.clamps += 1;
                }
                a
            }
        };
        advance(model, &mut replica, control.as_slice(), cfg.dt, &mut rng)?;
        ep.obs.push(replica.obs_counts.clone());
        ep.s_hat_posterior.push(filter.posterior.clone());
        ep.controls.push(control);
    }
    if ep.clamps > 0 {
        log::info!("seed {seed}: control clamped on {} steps", ep.clamps);
    }
    replica.realized_cost += model.terminal_cost(&replica.distribution());
    ep.counts.push(replica.counts);
    ep.s_hat_prior.push(filter.prior);
    ep.realized_cost = replica.realized_cost;
    Ok(ep)
}

#[cfg(test)]
mod tests;
