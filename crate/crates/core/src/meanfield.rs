//! Deterministic mean-field optimal control in discrete time.
//!
//! The state is rolled forward with `S_{k+1} = S_k + b(S_k, A_k) Δt`, the
//! costate is propagated backward as the exact discrete adjoint of that
//! rollout, and the open-loop control sequence is improved by line-searched
//! descent on the resulting gradient.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, AgentModel, SIMPLEX_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldSolution {
    pub dt: f64,
    pub n_steps: usize,
    /// `S*`, `n_steps + 1` probability vectors.
    pub states: Vec<DVector<f64>>,
    /// `A*`, `n_steps` controls.
    pub controls: Vec<DVector<f64>>,
    /// `P*`, `n_steps + 1` costates.
    pub costates: Vec<DVector<f64>>,
    /// `U*`, cumulative mean observations, `n_steps + 1` rows starting at 0.
    pub observations: Vec<DVector<f64>>,
    pub cost: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    pub cost: f64,
}

pub fn rollout(model: &dyn AgentModel, s0: &[f64], controls: &[DVector<f64>], dt: f64) -> Result<Rollout> {
    let d = model.dims();
    model::check_simplex(s0, d.states)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidParam {
            name: "dt".into(),
            reason: format!("must be > 0, got {dt}"),
        });
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut observations = Vec::with_capacity(controls.len() + 1);
    let mut s = DVector::from_column_slice(s0);
    let mut u = DVector::zeros(d.obs_channels);
    let mut cost = 0.0;
    for (k, a) in controls.iter().enumerate() {
        if a.len() != d.controls {
            return Err(Error::Dimension(format!("control {k} has length {}", a.len())));
        }
        let (worst, exit) = model::max_exit_rate(model, s.as_slice(), a.as_slice())?;
        if exit * dt >= 1.0 {
            return Err(Error::StepTooLarge {
                step: k,
                state: worst,
                value: exit * dt,
            });
        }
        let b = model::drift_raw(model, s.as_slice(), a.as_slice())?;
        let bt = model::obs_drift_raw(model, s.as_slice())?;
        cost += model.running_cost(s.as_slice(), a.as_slice()) * dt;
        states.push(s.clone());
        observations.push(u.clone());
        s += b * dt;
        u += bt * dt;
        if let Some(v) = s.iter().find(|v| **v < -SIMPLEX_TOL || !v.is_finite()) {
            return Err(Error::SimplexViolation {
                step: k + 1,
                detail: format!("component {v}"),
            });
        }
    }
    cost += model.terminal_cost(s.as_slice());
    states.push(s);
    observations.push(u);
    if !cost.is_finite() {
        return Err(Error::NonFinite("rollout cost".into()));
    }
    Ok(Rollout {
        states,
        observations,
        cost,
    })
}

/// Backward costate recursion
/// `P_k = P_{k+1} + (D_S b(S_k, A_k)ᵀ P_{k+1} − D_S L(S_k, A_k)) Δt`,
/// `P_T = −D_S G(S_T)`, evaluated at the given controls.
pub fn costate(
    model: &dyn AgentModel,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    dt: f64,
) -> Result<Vec<DVector<f64>>> {
    let n = controls.len();
    if states.len() != n + 1 {
        return Err(Error::Dimension(format!("{} states for {} controls", states.len(), n)));
    }
    let l = model.dims().states;
    let mut p = vec![DVector::zeros(l); n + 1];
    p[n] = -model::terminal_cost_derivs(model, states[n].as_slice()).grad;
    for k in (0..n).rev() {
        let (s, a) = (states[k].as_slice(), controls[k].as_slice());
        let (ds_b, _) = model::drift_jacobians(model, s, a);
        let cost = model::running_cost_derivs(model, s, a);
        let next = &p[k + 1];
        let pk = next + (ds_b.transpose() * next - cost.grad.rows(0, l)) * dt;
        if pk.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("costate at step {k}")));
        }
        p[k] = pk;
    }
    Ok(p)
}

/// `D_{A_k} J = −(D_A b(S_k, A_k)ᵀ P_{k+1} − D_A L(S_k, A_k)) Δt`.
pub fn cost_gradient(
    model: &dyn AgentModel,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    costates: &[DVector<f64>],
    dt: f64,
) -> Result<Vec<DVector<f64>>> {
    let n = controls.len();
    if states.len() != n + 1 || costates.len() != n + 1 {
        return Err(Error::Dimension(format!(
            "{} states and {} costates for {} controls",
            states.len(),
            costates.len(),
            n
        )));
    }
    let l = model.dims().states;
    let m = model.dims().controls;
    Ok((0..n)
        .map(|k| {
            let (s, a) = (states[k].as_slice(), controls[k].as_slice());
            let (_, da_b) = model::drift_jacobians(model, s, a);
            let cost = model::running_cost_derivs(model, s, a);
            -(da_b.transpose() * &costates[k + 1] - cost.grad.rows(l, m)) * dt
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Steepest descent with Armijo backtracking.
    Armijo,
    /// Limited-memory BFGS directions with the same backtracking.
    Lbfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeOptions {
    pub max_iters: usize,
    /// Sup-norm tolerance on the gradient trajectory.
    pub tol: f64,
    pub step_rule: StepRule,
    /// Extra randomly perturbed starts; the best local minimum is kept.
    pub restarts: usize,
    pub restart_seed: u64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            tol: 1e-8,
            step_rule: StepRule::Armijo,
            restarts: 0,
            restart_seed: 0,
        }
    }
}

const ARMIJO_C: f64 = 1e-4;
const LBFGS_MEMORY: usize = 10;

/// Control sequence that maximizes the Hamiltonian with zero costate at
/// every step of the resulting rollout.
pub fn zero_costate_controls(model: &dyn AgentModel, s0: &[f64], dt: f64, n_steps: usize) -> Result<Vec<DVector<f64>>> {
    let l = model.dims().states;
    let zero = vec![0.0; l];
    let mut s = DVector::from_column_slice(s0);
    let mut prev: Option<DVector<f64>> = None;
    let mut out = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let mut sv = s.clone();
        model::renormalize(sv.as_mut_slice());
        let (_, a) = model::hamiltonian(model, sv.as_slice(), &zero, prev.as_ref().map(|a| a.as_slice()))?;
        s += model::drift_raw(model, s.as_slice(), a.as_slice())? * dt;
        prev = Some(a.clone());
        out.push(a);
    }
    Ok(out)
}

pub fn optimize(
    model: &dyn AgentModel,
    s0: &[f64],
    dt: f64,
    n_steps: usize,
    opts: &OptimizeOptions,
) -> Result<MeanFieldSolution> {
    let init = zero_costate_controls(model, s0, dt, n_steps)?;
    let mut best = optimize_from(model, s0, dt, init.clone(), opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.restart_seed);
    for _ in 0..opts.restarts {
        let mut start: Vec<DVector<f64>> = init
            .iter()
            .map(|a| {
                a.map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v * (0.5 * z).exp() + 0.1 * z
                })
            })
            .collect();
        for a in start.iter_mut() {
            model.project_control(a.as_mut_slice());
        }
        match optimize_from(model, s0, dt, start, opts) {
            Ok(sol) if sol.cost < best.cost => best = sol,
            Ok(_) => {}
            Err(e) => log::debug!("restart failed: {e}"),
        }
    }
    Ok(best)
}

struct Problem<'a> {
    model: &'a dyn AgentModel,
    s0: &'a [f64],
    dt: f64,
    m: usize,
}

impl Problem<'_> {
    fn unflatten(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        x.as_slice().chunks(self.m).map(DVector::from_column_slice).collect()
    }

    fn cost(&self, x: &DVector<f64>) -> Option<f64> {
        let controls = self.unflatten(x);
        if controls.iter().any(|a| !self.model.is_admissible(a.as_slice())) {
            return None;
        }
        rollout(self.model, self.s0, &controls, self.dt).ok().map(|r| r.cost)
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<(Rollout, Vec<DVector<f64>>, DVector<f64>)> {
        let controls = self.unflatten(x);
        let r = rollout(self.model, self.s0, &controls, self.dt)?;
        let p = costate(self.model, &r.states, &controls, self.dt)?;
        let g = cost_gradient(self.model, &r.states, &controls, &p, self.dt)?;
        let flat = DVector::from_iterator(x.len(), g.iter().flat_map(|v| v.iter().cloned()));
        Ok((r, p, flat))
    }
}

pub fn optimize_from(
    model: &dyn AgentModel,
    s0: &[f64],
    dt: f64,
    init: Vec<DVector<f64>>,
    opts: &OptimizeOptions,
) -> Result<MeanFieldSolution> {
    let m = model.dims().controls;
    let n_steps = init.len();
    let problem = Problem { model, s0, dt, m };
    let mut x = DVector::from_iterator(n_steps * m, init.iter().flat_map(|a| a.iter().cloned()));
    let (mut roll, mut p, mut g) = problem.evaluate(&x)?;
    let mut cost = roll.cost;
    let mut history: Vec<(DVector<f64>, DVector<f64>)> = Vec::new();
    let mut t_prev = 1.0;
    let mut iterations = 0;
    let mut grad_norm = g.amax();
    while grad_norm > opts.tol && iterations < opts.max_iters {
        let dir = match opts.step_rule {
            StepRule::Armijo => -&g,
            StepRule::Lbfgs => lbfgs_direction(&g, &history),
        };
        let (dir, slope) = {
            let slope = g.dot(&dir);
            if slope < 0.0 {
                (dir, slope)
            } else {
                history.clear();
                (-&g, -g.dot(&g))
            }
        };
        let t0 = match opts.step_rule {
            StepRule::Armijo => (t_prev * 2.0_f64).min(1e12),
            StepRule::Lbfgs if history.is_empty() => (1.0 / g.amax()).min(1.0),
            StepRule::Lbfgs => 1.0,
        };
        let mut t = t0;
        let mut accepted = None;
        let scale = 1.0 + x.amax();
        while t * dir.amax() > 1e-16 * scale {
            let cand = &x + &dir * t;
            if let Some(c) = problem.cost(&cand) {
                let rounding = 1e-13 * (1.0 + cost.abs());
                if c - cost <= ARMIJO_C * t * slope {
                    accepted = Some((cand.clone(), problem.evaluate(&cand)?));
                    break;
                }
                // near the optimum the required decrease drops below the
                // rounding error of the cost, so progress is judged by the
                // gradient instead
                if (ARMIJO_C * t * slope).abs() <= rounding && c - cost <= rounding {
                    let eval = problem.evaluate(&cand)?;
                    if eval.2.amax() < grad_norm {
                        accepted = Some((cand, eval));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((cand, (r2, p2, g2))) = accepted else {
            if !history.is_empty() {
                history.clear();
                continue;
            }
            return Err(Error::LineSearch { iter: iterations });
        };
        if opts.step_rule == StepRule::Lbfgs {
            let s = &cand - &x;
            let y = &g2 - &g;
            if s.dot(&y) > 1e-16 * s.norm() * y.norm() {
                history.push((s, y));
                if history.len() > LBFGS_MEMORY {
                    history.remove(0);
                }
            }
        }
        t_prev = t;
        x = cand;
        roll = r2;
        p = p2;
        g = g2;
        cost = roll.cost;
        grad_norm = g.amax();
        iterations += 1;
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("mean-field cost".into()));
    }
    let converged = grad_norm <= opts.tol;
    if !converged {
        log::warn!("mean-field optimizer stopped after {iterations} iterations with gradient {grad_norm:e}");
    }
    Ok(MeanFieldSolution {
        dt,
        n_steps,
        controls: problem.unflatten(&x),
        states: roll.states,
        costates: p,
        observations: roll.observations,
        cost,
        grad_norm,
        iterations,
        converged,
    })
}

fn lbfgs_direction(g: &DVector<f64>, history: &[(DVector<f64>, DVector<f64>)]) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y) in history.iter().rev() {
        let rho = 1.0 / y.dot(s);
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push((a, rho));
    }
    if let Some((s, y)) = history.last() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y), (a, rho)) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}

impl MeanFieldSolution {
    pub fn n_states(&self) -> usize {
        self.states[0].len()
    }

    /// `D_A 𝓗(S_k, A_k, P_{k+1})` at every step.
    pub fn first_order_residuals(&self, model: &dyn AgentModel) -> Vec<DVector<f64>> {
        (0..self.n_steps)
            .map(|k| {
                model::hamiltonian_control_derivs(
                    model,
                    self.states[k].as_slice(),
                    self.controls[k].as_slice(),
                    self.costates[k + 1].as_slice(),
                )
                .0
            })
            .collect()
    }
}
