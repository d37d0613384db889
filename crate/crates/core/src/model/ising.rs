use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AgentModel, Derivs, Dims};
use crate::error::{Error, Result};

/// Smallest rate a projected Ising control may take (the cost has `log α`).
const MIN_RATE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsingParams {
    /// Inverse cost of deviating the rates from 1.
    pub beta: f64,
    /// External field favouring state 1.
    pub field: f64,
    /// Coupling; negative values penalize imbalance between the states.
    pub coupling: f64,
    /// Observation rate per agent.
    pub obs_rate: f64,
}

/// Two-state model whose two controls are exactly the transition rates
/// `0 → 1` and `1 → 0`, with an entropic control cost and Ising-type state
/// cost. Each agent is observed at rate `q` on the channel matching its state.
#[derive(Debug, Clone)]
pub struct IsingModel {
    pub params: IsingParams,
}

impl IsingModel {
    pub fn new(params: IsingParams) -> Result<Self> {
        if !(params.beta > 0.0) || !params.beta.is_finite() {
            return Err(Error::InvalidParam {
                name: "beta".into(),
                reason: format!("must be > 0, got {}", params.beta),
            });
        }
        if !(params.obs_rate >= 0.0) || !params.obs_rate.is_finite() {
            return Err(Error::InvalidParam {
                name: "obs_rate".into(),
                reason: format!("must be >= 0, got {}", params.obs_rate),
            });
        }
        for (name, v) in [("field", params.field), ("coupling", params.coupling)] {
            if !v.is_finite() {
                return Err(Error::InvalidParam {
                    name: name.into(),
                    reason: "must be finite".into(),
                });
            }
        }
        Ok(Self { params })
    }

    /// Reduced coordinate `Ŝ = Σ¹ − Σ⁰`.
    pub fn reduced_state(state: &[f64]) -> f64 {
        state[1] - state[0]
    }

    pub fn full_state(reduced: f64) -> [f64; 2] {
        [0.5 * (1.0 - reduced), 0.5 * (1.0 + reduced)]
    }

    /// Reduced costate `P̂ = (P¹ − P⁰)/2`, the conjugate of `Ŝ`.
    pub fn reduced_costate(costate: &[f64]) -> f64 {
        0.5 * (costate[1] - costate[0])
    }
}

impl AgentModel for IsingModel {
    fn name(&self) -> &str {
        "ising"
    }

    fn dims(&self) -> Dims {
        Dims {
            states: 2,
            controls: 2,
            obs_channels: if self.params.obs_rate > 0.0 { 2 } else { 0 },
        }
    }

    fn transition_rate(&self, from: usize, _to: usize, _state: &[f64], control: &[f64]) -> f64 {
        control[from]
    }

    fn observation_rate(&self, from: usize, channel: usize, _state: &[f64]) -> f64 {
        if from == channel {
            self.params.obs_rate
        } else {
            0.0
        }
    }

    fn running_cost(&self, s: &[f64], a: &[f64]) -> f64 {
        let p = &self.params;
        let d = s[1] - s[0];
        (s[0] * a[0] * (a[0].ln() - 1.0) + s[1] * a[1] * (a[1].ln() - 1.0)) / p.beta
            - p.field * d
            - 0.5 * p.coupling * d * d
    }

    fn terminal_cost(&self, _state: &[f64]) -> f64 {
        0.0
    }

    fn baseline_control(&self) -> DVector<f64> {
        DVector::from_element(2, 1.0)
    }

    fn transition_rate_derivs(&self, from: usize, to: usize, s: &[f64], a: &[f64]) -> Option<Derivs> {
        let mut grad = DVector::zeros(4);
        grad[2 + from] = 1.0;
        Some(Derivs {
            value: self.transition_rate(from, to, s, a),
            grad,
            hess: DMatrix::zeros(4, 4),
        })
    }

    fn observation_rate_grad(&self, _from: usize, _channel: usize, _state: &[f64]) -> Option<DVector<f64>> {
        Some(DVector::zeros(2))
    }

    fn running_cost_derivs(&self, s: &[f64], a: &[f64]) -> Option<Derivs> {
        let p = &self.params;
        let bi = 1.0 / p.beta;
        let d = s[1] - s[0];
        let (l0, l1) = (a[0].ln(), a[1].ln());
        let grad = DVector::from_vec(vec![
            bi * a[0] * (l0 - 1.0) + p.field + p.coupling * d,
            bi * a[1] * (l1 - 1.0) - p.field - p.coupling * d,
            bi * s[0] * l0,
            bi * s[1] * l1,
        ]);
        let mut hess = DMatrix::zeros(4, 4);
        hess[(0, 0)] = -p.coupling;
        hess[(1, 1)] = -p.coupling;
        hess[(0, 1)] = p.coupling;
        hess[(1, 0)] = p.coupling;
        hess[(0, 2)] = bi * l0;
        hess[(2, 0)] = bi * l0;
        hess[(1, 3)] = bi * l1;
        hess[(3, 1)] = bi * l1;
        hess[(2, 2)] = bi * s[0] / a[0];
        hess[(3, 3)] = bi * s[1] / a[1];
        Some(Derivs {
            value: self.running_cost(s, a),
            grad,
            hess,
        })
    }

    fn terminal_cost_derivs(&self, _state: &[f64]) -> Option<Derivs> {
        Some(Derivs {
            value: 0.0,
            grad: DVector::zeros(2),
            hess: DMatrix::zeros(2, 2),
        })
    }

    fn analytic_argmax(&self, _state: &[f64], costate: &[f64]) -> Option<Result<DVector<f64>>> {
        let x = self.params.beta * (costate[1] - costate[0]);
        Some(Ok(DVector::from_vec(vec![x.exp(), (-x).exp()])))
    }

    fn is_admissible(&self, control: &[f64]) -> bool {
        control.iter().all(|v| v.is_finite() && *v > 0.0)
    }

    fn project_control(&self, control: &mut [f64]) -> bool {
        let mut changed = false;
        for v in control.iter_mut() {
            if !(*v >= MIN_RATE) {
                *v = MIN_RATE;
                changed = true;
            }
        }
        changed
    }
}
