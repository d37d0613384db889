use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AgentModel, Derivs, Dims};
use crate::error::{Error, Result};

const MIN_CONTROL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirParams {
    /// Baseline infection rate `b`; the uncontrolled contact rate.
    pub base_rate: f64,
    /// Recovery rate.
    pub recovery: f64,
    /// Testing rate of infected agents.
    pub test_rate: f64,
    /// Running cost per unit of infected fraction.
    pub infection_cost: f64,
    /// Scale of the cost of moving the contact rate away from `b`.
    pub control_cost: f64,
}

impl SirParams {
    pub fn paper_defaults() -> Self {
        Self {
            base_rate: 0.87,
            recovery: 0.217,
            test_rate: 1.0 / 3.0,
            infection_cost: 8000.0,
            control_cost: 100.0,
        }
    }
}

/// Susceptible / infectious / recovered with a single contact-rate control
/// and testing of infected agents as the only observation channel.
#[derive(Debug, Clone)]
pub struct SirModel {
    pub params: SirParams,
}

impl SirModel {
    pub fn new(params: SirParams) -> Result<Self> {
        let positive = [
            ("base_rate", params.base_rate),
            ("recovery", params.recovery),
            ("infection_cost", params.infection_cost),
            ("control_cost", params.control_cost),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam {
                    name: name.into(),
                    reason: format!("must be > 0, got {v}"),
                });
            }
        }
        if !(params.test_rate >= 0.0) || !params.test_rate.is_finite() {
            return Err(Error::InvalidParam {
                name: "test_rate".into(),
                reason: format!("must be >= 0, got {}", params.test_rate),
            });
        }
        Ok(Self { params })
    }

    /// Closed-form optimal control `A = bk / (k − b S⁰S¹ (P¹ − P⁰))`.
    pub fn optimal_control(&self, state: &[f64], costate: &[f64]) -> Result<f64> {
        let p = &self.params;
        let denom = p.control_cost - p.base_rate * state[0] * state[1] * (costate[1] - costate[0]);
        if !(denom > 0.0) {
            return Err(Error::UnboundedHamiltonian);
        }
        Ok(p.base_rate * p.control_cost / denom)
    }
}

impl AgentModel for SirModel {
    fn name(&self) -> &str {
        "sir"
    }

    fn dims(&self) -> Dims {
        Dims {
            states: 3,
            controls: 1,
            obs_channels: 1,
        }
    }

    fn transitions(&self) -> Vec<(usize, usize)> {
        vec![(0, 1), (1, 2)]
    }

    fn transition_rate(&self, from: usize, to: usize, state: &[f64], control: &[f64]) -> f64 {
        match (from, to) {
            (0, 1) => control[0] * state[1],
            (1, 2) => self.params.recovery,
            _ => 0.0,
        }
    }

    fn observation_rate(&self, from: usize, _channel: usize, _state: &[f64]) -> f64 {
        if from == 1 {
            self.params.test_rate
        } else {
            0.0
        }
    }

    fn running_cost(&self, state: &[f64], control: &[f64]) -> f64 {
        let p = &self.params;
        let r = control[0] / p.base_rate;
        p.control_cost * (-r.ln() + r - 1.0) + p.infection_cost * state[1]
    }

    fn terminal_cost(&self, _state: &[f64]) -> f64 {
        0.0
    }

    fn baseline_control(&self) -> DVector<f64> {
        DVector::from_element(1, self.params.base_rate)
    }

    fn transition_rate_derivs(&self, from: usize, to: usize, state: &[f64], control: &[f64]) -> Option<Derivs> {
        let mut grad = DVector::zeros(4);
        let mut hess = DMatrix::zeros(4, 4);
        if (from, to) == (0, 1) {
            grad[1] = control[0];
            grad[3] = state[1];
            hess[(1, 3)] = 1.0;
            hess[(3, 1)] = 1.0;
        }
        Some(Derivs {
            value: self.transition_rate(from, to, state, control),
            grad,
            hess,
        })
    }

    fn observation_rate_grad(&self, _from: usize, _channel: usize, _state: &[f64]) -> Option<DVector<f64>> {
        Some(DVector::zeros(3))
    }

    fn running_cost_derivs(&self, state: &[f64], control: &[f64]) -> Option<Derivs> {
        let p = &self.params;
        let a = control[0];
        let mut grad = DVector::zeros(4);
        grad[1] = p.infection_cost;
        grad[3] = p.control_cost * (-1.0 / a + 1.0 / p.base_rate);
        let mut hess = DMatrix::zeros(4, 4);
        hess[(3, 3)] = p.control_cost / (a * a);
        Some(Derivs {
            value: self.running_cost(state, control),
            grad,
            hess,
        })
    }

    fn terminal_cost_derivs(&self, _state: &[f64]) -> Option<Derivs> {
        Some(Derivs {
            value: 0.0,
            grad: DVector::zeros(3),
            hess: DMatrix::zeros(3, 3),
        })
    }

    fn analytic_argmax(&self, state: &[f64], costate: &[f64]) -> Option<Result<DVector<f64>>> {
        Some(self.optimal_control(state, costate).map(|a| DVector::from_element(1, a)))
    }

    fn is_admissible(&self, control: &[f64]) -> bool {
        control[0].is_finite() && control[0] > 0.0
    }

    fn project_control(&self, control: &mut [f64]) -> bool {
        if !(control[0] >= MIN_CONTROL) {
            control[0] = MIN_CONTROL;
            true
        } else {
            false
        }
    }
}
