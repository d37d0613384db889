//! Models read from a JSON description: affine transition rates, constant
//! observation rates and quadratic costs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AgentModel, Derivs, Dims};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineRate {
    pub from: usize,
    pub to: usize,
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub state_coef: Vec<f64>,
    #[serde(default)]
    pub control_coef: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRate {
    pub from: usize,
    pub channel: usize,
    pub rate: f64,
}

/// `½ zᵀ H z + gᵀ z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct QuadraticCost {
    #[serde(default)]
    pub hessian: Vec<Vec<f64>>,
    #[serde(default)]
    pub linear: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub n_states: usize,
    pub n_controls: usize,
    #[serde(default)]
    pub n_obs_channels: usize,
    pub transitions: Vec<AffineRate>,
    #[serde(default)]
    pub observations: Vec<ObservationRate>,
    #[serde(default)]
    pub running_cost: QuadraticCost,
    #[serde(default)]
    pub terminal_cost: QuadraticCost,
    /// Per-control `[lo, hi]`; unbounded when absent.
    #[serde(default)]
    pub control_bounds: Vec<[f64; 2]>,
    #[serde(default)]
    pub baseline_control: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TableModel {
    pub spec: TableSpec,
    run_hess: DMatrix<f64>,
    run_lin: DVector<f64>,
    term_hess: DMatrix<f64>,
    term_lin: DVector<f64>,
}

fn quad(cost: &QuadraticCost, n: usize, what: &str) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let hess = if cost.hessian.is_empty() {
        DMatrix::zeros(n, n)
    } else {
        if cost.hessian.len() != n || cost.hessian.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("{what}.hessian must be {n}x{n}")));
        }
        let h = DMatrix::from_fn(n, n, |i, j| cost.hessian[i][j]);
        if (&h - h.transpose()).amax() > 1e-12 {
            return Err(Error::Config(format!("{what}.hessian must be symmetric")));
        }
        h
    };
    let lin = if cost.linear.is_empty() {
        DVector::zeros(n)
    } else if cost.linear.len() != n {
        return Err(Error::Config(format!("{what}.linear must have length {n}")));
    } else {
        DVector::from_column_slice(&cost.linear)
    };
    Ok((hess, lin))
}

impl TableModel {
    pub fn new(mut spec: TableSpec) -> Result<Self> {
        let (l, m) = (spec.n_states, spec.n_controls);
        if l == 0 || m == 0 {
            return Err(Error::Config("n_states and n_controls must be positive".into()));
        }
        for t in spec.transitions.iter_mut() {
            if t.from >= l || t.to >= l || t.from == t.to {
                return Err(Error::Config(format!("invalid transition {} -> {}", t.from, t.to)));
            }
            if t.state_coef.is_empty() {
                t.state_coef = vec![0.0; l];
            }
            if t.control_coef.is_empty() {
                t.control_coef = vec![0.0; m];
            }
            if t.state_coef.len() != l || t.control_coef.len() != m {
                return Err(Error::Config(format!(
                    "transition {} -> {}: coefficient lengths must be {l} and {m}",
                    t.from, t.to
                )));
            }
        }
        for o in &spec.observations {
            if o.from >= l || o.channel >= spec.n_obs_channels || !(o.rate >= 0.0) {
                return Err(Error::Config(format!(
                    "invalid observation rate {} on {} -> channel {}",
                    o.rate, o.from, o.channel
                )));
            }
        }
        if !spec.control_bounds.is_empty() && spec.control_bounds.len() != m {
            return Err(Error::Config(format!("control_bounds must have {m} entries")));
        }
        if spec.baseline_control.is_empty() {
            spec.baseline_control = vec![0.0; m];
        } else if spec.baseline_control.len() != m {
            return Err(Error::Config(format!("baseline_control must have {m} entries")));
        }
        let (run_hess, run_lin) = quad(&spec.running_cost, l + m, "running_cost")?;
        let (term_hess, term_lin) = quad(&spec.terminal_cost, l, "terminal_cost")?;
        Ok(Self {
            spec,
            run_hess,
            run_lin,
            term_hess,
            term_lin,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(serde_json::from_str(&text)?)
    }

    /// Two states flipping at constant rate `rate` each way; one inert control
    /// with cost `½ α²` so that the control Hessian is positive.
    pub fn symmetric_two_state(rate: f64) -> Self {
        let t = |from, to| AffineRate {
            from,
            to,
            base: rate,
            state_coef: vec![],
            control_coef: vec![],
        };
        Self::new(TableSpec {
            n_states: 2,
            n_controls: 1,
            n_obs_channels: 0,
            transitions: vec![t(0, 1), t(1, 0)],
            observations: vec![],
            running_cost: QuadraticCost {
                hessian: vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]],
                linear: vec![],
            },
            terminal_cost: QuadraticCost::default(),
            control_bounds: vec![],
            baseline_control: vec![],
        })
        .expect("static spec is valid")
    }

    fn stacked(&self, s: &[f64], a: &[f64]) -> DVector<f64> {
        DVector::from_iterator(s.len() + a.len(), s.iter().chain(a.iter()).cloned())
    }
}

impl AgentModel for TableModel {
    fn name(&self) -> &str {
        "custom-file"
    }

    fn dims(&self) -> Dims {
        Dims {
            states: self.spec.n_states,
            controls: self.spec.n_controls,
            obs_channels: self.spec.n_obs_channels,
        }
    }

    fn transitions(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<_> = self.spec.transitions.iter().map(|t| (t.from, t.to)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }

    fn transition_rate(&self, from: usize, to: usize, s: &[f64], a: &[f64]) -> f64 {
        self.spec
            .transitions
            .iter()
            .filter(|t| t.from == from && t.to == to)
            .map(|t| {
                t.base
                    + t.state_coef.iter().zip(s).map(|(c, x)| c * x).sum::<f64>()
                    + t.control_coef.iter().zip(a).map(|(c, x)| c * x).sum::<f64>()
            })
            .sum()
    }

    fn observation_rate(&self, from: usize, channel: usize, _state: &[f64]) -> f64 {
        self.spec
            .observations
            .iter()
            .filter(|o| o.from == from && o.channel == channel)
            .map(|o| o.rate)
            .sum()
    }

    fn running_cost(&self, s: &[f64], a: &[f64]) -> f64 {
        let z = self.stacked(s, a);
        0.5 * z.dot(&(&self.run_hess * &z)) + self.run_lin.dot(&z)
    }

    fn terminal_cost(&self, s: &[f64]) -> f64 {
        let z = DVector::from_column_slice(s);
        0.5 * z.dot(&(&self.term_hess * &z)) + self.term_lin.dot(&z)
    }

    fn baseline_control(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.spec.baseline_control)
    }

    fn transition_rate_derivs(&self, from: usize, to: usize, s: &[f64], a: &[f64]) -> Option<Derivs> {
        let n = s.len() + a.len();
        let mut grad = DVector::zeros(n);
        for t in self.spec.transitions.iter().filter(|t| t.from == from && t.to == to) {
            for (k, c) in t.state_coef.iter().chain(t.control_coef.iter()).enumerate() {
                grad[k] += c;
            }
        }
        Some(Derivs {
            value: self.transition_rate(from, to, s, a),
            grad,
            hess: DMatrix::zeros(n, n),
        })
    }

    fn observation_rate_grad(&self, _from: usize, _channel: usize, s: &[f64]) -> Option<DVector<f64>> {
        Some(DVector::zeros(s.len()))
    }

    fn running_cost_derivs(&self, s: &[f64], a: &[f64]) -> Option<Derivs> {
        let z = self.stacked(s, a);
        Some(Derivs {
            value: self.running_cost(s, a),
            grad: &self.run_hess * &z + &self.run_lin,
            hess: self.run_hess.clone(),
        })
    }

    fn terminal_cost_derivs(&self, s: &[f64]) -> Option<Derivs> {
        let z = DVector::from_column_slice(s);
        Some(Derivs {
            value: self.terminal_cost(s),
            grad: &self.term_hess * &z + &self.term_lin,
            hess: self.term_hess.clone(),
        })
    }

    fn is_admissible(&self, control: &[f64]) -> bool {
        control.iter().enumerate().all(|(i, v)| {
            v.is_finite()
                && self
                    .spec
                    .control_bounds
                    .get(i)
                    .is_none_or(|[lo, hi]| *v >= *lo && *v <= *hi)
        })
    }

    fn project_control(&self, control: &mut [f64]) -> bool {
        let mut changed = false;
        for (v, [lo, hi]) in control.iter_mut().zip(self.spec.control_bounds.iter()) {
            let c = v.clamp(*lo, *hi);
            if c != *v {
                *v = c;
                changed = true;
            }
        }
        changed
    }
}
