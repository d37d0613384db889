//! Finite-state agent models and the pointwise quantities derived from them.
//!
//! A model is described by its transition rates `β(σ, γ, Σ, α)`, observation
//! rates `β̃(σ, υ, Σ)`, running cost `L(Σ, α)` and terminal cost `G(Σ)`.
//! Everything else (mean drift, noise covariances, Hamiltonian and all the
//! derivatives needed downstream) is assembled here from those callbacks.
//!
//! Derivatives are taken with respect to the stacked variable `z = (Σ, α)`
//! of length `l + m`. Models may provide them analytically; otherwise the
//! central finite differences in [`fd`] are used.

pub mod fd;
mod ising;
mod sir;
mod table;

pub use ising::{IsingModel, IsingParams};
pub use sir::{SirModel, SirParams};
pub use table::{AffineRate, ObservationRate, QuadraticCost, TableModel, TableSpec};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance used when validating that a state is a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub states: usize,
    pub controls: usize,
    pub obs_channels: usize,
}

/// Value, gradient and Hessian of a scalar function.
#[derive(Debug, Clone)]
pub struct Derivs {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

pub trait AgentModel: Send + Sync {
    fn name(&self) -> &str;

    fn dims(&self) -> Dims;

    /// Rate at which a single agent jumps from `from` to `to != from`.
    fn transition_rate(&self, from: usize, to: usize, state: &[f64], control: &[f64]) -> f64;

    /// Rate at which a single agent in `from` produces an observation on `channel`.
    fn observation_rate(&self, from: usize, channel: usize, state: &[f64]) -> f64;

    fn running_cost(&self, state: &[f64], control: &[f64]) -> f64;

    fn terminal_cost(&self, state: &[f64]) -> f64;

    /// Pairs `(from, to)` whose rate may be nonzero. Defaults to every ordered pair.
    fn transitions(&self) -> Vec<(usize, usize)> {
        let l = self.dims().states;
        (0..l)
            .flat_map(|x| (0..l).filter(move |&y| y != x).map(move |y| (x, y)))
            .collect()
    }

    /// Control used when nothing better is known (rates at rest).
    fn baseline_control(&self) -> DVector<f64>;

    /// Derivatives of `β(from, to, ·)` with respect to `z = (Σ, α)`.
    fn transition_rate_derivs(
        &self,
        _from: usize,
        _to: usize,
        _state: &[f64],
        _control: &[f64],
    ) -> Option<Derivs> {
        None
    }

    /// Gradient of `β̃(from, channel, ·)` with respect to `Σ`.
    fn observation_rate_grad(&self, _from: usize, _channel: usize, _state: &[f64]) -> Option<DVector<f64>> {
        None
    }

    fn running_cost_derivs(&self, _state: &[f64], _control: &[f64]) -> Option<Derivs> {
        None
    }

    fn terminal_cost_derivs(&self, _state: &[f64]) -> Option<Derivs> {
        None
    }

    /// Closed-form maximizer of `α ↦ P·b(Σ, α) − L(Σ, α)`, if one is known.
    fn analytic_argmax(&self, _state: &[f64], _costate: &[f64]) -> Option<Result<DVector<f64>>> {
        None
    }

    fn is_admissible(&self, control: &[f64]) -> bool {
        control.iter().all(|v| v.is_finite())
    }

    /// Project a control onto the admissible set. Returns true if it changed.
    fn project_control(&self, _control: &mut [f64]) -> bool {
        false
    }
}

/// Wraps a model and hides its analytic derivatives, forcing the
/// finite-difference path.
pub struct FiniteDifference<M>(pub M);

impl<M: AgentModel> AgentModel for FiniteDifference<M> {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn dims(&self) -> Dims {
        self.0.dims()
    }
    fn transition_rate(&self, from: usize, to: usize, state: &[f64], control: &[f64]) -> f64 {
        self.0.transition_rate(from, to, state, control)
    }
    fn observation_rate(&self, from: usize, channel: usize, state: &[f64]) -> f64 {
        self.0.observation_rate(from, channel, state)
    }
    fn running_cost(&self, state: &[f64], control: &[f64]) -> f64 {
        self.0.running_cost(state, control)
    }
    fn terminal_cost(&self, state: &[f64]) -> f64 {
        self.0.terminal_cost(state)
    }
    fn transitions(&self) -> Vec<(usize, usize)> {
        self.0.transitions()
    }
    fn baseline_control(&self) -> DVector<f64> {
        self.0.baseline_control()
    }
    fn is_admissible(&self, control: &[f64]) -> bool {
        self.0.is_admissible(control)
    }
    fn project_control(&self, control: &mut [f64]) -> bool {
        self.0.project_control(control)
    }
}

/// Drift, observation drift and the two noise covariances at one point.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub drift: DVector<f64>,
    pub obs_drift: DVector<f64>,
    pub theta: DMatrix<f64>,
    pub theta_tilde: DMatrix<f64>,
}

pub fn check_simplex(state: &[f64], n_states: usize) -> Result<()> {
    if state.len() != n_states {
        return Err(Error::Dimension(format!(
            "state has length {}, model has {} states",
            state.len(),
            n_states
        )));
    }
    if let Some(v) = state.iter().find(|v| !v.is_finite() || **v < -SIMPLEX_TOL) {
        return Err(Error::NotOnSimplex(format!("component {v}")));
    }
    let sum: f64 = state.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotOnSimplex(format!("components sum to {sum}")));
    }
    Ok(())
}

fn check_control(model: &dyn AgentModel, control: &[f64]) -> Result<()> {
    if control.len() != model.dims().controls {
        return Err(Error::Dimension(format!(
            "control has length {}, model has {} controls",
            control.len(),
            model.dims().controls
        )));
    }
    Ok(())
}

/// Clamp negatives to zero and rescale onto the simplex.
pub fn renormalize(state: &mut [f64]) {
    for v in state.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let sum: f64 = state.iter().sum();
    if sum > 0.0 {
        state.iter_mut().for_each(|v| *v /= sum);
    }
}

pub(crate) fn rate_checked(model: &dyn AgentModel, from: usize, to: usize, state: &[f64], control: &[f64]) -> Result<f64> {
    let r = model.transition_rate(from, to, state, control);
    if !r.is_finite() || r < 0.0 {
        return Err(Error::InvalidRate { from, to, value: r });
    }
    Ok(r)
}

/// Drift without simplex validation; used inside rollouts and finite differences.
pub(crate) fn drift_raw(model: &dyn AgentModel, state: &[f64], control: &[f64]) -> Result<DVector<f64>> {
    let mut b = DVector::zeros(model.dims().states);
    for (x, y) in model.transitions() {
        let flux = state[x] * rate_checked(model, x, y, state, control)?;
        b[y] += flux;
        b[x] -= flux;
    }
    Ok(b)
}

/// Expected drift `bᵠ = Σ_{γ≠σ} (Σᵞ β(γ,σ) − Σᵠ β(σ,γ))`.
pub fn drift(model: &dyn AgentModel, state: &[f64], control: &[f64]) -> Result<DVector<f64>> {
    check_simplex(state, model.dims().states)?;
    check_control(model, control)?;
    drift_raw(model, state, control)
}

pub(crate) fn obs_drift_raw(model: &dyn AgentModel, state: &[f64]) -> Result<DVector<f64>> {
    let d = model.dims();
    let mut out = DVector::zeros(d.obs_channels);
    for ch in 0..d.obs_channels {
        for x in 0..d.states {
            let r = model.observation_rate(x, ch, state);
            if !r.is_finite() || r < 0.0 {
                return Err(Error::InvalidRate { from: x, to: ch, value: r });
            }
            out[ch] += r * state[x];
        }
    }
    Ok(out)
}

/// Mean observation rate `b̃ᵛ = Σ_σ β̃(σ,υ) Σᵠ`.
pub fn obs_drift(model: &dyn AgentModel, state: &[f64]) -> Result<DVector<f64>> {
    check_simplex(state, model.dims().states)?;
    obs_drift_raw(model, state)
}

pub(crate) fn noise_covariances_raw(
    model: &dyn AgentModel,
    state: &[f64],
    control: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let l = model.dims().states;
    let mut theta = DMatrix::zeros(l, l);
    for (x, y) in model.transitions() {
        let flux = state[x] * rate_checked(model, x, y, state, control)?;
        theta[(x, x)] += flux;
        theta[(y, y)] += flux;
        theta[(x, y)] -= flux;
        theta[(y, x)] -= flux;
    }
    let theta_tilde = DMatrix::from_diagonal(&obs_drift_raw(model, state)?);
    Ok((theta, theta_tilde))
}

/// Infinitesimal covariances of the state noise (`εεᵀ`) and of the
/// observation noise (`ε̃ε̃ᵀ`). State and observation noise are independent.
pub fn noise_covariances(
    model: &dyn AgentModel,
    state: &[f64],
    control: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_simplex(state, model.dims().states)?;
    check_control(model, control)?;
    noise_covariances_raw(model, state, control)
}

pub fn point_eval(model: &dyn AgentModel, state: &[f64], control: &[f64]) -> Result<PointEval> {
    let drift = drift(model, state, control)?;
    let obs_drift = obs_drift_raw(model, state)?;
    let (theta, theta_tilde) = noise_covariances_raw(model, state, control)?;
    Ok(PointEval {
        drift,
        obs_drift,
        theta,
        theta_tilde,
    })
}

fn stack(state: &[f64], control: &[f64]) -> Vec<f64> {
    state.iter().chain(control.iter()).cloned().collect()
}

pub fn rate_derivs(model: &dyn AgentModel, from: usize, to: usize, state: &[f64], control: &[f64]) -> Derivs {
    if let Some(d) = model.transition_rate_derivs(from, to, state, control) {
        return d;
    }
    let l = state.len();
    let f = |z: &[f64]| model.transition_rate(from, to, &z[..l], &z[l..]);
    fd::derivs(f, &stack(state, control))
}

pub fn running_cost_derivs(model: &dyn AgentModel, state: &[f64], control: &[f64]) -> Derivs {
    if let Some(d) = model.running_cost_derivs(state, control) {
        return d;
    }
    let l = state.len();
    let f = |z: &[f64]| model.running_cost(&z[..l], &z[l..]);
    fd::derivs(f, &stack(state, control))
}

pub fn terminal_cost_derivs(model: &dyn AgentModel, state: &[f64]) -> Derivs {
    if let Some(d) = model.terminal_cost_derivs(state) {
        return d;
    }
    fd::derivs(|s: &[f64]| model.terminal_cost(s), state)
}

/// Derivatives of every flux `Σˣ β(x, y)` with respect to `z`, paired with
/// the transition.
fn flux_derivs(model: &dyn AgentModel, state: &[f64], control: &[f64]) -> Vec<((usize, usize), Derivs)> {
    let n = state.len() + control.len();
    model
        .transitions()
        .into_iter()
        .map(|(x, y)| {
            let r = rate_derivs(model, x, y, state, control);
            let mut grad = r.grad.clone() * state[x];
            grad[x] += r.value;
            let mut hess = r.hess.clone() * state[x];
            for k in 0..n {
                hess[(x, k)] += r.grad[k];
                hess[(k, x)] += r.grad[k];
            }
            (
                (x, y),
                Derivs {
                    value: r.value * state[x],
                    grad,
                    hess,
                },
            )
        })
        .collect()
}

/// Jacobians `(D_S b, D_A b)` of the drift.
pub fn drift_jacobians(model: &dyn AgentModel, state: &[f64], control: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = state.len();
    let m = control.len();
    let mut jac = DMatrix::zeros(l, l + m);
    for ((x, y), f) in flux_derivs(model, state, control) {
        for k in 0..(l + m) {
            jac[(y, k)] += f.grad[k];
            jac[(x, k)] -= f.grad[k];
        }
    }
    (jac.columns(0, l).into_owned(), jac.columns(l, m).into_owned())
}

/// Hessian of `z ↦ P·b(z)`, size `(l+m) × (l+m)`.
pub fn costate_drift_hessian(model: &dyn AgentModel, state: &[f64], control: &[f64], costate: &[f64]) -> DMatrix<f64> {
    let n = state.len() + control.len();
    let mut h = DMatrix::zeros(n, n);
    for ((x, y), f) in flux_derivs(model, state, control) {
        h += f.hess * (costate[y] - costate[x]);
    }
    h
}

/// Jacobian of the observation drift with respect to the state, `l̃ × l`.
pub fn obs_drift_jacobian(model: &dyn AgentModel, state: &[f64]) -> DMatrix<f64> {
    let d = model.dims();
    let mut jac = DMatrix::zeros(d.obs_channels, d.states);
    for ch in 0..d.obs_channels {
        for x in 0..d.states {
            let r = model.observation_rate(x, ch, state);
            jac[(ch, x)] += r;
            let g = model
                .observation_rate_grad(x, ch, state)
                .unwrap_or_else(|| fd::gradient(|s: &[f64]| model.observation_rate(x, ch, s), state));
            for k in 0..d.states {
                jac[(ch, k)] += state[x] * g[k];
            }
        }
    }
    jac
}

/// `𝓗(S, A, P) = P·b(S, A) − L(S, A)`.
pub fn hamiltonian_value(model: &dyn AgentModel, state: &[f64], control: &[f64], costate: &[f64]) -> Result<f64> {
    let b = drift_raw(model, state, control)?;
    let v = costate.iter().zip(b.iter()).map(|(p, b)| p * b).sum::<f64>() - model.running_cost(state, control);
    Ok(v)
}

/// Gradient and Hessian of `α ↦ 𝓗(S, α, P)`.
pub fn hamiltonian_control_derivs(
    model: &dyn AgentModel,
    state: &[f64],
    control: &[f64],
    costate: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let l = state.len();
    let m = control.len();
    let (_, db_da) = drift_jacobians(model, state, control);
    let p = DVector::from_column_slice(costate);
    let cost = running_cost_derivs(model, state, control);
    let grad = db_da.transpose() * &p - cost.grad.rows(l, m);
    let hb = costate_drift_hessian(model, state, control, costate);
    let hess = hb.view((l, l), (m, m)) - cost.hess.view((l, l), (m, m));
    (grad, hess)
}

const NEWTON_MAX_ITERS: usize = 100;
const NEWTON_TOL: f64 = 1e-10;

/// Value of `H(S, P) = sup_α 𝓗(S, α, P)` and a maximizing control.
///
/// Uses the model's closed form when available, otherwise damped Newton
/// with Armijo backtracking started from `init` (or the baseline control).
pub fn hamiltonian(
    model: &dyn AgentModel,
    state: &[f64],
    costate: &[f64],
    init: Option<&[f64]>,
) -> Result<(f64, DVector<f64>)> {
    check_simplex(state, model.dims().states)?;
    let control = match model.analytic_argmax(state, costate) {
        Some(a) => a?,
        None => maximize_hamiltonian(model, state, costate, init)?,
    };
    let value = hamiltonian_value(model, state, control.as_slice(), costate)?;
    if !value.is_finite() {
        return Err(Error::UnboundedHamiltonian);
    }
    Ok((value, control))
}

fn maximize_hamiltonian(
    model: &dyn AgentModel,
    state: &[f64],
    costate: &[f64],
    init: Option<&[f64]>,
) -> Result<DVector<f64>> {
    let mut a = match init {
        Some(a) => DVector::from_column_slice(a),
        None => model.baseline_control(),
    };
    let eval = |a: &DVector<f64>| -> f64 {
        if !model.is_admissible(a.as_slice()) {
            return f64::NEG_INFINITY;
        }
        hamiltonian_value(model, state, a.as_slice(), costate).unwrap_or(f64::NEG_INFINITY)
    };
    let mut h = eval(&a);
    if !h.is_finite() {
        return Err(Error::InadmissibleControl(a.as_slice().to_vec()));
    }
    let mut grad_norm = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITERS {
        let (g, hess) = hamiltonian_control_derivs(model, state, a.as_slice(), costate);
        grad_norm = g.norm();
        if grad_norm <= NEWTON_TOL {
            return Ok(a);
        }
        let neg = -hess;
        let dir = match linalg::spd_inverse(&neg) {
            Some(inv) => inv * &g,
            None => g.clone(),
        };
        let slope = g.dot(&dir);
        // derivative noise (finite differences) can hold the gradient above
        // tolerance once the predicted ascent is below rounding of 𝓗 itself
        if slope <= 1e-14 * (1.0 + h.abs()) && grad_norm <= 1e-6 * (1.0 + h.abs()) {
            return Ok(a);
        }
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-16 {
            let cand = &a + &dir * t;
            let hc = eval(&cand);
            if hc.is_finite() && hc >= h + 1e-4 * t * slope {
                a = cand;
                h = hc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if h > 1e300 || a.norm() > 1e12 {
            return Err(Error::UnboundedHamiltonian);
        }
        if !accepted {
            // no ascent possible in floating point; accept if stationary enough
            let (g, _) = hamiltonian_control_derivs(model, state, a.as_slice(), costate);
            if g.norm() <= 1e-8 {
                return Ok(a);
            }
            break;
        }
    }
    Err(Error::MaximizerDiverged {
        iters: NEWTON_MAX_ITERS,
        grad_norm,
    })
}

/// Largest total exit rate `Σ_γ β(σ,γ)` over source states.
pub fn max_exit_rate(model: &dyn AgentModel, state: &[f64], control: &[f64]) -> Result<(usize, f64)> {
    let l = model.dims().states;
    let mut exit = vec![0.0; l];
    for (x, y) in model.transitions() {
        exit[x] += rate_checked(model, x, y, state, control)?;
    }
    Ok(exit
        .into_iter()
        .enumerate()
        .fold((0, 0.0), |best, (i, v)| if v > best.1 { (i, v) } else { best }))
}

#[cfg(test)]
mod tests;
