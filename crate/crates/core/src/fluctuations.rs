//! Linear-quadratic-Gaussian problem for the √N fluctuations around a
//! mean-field solution: coefficient extraction, the forward Kalman covariance
//! recursion, the backward Riccati recursion and the predicted cost.
//!
//! Timing within a step `k`: the observation increment measures `s_k`, the
//! filter corrects with the prior covariance `Π_k`, the control uses the
//! corrected estimate, and the state then advances with `(I + E_k)` and
//! `B_k`. The running cost is `sᵀQ s + 2 sᵀW a + aᵀR a` per step and the
//! terminal cost `sᵀF s`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::meanfield::MeanFieldSolution;
use crate::model::{self, AgentModel};

#[derive(Debug, Clone, PartialEq)]
pub struct StepCoefficients {
    pub r: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub e_obs: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub theta_obs: DMatrix<f64>,
}

impl StepCoefficients {
    pub fn states(&self) -> usize {
        self.e.nrows()
    }

    pub fn controls(&self) -> usize {
        self.r.nrows()
    }

    pub fn channels(&self) -> usize {
        self.e_obs.nrows()
    }

    fn check(&self) -> Result<()> {
        let (l, m, lo) = (self.states(), self.controls(), self.channels());
        let shapes = [
            ("R", &self.r, m, m),
            ("B", &self.b, l, m),
            ("E", &self.e, l, l),
            ("Q", &self.q, l, l),
            ("W", &self.w, l, m),
            ("Ẽ", &self.e_obs, lo, l),
            ("Θ", &self.theta, l, l),
            ("Θ̃", &self.theta_obs, lo, lo),
        ];
        for (name, mat, r, c) in shapes {
            if mat.shape() != (r, c) {
                return Err(Error::Dimension(format!("{name} is {:?}, expected ({r}, {c})", mat.shape())));
            }
        }
        Ok(())
    }

    /// Change of coordinates `s = embed · x`, `x = project · s`, observations
    /// combined by `obs_combine`.
    pub fn reduce(&self, embed: &DMatrix<f64>, project: &DMatrix<f64>, obs_combine: &DMatrix<f64>) -> Self {
        Self {
            r: self.r.clone(),
            b: project * &self.b,
            e: project * &self.e * embed,
            q: embed.transpose() * &self.q * embed,
            w: embed.transpose() * &self.w,
            e_obs: obs_combine * &self.e_obs * embed,
            theta: project * &self.theta * project.transpose(),
            theta_obs: obs_combine * &self.theta_obs * obs_combine.transpose(),
        }
    }
}

/// Per-step LQG coefficients. A single stored step with `n_steps > 1` is a
/// time-invariant problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LqgCoefficients {
    pub dt: f64,
    pub n_steps: usize,
    pub steps: Vec<StepCoefficients>,
    pub terminal: DMatrix<f64>,
}

impl LqgCoefficients {
    pub fn new(dt: f64, steps: Vec<StepCoefficients>, terminal: DMatrix<f64>) -> Result<Self> {
        let n_steps = steps.len();
        Self::build(dt, n_steps, steps, terminal)
    }

    pub fn time_invariant(dt: f64, n_steps: usize, step: StepCoefficients, terminal: DMatrix<f64>) -> Result<Self> {
        Self::build(dt, n_steps, vec![step], terminal)
    }

    fn build(dt: f64, n_steps: usize, steps: Vec<StepCoefficients>, terminal: DMatrix<f64>) -> Result<Self> {
        let Some(first) = steps.first() else {
            return Err(Error::Dimension("no steps".into()));
        };
        let (l, m, lo) = (first.states(), first.controls(), first.channels());
        for s in &steps {
            s.check()?;
            if (s.states(), s.controls(), s.channels()) != (l, m, lo) {
                return Err(Error::Dimension("steps have differing dimensions".into()));
            }
        }
        if terminal.shape() != (l, l) {
            return Err(Error::Dimension(format!("F is {:?}, expected ({l}, {l})", terminal.shape())));
        }
        Ok(Self {
            dt,
            n_steps,
            steps,
            terminal,
        })
    }

    pub fn step(&self, k: usize) -> &StepCoefficients {
        if self.steps.len() == 1 {
            &self.steps[0]
        } else {
            &self.steps[k]
        }
    }

    pub fn states(&self) -> usize {
        self.steps[0].states()
    }

    pub fn controls(&self) -> usize {
        self.steps[0].controls()
    }

    pub fn channels(&self) -> usize {
        self.steps[0].channels()
    }

    pub fn reduce(&self, embed: &DMatrix<f64>, project: &DMatrix<f64>, obs_combine: &DMatrix<f64>) -> Result<Self> {
        Self::build(
            self.dt,
            self.n_steps,
            self.steps.iter().map(|s| s.reduce(embed, project, obs_combine)).collect(),
            embed.transpose() * &self.terminal * embed,
        )
    }
}

/// Second-order expansion of the N-agent problem around `mf`.
pub fn extract_coefficients(model: &dyn AgentModel, mf: &MeanFieldSolution) -> Result<LqgCoefficients> {
    if !mf.converged {
        log::warn!(
            "extracting fluctuation coefficients around an unconverged mean-field solution (gradient {:e})",
            mf.grad_norm
        );
    }
    let d = model.dims();
    let (l, m) = (d.states, d.controls);
    let dt = mf.dt;
    let mut steps = Vec::with_capacity(mf.n_steps);
    for k in 0..mf.n_steps {
        let s = mf.states[k].as_slice();
        let a = mf.controls[k].as_slice();
        let p = mf.costates[k + 1].as_slice();
        let cost = model::running_cost_derivs(model, s, a);
        let pb = model::costate_drift_hessian(model, s, a, p);
        let half = linalg::symmetric((cost.hess - pb) * (0.5 * dt));
        let r = half.view((l, l), (m, m)).into_owned();
        let min_eig = linalg::min_eigenvalue(&r);
        if !(min_eig > 0.0) {
            return Err(Error::NotPositiveDefinite { step: k, min_eig });
        }
        let (ds_b, da_b) = model::drift_jacobians(model, s, a);
        let (theta, theta_obs) = model::noise_covariances(model, s, a)?;
        steps.push(StepCoefficients {
            r,
            b: da_b * dt,
            e: ds_b * dt,
            q: half.view((0, 0), (l, l)).into_owned(),
            w: half.view((0, l), (l, m)).into_owned(),
            e_obs: model::obs_drift_jacobian(model, s) * dt,
            theta: theta * dt,
            theta_obs: theta_obs * dt,
        });
    }
    let terminal = model::terminal_cost_derivs(model, mf.states[mf.n_steps].as_slice()).hess * 0.5;
    LqgCoefficients::new(dt, steps, linalg::symmetric(terminal))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrajectory {
    /// `Π_k`, covariance of `s_k` before the step-`k` observation, `n + 1` entries.
    pub prior: Vec<DMatrix<f64>>,
    /// `Π⁺_k`, after the step-`k` observation, `n` entries.
    pub posterior: Vec<DMatrix<f64>>,
    /// `K_k`, `l × l̃`; columns of skipped channels are zero.
    pub gains: Vec<DMatrix<f64>>,
}

/// Channels that carry information at this step; a zero `Ẽ` row makes the
/// channel pure noise.
fn active_channels(c: &StepCoefficients) -> Vec<usize> {
    (0..c.channels())
        .filter(|&j| c.e_obs.row(j).iter().any(|v| *v != 0.0))
        .collect()
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn select_square(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

/// Inverse of a PSD innovation covariance, falling back to the
/// pseudo-inverse for rank deficiency.
fn innovation_inverse(s: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    if let Some(inv) = linalg::spd_inverse(s) {
        return Ok(inv);
    }
    if !linalg::is_finite_matrix(s) {
        return Err(Error::SingularInnovation { step });
    }
    let eig = s.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let tol = 1e-12 * top.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|v| *v < -tol) || top <= 0.0 {
        return Err(Error::SingularInnovation { step });
    }
    let inv_vals = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose())
}

/// Observation update of one step: returns `(K, Π⁺)` from the prior `Π`.
pub fn kalman_update(c: &StepCoefficients, prior: &DMatrix<f64>, step: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let l = c.states();
    let mut gain = DMatrix::zeros(l, c.channels());
    let idx = active_channels(c);
    if idx.is_empty() {
        return Ok((gain, prior.clone()));
    }
    let h = select_rows(&c.e_obs, &idx);
    let v = select_square(&c.theta_obs, &idx);
    let s = linalg::symmetric(&h * prior * h.transpose() + &v);
    let k = prior * h.transpose() * innovation_inverse(&s, step)?;
    // Joseph form keeps the posterior PSD under rounding
    let a = DMatrix::identity(l, l) - &k * &h;
    let post = linalg::symmetric(&a * prior * a.transpose() + &k * &v * k.transpose());
    for (col, &j) in idx.iter().enumerate() {
        gain.set_column(j, &k.column(col));
    }
    Ok((gain, post))
}

pub fn kalman_forward(coef: &LqgCoefficients, pi0: &DMatrix<f64>) -> Result<KalmanTrajectory> {
    let l = coef.states();
    if pi0.shape() != (l, l) {
        return Err(Error::Dimension(format!("Π0 is {:?}, expected ({l}, {l})", pi0.shape())));
    }
    if linalg::min_eigenvalue(pi0) < -1e-12 {
        return Err(Error::NotPositiveDefinite {
            step: 0,
            min_eig: linalg::min_eigenvalue(pi0),
        });
    }
    let n = coef.n_steps;
    let mut prior = Vec::with_capacity(n + 1);
    let mut posterior = Vec::with_capacity(n);
    let mut gains = Vec::with_capacity(n);
    prior.push(linalg::symmetric(pi0.clone()));
    let id = DMatrix::identity(l, l);
    for k in 0..n {
        let c = coef.step(k);
        let (gain, post) = kalman_update(c, &prior[k], k)?;
        let a = &id + &c.e;
        let next = linalg::symmetric(&a * &post * a.transpose() + &c.theta);
        if !linalg::is_finite_matrix(&next) {
            return Err(Error::NonFinite(format!("filter covariance at step {}", k + 1)));
        }
        prior.push(next);
        posterior.push(post);
        gains.push(gain);
    }
    Ok(KalmanTrajectory {
        prior,
        posterior,
        gains,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// `Z_k`, `n + 1` entries; entries at or before a failure step are NaN.
    pub z: Vec<DMatrix<f64>>,
    /// Feedback gains `G_k` (`m × l`) with `a_k = G_k ŝ_k`.
    pub gains: Vec<DMatrix<f64>>,
    pub exists: bool,
    pub failure_step: Option<usize>,
}

pub const DIVERGENCE_BOUND: f64 = 1e12;

pub fn riccati_backward(coef: &LqgCoefficients) -> RiccatiSolution {
    let (l, m, n) = (coef.states(), coef.controls(), coef.n_steps);
    let mut z = vec![DMatrix::from_element(l, l, f64::NAN); n + 1];
    let mut gains = vec![DMatrix::from_element(m, l, f64::NAN); n];
    z[n] = coef.terminal.clone();
    let id = DMatrix::identity(l, l);
    for k in (0..n).rev() {
        let c = coef.step(k);
        let next = &z[k + 1];
        let a = &id + &c.e;
        let zb = next * &c.b;
        let mm = linalg::symmetric(c.b.transpose() * &zb + &c.r);
        let Some(chol) = mm.clone().cholesky() else {
            return failed(z, gains, k);
        };
        let cross = zb.transpose() * &a + c.w.transpose();
        let g = -chol.solve(&cross);
        let zk = linalg::symmetric(&c.q + a.transpose() * next * &a + cross.transpose() * &g);
        if !linalg::is_finite_matrix(&zk) || linalg::norm(&zk) > DIVERGENCE_BOUND {
            return failed(z, gains, k);
        }
        z[k] = zk;
        gains[k] = g;
    }
    RiccatiSolution {
        z,
        gains,
        exists: true,
        failure_step: None,
    }
}

fn failed(z: Vec<DMatrix<f64>>, gains: Vec<DMatrix<f64>>, step: usize) -> RiccatiSolution {
    log::info!("Riccati solution does not exist: failure at step {step}");
    RiccatiSolution {
        z,
        gains,
        exists: false,
        failure_step: Some(step),
    }
}

/// Expected fluctuation cost under the filter-plus-feedback policy:
/// `ŝ₀ᵀZ₀ŝ₀ + tr(Π₀Z₀) + Σ_k [tr(Π⁺_k G_kᵀ M_k G_k) + tr(Θ_k Z_{k+1})]`
/// with `M_k = B_kᵀZ_{k+1}B_k + R_k`.
pub fn predicted_fluctuation_cost(
    coef: &LqgCoefficients,
    kalman: &KalmanTrajectory,
    riccati: &RiccatiSolution,
    s0_hat: &DVector<f64>,
    pi0: &DMatrix<f64>,
) -> Result<f64> {
    if !riccati.exists {
        return Err(Error::RiccatiNonExistent {
            step: riccati.failure_step.unwrap_or(0),
        });
    }
    let z0 = &riccati.z[0];
    let mut total = (s0_hat.transpose() * z0 * s0_hat)[(0, 0)] + linalg::trace_product(pi0, z0);
    for k in 0..coef.n_steps {
        let c = coef.step(k);
        let next = &riccati.z[k + 1];
        let g = &riccati.gains[k];
        let mm = c.b.transpose() * next * &c.b + &c.r;
        total += linalg::trace_product(&kalman.posterior[k], &(g.transpose() * mm * g));
        total += linalg::trace_product(&c.theta, next);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterAndGain {
    pub kalman: KalmanTrajectory,
    pub riccati: RiccatiSolution,
    pub predicted_cost: Option<f64>,
}

pub fn solve_lqg(coef: &LqgCoefficients, s0_hat: &DVector<f64>, pi0: &DMatrix<f64>) -> Result<FilterAndGain> {
    let kalman = kalman_forward(coef, pi0)?;
    let riccati = riccati_backward(coef);
    let predicted_cost = if riccati.exists {
        Some(predicted_fluctuation_cost(coef, &kalman, &riccati, s0_hat, pi0)?)
    } else {
        None
    };
    Ok(FilterAndGain {
        kalman,
        riccati,
        predicted_cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsingClosedForm {
    pub pi: f64,
    pub z: Option<f64>,
    pub critical: bool,
    /// Nonzero equilibria `(S, P)` in the reduced coordinate, present past
    /// the critical coupling.
    pub equilibria: Vec<(f64, f64)>,
}

/// Continuous-time stationary values for the Ising model at `H = 0` in the
/// reduced coordinate.
pub fn ising_closed_form(beta: f64, coupling: f64, obs_rate: f64) -> Result<IsingClosedForm> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParam {
            name: "beta".into(),
            reason: format!("must be > 0, got {beta}"),
        });
    }
    if !(obs_rate >= 0.0) {
        return Err(Error::InvalidParam {
            name: "obs_rate".into(),
            reason: format!("must be >= 0, got {obs_rate}"),
        });
    }
    let bj = beta * coupling;
    let critical = bj >= 1.0;
    let z = (!critical).then(|| (-1.0 + (1.0 - bj).sqrt()) / (4.0 * beta));
    let equilibria = if critical {
        let s = (1.0 - 1.0 / (bj * bj)).max(0.0).sqrt();
        let p = 0.5 / beta * (bj * s).asinh();
        if s == 0.0 {
            vec![(0.0, 0.0)]
        } else {
            vec![(s, p), (-s, -p)]
        }
    } else {
        Vec::new()
    };
    Ok(IsingClosedForm {
        pi: 1.0 / (1.0 + (1.0 + obs_rate / 2.0).sqrt()),
        z,
        critical,
        equilibria,
    })
}

/// Maps for the Ising reduced coordinate `x = s¹ − s⁰`: state embedding,
/// projection and the observation-difference combination.
pub fn ising_reduction_maps(channels: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let embed = DMatrix::from_row_slice(2, 1, &[-0.5, 0.5]);
    let project = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
    let obs = if channels == 2 {
        DMatrix::from_row_slice(1, 2, &[-1.0, 1.0])
    } else {
        DMatrix::zeros(0, channels)
    };
    (embed, project, obs)
}

/// Reduced Ising coefficients as printed for the continuous-time analysis:
/// `E = −2`, `Ẽ = q`, `Θ = 2`, `Θ̃ = q`, `Q = −J/2`, `R = ¼β⁻¹ I₂`,
/// `B = (1, −1)`, each scaled by `Δt`.
pub fn ising_printed_coefficients(beta: f64, coupling: f64, obs_rate: f64, dt: f64) -> StepCoefficients {
    StepCoefficients {
        r: DMatrix::identity(2, 2) * (0.25 / beta * dt),
        b: DMatrix::from_row_slice(1, 2, &[dt, -dt]),
        e: DMatrix::from_element(1, 1, -2.0 * dt),
        q: DMatrix::from_element(1, 1, -coupling / 2.0 * dt),
        w: DMatrix::zeros(1, 2),
        e_obs: DMatrix::from_element(1, 1, obs_rate * dt),
        theta: DMatrix::from_element(1, 1, 2.0 * dt),
        theta_obs: DMatrix::from_element(1, 1, obs_rate * dt),
    }
}
