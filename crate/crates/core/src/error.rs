use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state is not on the probability simplex: {0}")]
    NotOnSimplex(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("time step too large at step {step}: exit rate * dt = {value} for state {state} (must be < 1)")]
    StepTooLarge { step: usize, state: usize, value: f64 },

    #[error("state left the simplex at step {step}: {detail}")]
    SimplexViolation { step: usize, detail: String },

    #[error("control {0:?} is outside the admissible set")]
    InadmissibleControl(Vec<f64>),

    #[error("Hamiltonian maximizer did not converge after {iters} iterations (gradient norm {grad_norm:e})")]
    MaximizerDiverged { iters: usize, grad_norm: f64 },

    #[error("Hamiltonian is unbounded in the control at this point")]
    UnboundedHamiltonian,

    #[error("line search failed at iteration {iter}: step underflow")]
    LineSearch { iter: usize },

    #[error("control cost Hessian R is not positive definite at step {step} (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { step: usize, min_eig: f64 },

    #[error("innovation covariance is singular at step {step}")]
    SingularInnovation { step: usize },

    #[error("Riccati solution does not exist (failed at step {step})")]
    RiccatiNonExistent { step: usize },

    #[error("invalid rate {value} for transition {from} -> {to}")]
    InvalidRate { from: usize, to: usize, value: f64 },

    #[error("missing gain for step {0}")]
    MissingGain(usize),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: String, reason: String },

    #[error("missing required parameter `{0}`")]
    MissingParam(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
