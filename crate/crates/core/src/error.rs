use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The job-size MGF is infinite somewhere along the transfer curve.
    #[error("log-MGF domain exceeded at u = {u} (node {node})")]
    DomainExceeded { u: f64, node: usize },

    #[error("target is not rare: mean {mean:?} already lies in the target set {target:?}")]
    RarityViolated { mean: Vec<f64>, target: Vec<f64> },

    #[error("twist solver did not converge after {iterations} iterations (last iterate {last:?})")]
    NonConvergence { iterations: usize, last: Vec<f64> },

    #[error("matrix exponential overflowed")]
    Overflow,

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("ODE step size fell below {min_step} at t = {t}")]
    StepTooSmall { t: f64, min_step: f64 },

    #[error("background path has {jumps} jumps, more than the limit {limit}")]
    PathTooLong { jumps: usize, limit: usize },
}
