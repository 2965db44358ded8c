use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quadrature did not converge: estimated error {achieved:e}, requested {requested:e}")]
    NonConvergence { achieved: f64, requested: f64 },
    #[error("iteration diverged: contraction factor {factor:.4}")]
    Divergence { factor: f64 },
    #[error("maximum iterations ({iters}) exceeded, last contraction estimate {factor:.4}")]
    MaxIterations { iters: usize, factor: f64 },
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("particle cap {cap} exceeded")]
    ParticleCap { cap: usize },
    #[error("config error at {path}: {reason}")]
    Config { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
