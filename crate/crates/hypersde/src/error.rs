use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("kernel solver did not converge after {iterations} sweeps (last update {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("transport speeds {0} and {1} coincide")]
    DegenerateSpeeds(usize, usize),
    #[error("pair is not controllable: rank {rank} < {expected}")]
    NotControllable { rank: usize, expected: usize },
    #[error("non-finite sample on path {0}")]
    NonFinite(usize),
    #[error("history does not cover the requested window: {0}")]
    ShortHistory(String),
    #[error("ill-conditioned Gramian (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("{divergent} of {paths} paths diverged")]
    Divergence { divergent: usize, paths: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
