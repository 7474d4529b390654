use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("generator did not saturate: {0}")]
    Saturation(String),
    #[error("internal consistency check failed: {0}")]
    Consistency(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("degenerate Matsubara decomposition: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;
