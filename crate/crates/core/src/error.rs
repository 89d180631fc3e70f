use thiserror::Error;

/// Errors raised by the profile library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("precision exhausted after {doublings} doublings (last precision {bits} bits)")]
    PrecisionExhausted { doublings: u32, bits: u32 },

    #[error("explicit bit source for record {record} exhausted after {available} bits")]
    BitExhausted { record: usize, available: usize },

    #[error("{what}: n = {n} exceeds the cap {cap}")]
    CapExceeded { what: &'static str, n: u64, cap: u64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: u32, residual: f64 },

    #[error("degenerate variance: Var(B_{{{n},{k}}}) = 0")]
    DegenerateVariance { n: u64, k: u32 },

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
