use thiserror::Error;

/// Failure modes shared by every simulator and oracle in this crate.
#[derive(Debug, Error)]
pub enum SimError {
    /// An argument lies outside the mathematical domain of the operation
    /// (negative time, correlation outside [-1,1], start on the boundary, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs are individually valid but violate a documented precondition
    /// of the operation (e.g. non-E-valued state fed to the infinite-rate
    /// scheme).
    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("site index {index} out of range (kernel has {n} sites)")]
    SiteIndex { index: usize, n: usize },

    /// A simulated field stopped being finite. Carries enough context to
    /// reproduce the offending step.
    #[error("numerical blowup: replica {replica}, step {step}, site {site}: {value}")]
    Blowup {
        replica: u64,
        step: u64,
        site: usize,
        value: f64,
    },
}

pub type Result<T> = std::result::Result<T, SimError>;

impl SimError {
    pub fn domain(msg: impl Into<String>) -> Self {
        SimError::Domain(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        SimError::Precondition(msg.into())
    }
}
