//! Crate-wide error type.
//!
//! Numeric operations return structured errors rather than panicking; the CLI
//! maps them onto exit codes (config errors -> 2, non-convergence/divergence
//! -> 3, everything else -> 1).

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("zero vector: norm {norm:e} is below the representable threshold")]
    ZeroVector { norm: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("length mismatch in {context}: expected {expected}, got {got}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("dimension mismatch in {context}: {detail}")]
    DimMismatch {
        context: &'static str,
        detail: String,
    },

    #[error("infeasible cap set: caps over allowed plans sum to {cap_sum}, need >= 1")]
    InfeasibleSimplex { cap_sum: f64 },

    #[error("no feasible point after {rounds} projection rounds")]
    NoFeasiblePoint { rounds: usize },

    #[error("invalid marginals: {0}")]
    InvalidMarginals(String),

    #[error("not converged after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("overloaded queue: service rate {mu} <= arrival rate {lambda}")]
    Overload { mu: f64, lambda: f64 },

    #[error("singular innovation covariance")]
    SingularCovariance,

    #[error("singular linear system in {context}")]
    SingularSystem { context: &'static str },

    #[error("coding gain {0} outside (0, 1]")]
    InvalidCodingGain(f64),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("empty path set")]
    EmptyPathSet,

    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { need: usize, got: usize },

    #[error("empty candidate set in {context}")]
    EmptyCandidates { context: &'static str },

    #[error("unsupported objective count {0} (supported: 2..=4)")]
    UnsupportedObjectives(usize),

    #[error("unknown scenario `{name}` (valid: {valid})")]
    UnknownScenario {
        name: String,
        valid: &'static str,
    },

    #[error("config error:\n{}", issues.join("\n"))]
    Config { issues: Vec<String> },

    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Shorthand used by parsers that accumulate line-anchored diagnostics.
    pub fn config(issues: Vec<String>) -> Self {
        Error::Config { issues }
    }
}
