//! Crate-wide error type.

/// Errors surfaced by model construction, geometry kernels, integrators and
/// the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The regularized Gram matrix could not be factorized, or its estimated
    /// condition number exceeds the trust threshold.
    #[error("gram matrix singular or ill-conditioned (condition estimate {cond:.3e})")]
    GramSingular { cond: f64 },

    /// The position-constraint Newton solve did not converge.
    #[error("constraint Newton solve diverged after {iters} iterations (residual {residual:.3e})")]
    NewtonDiverged { iters: usize, residual: f64 },

    /// The trajectory left the representable range (energy blow-up or NaN).
    #[error("integration unstable: {context}")]
    Unstable { context: String },

    /// A penalty value is not usable with the requested operation.
    #[error("invalid penalty: {0}")]
    InvalidPenalty(String),

    /// Mismatched vector/matrix dimensions.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Tuning could not reach the requested acceptance target on the grid.
    #[error("tuning target unreachable: {0}")]
    TargetUnreachable(String),

    /// A partition-function quadrature failed to converge, typically
    /// because the integrand is not confining.
    #[error("quadrature divergent: {context}")]
    QuadratureDivergent { context: String },

    /// A time series exhibits too few threshold crossings for a reliable
    /// mean transition time.
    #[error("insufficient crossings: only {events} transition events observed")]
    InsufficientCrossings { events: usize },

    /// Invalid run configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// I/O failure while reading configs or writing results.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
