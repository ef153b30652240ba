use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Dimensions or parameter ranges that make the model unusable.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("matrix `{name}` is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { name: String, asymmetry: f64 },

    #[error("matrix `{name}` is not positive definite (smallest eigenvalue {min_eigenvalue:.6e})")]
    NotPositiveDefinite { name: String, min_eigenvalue: f64 },

    #[error("matrix `{name}` is not positive semidefinite (smallest eigenvalue {min_eigenvalue:.6e})")]
    NotPositiveSemidefinite { name: String, min_eigenvalue: f64 },

    #[error("matrix `{0}` is singular")]
    Singular(String),

    #[error("terminal discount delta = {0} must lie in [0, 1)")]
    DeltaOutOfRange(f64),

    #[error(
        "Riccati blow-up in {system} system: |entry| = {magnitude:.3e} exceeds {bound:.1e} \
         at node {node} (t = {time}), first failing node in backward integration from T"
    )]
    RiccatiBlowUp {
        system: &'static str,
        node: usize,
        time: f64,
        magnitude: f64,
        bound: f64,
    },

    #[error("at least 2 copies per common path are required, got K = {0}")]
    NotEnoughCopies(usize),

    #[error("empty sample")]
    EmptySample,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("model verdict is short-T only ({0}); pass the short-T override to solve anyway")]
    ValidationRefused(String),

    #[error("fixed-point iteration did not reach tol within {max_iter} iterations (last residual {last:.3e})")]
    MaxIterExceeded {
        max_iter: usize,
        last: f64,
        residuals: Vec<f64>,
    },

    #[error(
        "fixed-point iteration diverging at iteration {iteration} (residual {residual:.3e}); \
         use a smaller damping theta or a shorter horizon"
    )]
    Diverged {
        iteration: usize,
        residual: f64,
        residuals: Vec<f64>,
    },

    #[error("spec does not match the solution it is paired with: {0}")]
    SpecMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    /// Numerical failures (blow-up, divergence) as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RiccatiBlowUp { .. } | Error::MaxIterExceeded { .. } | Error::Diverged { .. }
        )
    }

    /// Failures that mean the model violates the standing assumptions.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::NotSymmetric { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::NotPositiveSemidefinite { .. }
                | Error::DeltaOutOfRange(_)
                | Error::ValidationRefused(_)
                | Error::InvalidModel(_)
        )
    }
}
