use thiserror::Error;

pub type Result<T> = std::result::Result<T, PbmError>;

#[derive(Debug, Error)]
pub enum PbmError {
    /// An input fell outside the range a mechanism accepts.
    #[error("input {value} outside [-{bound}, {bound}]")]
    Domain { value: f64, bound: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// `theta == 0` carries no signal, so nothing can be decoded.
    #[error("theta is zero: the mechanism output is independent of the input")]
    ZeroTheta,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error(
        "Kashin representation did not converge: residual {residual:.3e} after {iters} iterations"
    )]
    Convergence { residual: f64, iters: usize },

    #[error("Kashin level exceeded: sqrt(D)*|y|_inf/|x|_2 = {measured:.4} > {level:.4}")]
    LevelExceeded { measured: f64, level: f64 },

    #[error("group specs differ across updates")]
    MixedSpecs,

    #[error("alpha grids differ across curves")]
    GridMismatch,

    #[error("infeasible parameters: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PbmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        PbmError::InvalidParameter(msg.into())
    }
}
