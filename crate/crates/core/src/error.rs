use thiserror::Error;

use crate::gnep::KktReport;
use crate::irl::IrlTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is singular (no pivot above relative tolerance at column {column})")]
    SingularMatrix { column: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite value returned by evaluation at probe coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("bad parameter: {0}")]
    BadParameter(String),

    #[error("failed to parse model document: {0}")]
    Parse(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("model has no reward weights (theta) but the operation needs them")]
    MissingTheta,

    #[error("stationary distribution is not unique (nullspace dimension {dimension})")]
    NonUniqueStationary { dimension: usize },

    #[error("potential undefined: component {index} of the positive block is {value:e}")]
    BoundaryViolation { index: usize, value: f64 },

    #[error("iteration {iteration}: Newton direction is not a descent direction (<grad psi, d> = {slope:e})")]
    NonDescent { iteration: usize, slope: f64 },

    #[error("iteration {iteration}: line search stalled after {backtracks} backtracks")]
    LineSearchStall { iteration: usize, backtracks: usize },

    #[error("GNEP solver did not converge: ||H|| = {:e} after {} iterations", .0.h_norm_final(), .0.iterations)]
    GnepNotConverged(Box<KktReport>),

    #[error("IRL gradient descent did not converge: ||grad g||_inf = {:e} after {} iterations", .0.final_grad_norm(), .0.iterations())]
    IrlNotConverged(Box<IrlTrace>),

    #[error("dual objective became non-finite at iteration {iteration} (step too large?)")]
    NonFinite { iteration: usize },

    #[error("no trajectory data")]
    EmptyData,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
