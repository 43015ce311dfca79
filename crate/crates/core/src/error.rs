use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("a uniform mesh needs at least one subdivision per side")]
    EmptyMesh,

    #[error("element index {index} out of range ({count} elements)")]
    ElementOutOfRange { index: usize, count: usize },

    #[error("unsupported polynomial degree {0} (supported: 1, 2)")]
    UnsupportedDegree(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("sample grid is empty")]
    EmptyGrid,

    #[error("Cordes condition could not be certified: {0}")]
    CordesFailure(String),

    #[error("nonpositive scaling denominator at y = ({y0}, {y1}), alpha = {alpha}")]
    DegenerateCoefficients { y0: f64, y1: f64, alpha: f64 },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("element {element}: {source}")]
    Element {
        element: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown coefficient family `{0}`")]
    UnknownFamily(String),

    #[error("exact effective Hamiltonian is only known for the benchmark family, not `{0}`")]
    NoExactHamiltonian(String),

    #[error("rate estimation needs positive values, got {0}")]
    NonPositive(f64),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
