use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("density pair has no analytic descriptor; {0} needs one")]
    NoAnalyticForm(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },
    #[error("objective {value} exceeds the a-priori bound {bound}")]
    BoundViolated { value: f64, bound: f64 },
    #[error("conjugate gradient stalled after {iterations} iterations (residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },
    #[error("flow is not feasible: divergence residual {0:e}")]
    InfeasibleFlow(f64),
    #[error("mass mismatch between marginals: {0:e}")]
    MassMismatch(f64),
    #[error("edge flow contains a directed cycle")]
    CyclicFlow,
    #[error("path decomposition left {0:e} unrouted mass")]
    Unroutable(f64),
    #[error("sweep rejected: {0}")]
    Sweep(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
