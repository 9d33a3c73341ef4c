use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("seed node {0} is not inside the mask")]
    SeedOutsideMask(usize),

    #[error("order k = {k} outside 1..={n}")]
    OrderOutOfRange { k: usize, n: usize },

    #[error("weight a[{index}] = {value} must be positive")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("trace {0} must be positive")]
    NonPositiveTrace(f64),

    #[error("spectrum entry {0} is negative")]
    NegativeEntry(f64),

    #[error("epsilon {eps} outside admissible range {range}")]
    EpsilonOutOfRange { eps: f64, range: &'static str },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("unknown manufactured case `{0}`")]
    UnknownCase(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("iterate left the Gamma_2 cone: {0}")]
    ConeExit(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed field file: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
