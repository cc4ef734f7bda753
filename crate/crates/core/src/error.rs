use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate ellipse fit: {0}")]
    DegenerateFit(String),

    #[error("clipping produced an empty region")]
    EmptyResult,

    #[error("start or goal is covered by a dilated obstacle: {0}")]
    InfeasibleEndpoint(String),

    #[error("no path between start and goal")]
    NoPath,

    #[error("consecutive corridors {0} and {1} do not overlap along the path")]
    CorridorGap(usize, usize),

    #[error("solver failed after {iterations} iterations (constraint violation {violation:.3e})")]
    SolverFailure {
        iterations: usize,
        violation: f64,
        /// Best iterate found, flattened in the solver's variable layout.
        best_iterate: Vec<f64>,
        report: String,
    },

    #[error("planner aborted after {failures} consecutive solver failures: {reason}")]
    PlannerAborted { failures: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
