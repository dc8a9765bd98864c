use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of supported range: {0}")]
    Range(String),

    #[error("Kronecker dimension {n}^{p} exceeds the supported size limit; reduce the degree")]
    Size { n: usize, p: usize },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid constraint: {0}")]
    Constraint(String),

    #[error("invalid plant: {0}")]
    Plant(String),

    #[error("constraint output is not observable (rank {rank} of {dim})")]
    Unobservable { rank: usize, dim: usize },

    #[error("LP solver stalled after {iterations} pivots")]
    SolverStall { iterations: usize },

    #[error("LP failed on row {label}: {source}")]
    RowSolve {
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error("not finitely determined within {k_max} iterations (largest violating margin {margin:e})")]
    NotDetermined { k_max: usize, margin: f64 },

    #[error("degree-1 admissible set is unbounded along coordinate {coord}; add box bounds on v to the scenario")]
    Unbounded { coord: usize },

    #[error("no admissible reference found for the initial state")]
    InfeasibleInit,

    #[error("fallback kappa = lambda is not admissible (largest margin {margin:e})")]
    InvarianceViolation { margin: f64 },

    #[error("simulation aborted at step {step}: {source}")]
    SimulationStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors that mean "the requested point is not admissible" rather than a
    /// malfunction. The CLI maps these to exit code 2.
    pub fn is_infeasibility(&self) -> bool {
        match self {
            Error::InfeasibleInit => true,
            Error::SimulationStep { source, .. } => source.is_infeasibility(),
            _ => false,
        }
    }
}
