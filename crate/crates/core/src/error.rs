use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} id {id}")]
    Lookup { kind: &'static str, id: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("achievable rate underflows for task {task} at station {station}")]
    InfeasibleRate { station: usize, task: usize },

    #[error("no feasible branch for tasks {0:?}")]
    InfeasibleTask(Vec<usize>),

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("line search stalled at step {0:e}")]
    StalledLineSearch(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
