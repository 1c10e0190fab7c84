use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid swarm state: {0}")]
    InvalidState(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),

    #[error("oracle did not reach a fixed point after {0} rounds")]
    OracleDiverged(usize),

    #[error("simulation invariant violated: {0}")]
    Simulation(String),

    #[error("time {time} is outside the simulated horizon [{start}, {end}]")]
    OutOfRange { time: f64, start: f64, end: f64 },

    #[error("malformed trace: {0}")]
    MalformedTrace(String),

    #[error("trace has no snapshots")]
    MissingSnapshots,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
