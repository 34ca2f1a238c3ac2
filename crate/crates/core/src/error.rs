use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed network data: {0}")]
    Malformed(String),

    #[error("duplicate line between `{from}` and `{to}`")]
    DuplicateLine { from: String, to: String },

    #[error("disconnected node `{0}`")]
    DisconnectedNode(String),

    #[error("cycle detected at line `{from}` -> `{to}`")]
    CycleDetected { from: String, to: String },

    #[error("root squared voltage must be positive, got {0}")]
    NonpositiveV0(f64),

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("power flow did not converge after {sweeps} sweeps (residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("voltage collapse: squared voltage {value} at node {node} fell below 0.25 v0")]
    VoltageCollapse { node: usize, value: f64 },

    #[error("nonpositive squared voltage {value} at node {node}")]
    NonpositiveVoltage { node: usize, value: f64 },

    #[error("invalid clustering: {0}")]
    InvalidClustering(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors raised by the feedback power-flow solver.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::VoltageCollapse { .. }
                | Error::NonpositiveVoltage { .. }
        )
    }
}
