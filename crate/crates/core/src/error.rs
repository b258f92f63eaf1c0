use thiserror::Error;

/// Errors raised by the simulation engine and its configuration layer.
///
/// Per-round numerical failures (coincident neighbours, rank-deficient
/// Gram matrices) are not errors: they are recorded in the round snapshot
/// and handled by the controller fallback.
#[derive(Debug, Error)]
pub enum Error {
    #[error("agent index {index} out of range for {agent_count} agents")]
    AgentOutOfRange { index: usize, agent_count: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid formation: {0}")]
    InvalidFormation(String),

    #[error("invalid control parameters: {0}")]
    InvalidControl(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration rejected:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<String>),

    #[error("failed to parse config: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("failed to serialise config: {0}")]
    ConfigSerialize(#[from] toml::ser::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
