use std::fmt;

use serde::Serialize;

/// One broken record-level rule found while validating a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub id: String,
    pub time: usize,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "id {} time {}: {}", self.id, self.time, self.rule)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("input: {}", .0.join("; "))]
    Input(Vec<String>),
    #[error("{} validation violation(s), first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Validation(Vec<Violation>),
    #[error("positivity: {0}")]
    Positivity(String),
    #[error("separation in term `{term}` ({detail})")]
    Separation { term: String, detail: String },
    #[error("fit: {0}")]
    Fit(String),
    #[error("missing model for role {0}")]
    Coverage(String),
    #[error("graph: {0}")]
    Graph(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Graph(_) | Error::Coverage(_) => 2,
            Error::Io(_) | Error::Csv(_) | Error::Input(_) | Error::Validation(_) => 3,
            Error::Unsupported(_) => 2,
            Error::Positivity(_) | Error::Separation { .. } | Error::Fit(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Validation(_) => "validation",
            Error::Positivity(_) => "positivity",
            Error::Separation { .. } => "separation",
            Error::Fit(_) => "fit",
            Error::Coverage(_) => "coverage",
            Error::Graph(_) => "graph",
            Error::Unsupported(_) => "unsupported",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
