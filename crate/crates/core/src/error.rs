use std::path::PathBuf;

use crate::freq::{Component, Mhz};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid frequency table: {0}")]
    InvalidTable(String),

    #[error("{freq} is not an available {component} frequency")]
    NotInTable { component: Component, freq: Mhz },

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("calibration infeasible: best max residual {residual:.4} exceeds {limit}")]
    CalibrationInfeasible { residual: f64, limit: f64 },

    #[error(
        "no token completed within {limit_ms} ms of simulated time (last progress at {last_ms} ms)"
    )]
    NonTermination { limit_ms: u64, last_ms: u64 },

    #[error("simulation of {point} failed: {source}")]
    AtPoint {
        point: String,
        #[source]
        source: Box<Error>,
    },

    #[error("no profile entry satisfies the constraint")]
    Infeasible,

    #[error("no evaluated combination meets the energy budget of {budget_mj} mJ/token")]
    BudgetInfeasible { budget_mj: f64 },

    #[error("no evaluated combination meets the latency target of {target_ms} ms")]
    TargetInfeasible { target_ms: f64 },

    #[error("setting {setting}: {source}")]
    Setting {
        setting: String,
        #[source]
        source: Box<Error>,
    },

    #[error("request {id}: {source}")]
    Request {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("schema mismatch in {path}: {msg}")]
    Schema { path: PathBuf, msg: String },

    #[error("profiles from different calibrations cannot be merged ({ours} vs {theirs})")]
    CalibrationMismatch { ours: String, theirs: String },

    #[error("request sets differ: {0}")]
    RequestMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_point(self, point: impl std::fmt::Display) -> Self {
        Error::AtPoint {
            point: point.to_string(),
            source: Box::new(self),
        }
    }
}
