use thiserror::Error;

use crate::levelset::LevelSetState;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field spec: {0}")]
    InvalidSpec(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid initial set: {0}")]
    InvalidSet(String),

    #[error("empty set passed to {0}")]
    EmptySet(&'static str),

    #[error("non-finite level-set value at node ({i}, {j}) at t = {t} (CFL violation?)")]
    NonFinite { i: usize, j: usize, t: f64 },

    #[error("time cap {t_max} exceeded before the stopping condition held")]
    HorizonExceeded { t_max: f64, state: Box<LevelSetState> },

    #[error("experiment aborted: only {succeeded} of {total} seeds succeeded")]
    TooManyFailures { succeeded: usize, total: usize },

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
