use thiserror::Error;

use crate::datagen::Group;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error(
        "infeasible marker injection: need {needed} examples with {which}, have {available} \
         (achievable prevalence at this strength: {max_prevalence:.4})"
    )]
    Infeasible {
        which: String,
        needed: usize,
        available: usize,
        max_prevalence: f64,
    },

    #[error("cannot balance: group {0} is empty")]
    EmptyGroup(Group),

    #[error("cannot balance labels within group: {0}")]
    SingleLabelGroup(String),

    #[error("undefined estimate: {0}")]
    Undefined(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("numeric error in `{parameter}`: {detail}")]
    Numeric { parameter: String, detail: String },

    #[error("block schedule error: {0}")]
    Schedule(String),

    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors the CLI reports as numerical failures.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }

    /// True for errors caused by bad configuration or inputs rather than I/O.
    pub fn is_config(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Numeric { .. })
    }
}
