use std::io;

use thiserror::Error;

/// Everything that can go wrong in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("input of length {len} is shorter than the window of {window}")]
    InputTooShort { len: usize, window: usize },

    #[error("timestep count {t} does not divide trace length {n}")]
    Divisibility { n: usize, t: usize },

    #[error("degenerate normalization statistics: training data is constant")]
    DegenerateStats,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("backward pass called before a forward pass populated the cache")]
    MissingCache,

    #[error("insufficient data: need {needed} examples, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("trace length mismatch: model expects {model}, data has {data}")]
    LengthMismatch { model: usize, data: usize },

    #[error("unknown preset `{name}`; available presets: {available}")]
    UnknownPreset { name: String, available: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Csv(_) => 3,
            _ => 2,
        }
    }
}
