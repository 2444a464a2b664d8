use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. Variants map onto the CLI exit
/// codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("unknown class `{class}` in manifest row {row}")]
    UnknownClass { class: String, row: usize },
    #[error("invalid fold count {k}: {reason}")]
    InvalidFoldCount { k: usize, reason: String },
    #[error("upscale factor must be >= 1, got {0}")]
    InvalidFactor(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("crop {crop}x{crop} does not fit a {height}x{width} tile")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("noise level gamma must be in (0, 1], got {0}")]
    InvalidGamma(f64),
    #[error("step {t} outside 1..={steps}")]
    InvalidStep { t: usize, steps: usize },
    #[error("schedule hash mismatch: checkpoint {checkpoint:016x}, requested {requested:016x}")]
    ScheduleMismatch { checkpoint: u64, requested: u64 },
    #[error("channel {channel} has degenerate std {std:e}")]
    DegenerateStats { channel: usize, std: f64 },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("sampling weights are invalid: {0}")]
    DegenerateWeights(String),
    #[error("ranked prediction {index} has {len} entries, need {k}")]
    RankTooShort { index: usize, len: usize, k: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("probability for the labelled class is not positive ({0:e})")]
    NonPositiveProbability(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("teacher expects {expected}, got {found}")]
    TeacherInputMismatch { expected: String, found: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("model expects {expected}x{expected} input, got {height}x{width}")]
    InputSizeMismatch {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("output {0} already exists (pass --overwrite true to replace it)")]
    OutputExists(PathBuf),
    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// 2 for configuration problems, 3 for data problems, 4 for numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::ConfigParse { .. }
            | Error::InvalidFoldCount { .. }
            | Error::InvalidFactor(_)
            | Error::InvalidSchedule(_)
            | Error::InvalidAlpha(_)
            | Error::ConfigMismatch(_)
            | Error::CropTooLarge { .. }
            | Error::ScheduleMismatch { .. }
            | Error::OutputExists(_) => 2,
            Error::NonFiniteLoss(_)
            | Error::DegenerateStats { .. }
            | Error::DegenerateWeights(_)
            | Error::NonPositiveProbability(_)
            | Error::InvalidGamma(_) => 4,
            _ => 3,
        }
    }
}
