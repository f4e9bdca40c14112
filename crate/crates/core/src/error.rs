use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("volume contains {count} non-finite voxels")]
    NonFiniteData { count: usize },

    #[error("volume is already normalized")]
    AlreadyNormalized,

    #[error("volume must be normalized first")]
    NotNormalized,

    #[error("{n} prior volumes requested but only {available} are usable")]
    TooFewVolumes { n: usize, available: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("state {t} out of range [{lo}, {hi}]")]
    StateOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("denoiser is noise-level conditioned but no noise level was given")]
    MissingCondition,

    #[error("denoiser is unconditioned but a noise level was given")]
    UnexpectedCondition,

    #[error("checkpoint hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("denoiser spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("training loss diverged at step {step}")]
    DivergedLoss { step: usize },

    #[error("stage I output is already calibrated")]
    AlreadyCalibrated,

    #[error("stage I output must be calibrated first")]
    NotCalibrated,

    #[error("no samples available for noise fitting")]
    EmptySample,

    #[error("scaled noise shuffle needs a positive sigma")]
    ZeroSigma,

    #[error("non-finite sampler state at t={t}")]
    NonFiniteState { t: usize },

    #[error("sampler trace is too short to classify")]
    EmptyTrace,

    #[error("background region has zero variance")]
    DegenerateBackground,

    #[error("invalid ROI masks: {0}")]
    InvalidMasks(String),

    #[error("ROI mask fingerprint mismatch: {0} vs {1}")]
    MaskMismatch(String, String),

    #[error("invalid config at `{path}`: {message}")]
    ConfigInvalid { path: String, message: String },

    #[error("stage {stage} failed: {cause}")]
    StageFailed { stage: String, cause: Box<Error> },

    #[error("work directory is locked by another run: {0}")]
    Locked(PathBuf),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::CorruptHeader(_) => "CorruptHeader",
            Error::NonFiniteData { .. } => "NonFiniteData",
            Error::AlreadyNormalized => "AlreadyNormalized",
            Error::NotNormalized => "NotNormalized",
            Error::TooFewVolumes { .. } => "TooFewVolumes",
            Error::InvalidParams(_) => "InvalidParams",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::StateOutOfRange { .. } => "StateOutOfRange",
            Error::MissingCondition => "MissingCondition",
            Error::UnexpectedCondition => "UnexpectedCondition",
            Error::HashMismatch { .. } => "HashMismatch",
            Error::SpecMismatch(_) => "SpecMismatch",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::AlreadyCalibrated => "AlreadyCalibrated",
            Error::NotCalibrated => "NotCalibrated",
            Error::EmptySample => "EmptySample",
            Error::ZeroSigma => "ZeroSigma",
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::EmptyTrace => "EmptyTrace",
            Error::DegenerateBackground => "DegenerateBackground",
            Error::InvalidMasks(_) => "InvalidMasks",
            Error::MaskMismatch(..) => "MaskMismatch",
            Error::ConfigInvalid { .. } => "ConfigInvalid",
            Error::StageFailed { .. } => "StageFailed",
            Error::Locked(_) => "Locked",
            Error::Json(_) => "Json",
            Error::Image(_) => "Image",
        }
    }

    /// Process exit code: 2 config, 3 data, 4 training, 5 inference.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid { .. } | Error::Locked(_) | Error::InvalidParams(_) => 2,
            Error::StageFailed { stage, cause } => match stage.as_str() {
                "ingest" => 3,
                "stage1" | "stage2" | "stage3" => match cause.exit_code() {
                    2 => 2,
                    _ => 4,
                },
                _ => 5,
            },
            Error::DivergedLoss { .. } | Error::AlreadyCalibrated | Error::NotCalibrated | Error::ZeroSigma => 4,
            Error::StateOutOfRange { .. }
            | Error::MissingCondition
            | Error::UnexpectedCondition
            | Error::NonFiniteState { .. }
            | Error::EmptyTrace
            | Error::Image(_) => 5,
            _ => 3,
        }
    }
}
