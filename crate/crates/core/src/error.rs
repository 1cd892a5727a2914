use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("FASTA format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("no maskable positions")]
    NothingToMask,
    #[error("invalid mask plan: {0}")]
    InvalidMaskPlan(String),
    #[error("invalid amino-acid profile: {0}")]
    InvalidProfile(String),
    #[error("no canonical residues left after filtering")]
    EmptyAfterFilter,
    #[error("concept `{0}` is degenerate (max == min)")]
    DegenerateConcept(String),
    #[error("sequence length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("concept values are required for independent training")]
    MissingConcepts,
    #[error("loss has no contributing positions")]
    EmptyLoss,
    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: u64 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("concept `{0}` cannot be intervened on")]
    UnsupportedConcept(String),
    #[error("operation requires a {expected} model, got {found}")]
    Variant { expected: String, found: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidSequence(_) => "InvalidSequence",
            Error::Format { .. } => "FormatError",
            Error::NothingToMask => "NothingToMask",
            Error::InvalidMaskPlan(_) => "InvalidMaskPlan",
            Error::InvalidProfile(_) => "InvalidProfile",
            Error::EmptyAfterFilter => "EmptyAfterFilter",
            Error::DegenerateConcept(_) => "DegenerateConcept",
            Error::Length { .. } => "LengthError",
            Error::MissingConcepts => "MissingConcepts",
            Error::EmptyLoss => "EmptyLoss",
            Error::Divergence { .. } => "DivergenceError",
            Error::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Error::CheckpointVersion { .. } => "CheckpointVersion",
            Error::UnsupportedConcept(_) => "UnsupportedConcept",
            Error::Variant { .. } => "VariantError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IOError",
            Error::Json(_) => "JsonError",
        }
    }
}
