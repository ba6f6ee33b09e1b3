use thiserror::Error;

/// Every failure the library can report. Variant names double as the stable
/// error identifiers printed by the command-line front end.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {row} of the score matrix is fully masked")]
    RowFullyMasked { row: usize },
    #[error("model width {d} is not divisible by {heads} heads")]
    HeadDivisibility { d: usize, heads: usize },
    #[error("invalid gate configuration{}: {reason}", sublayer.map(|i| format!(" in sublayer {i}")).unwrap_or_default())]
    InvalidGateConfig {
        sublayer: Option<usize>,
        reason: String,
    },
    #[error("loss root must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("invalid box for region {region}: {reason}")]
    InvalidBox { region: usize, reason: String },
    #[error("vision batch has no regions")]
    EmptyRegions,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),
    #[error("training diverged at step {step}: total loss {loss}")]
    DivergedLoss { step: usize, loss: f64 },
    #[error("within-group variance is zero")]
    DegenerateVariance,
    #[error("exact enumeration over {n} observations exceeds the cap of {cap}")]
    TooLargeForExact { n: usize, cap: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("corrupt data file: {0}")]
    CorruptData(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Stable identifier of the variant.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::RowFullyMasked { .. } => "RowFullyMasked",
            Error::HeadDivisibility { .. } => "HeadDivisibility",
            Error::InvalidGateConfig { .. } => "InvalidGateConfig",
            Error::NonScalarLoss { .. } => "NonScalarLoss",
            Error::IdOutOfRange { .. } => "IdOutOfRange",
            Error::InvalidBox { .. } => "InvalidBox",
            Error::EmptyRegions => "EmptyRegions",
            Error::InvalidDistribution(_) => "InvalidDistribution",
            Error::ParseError { .. } => "ParseError",
            Error::UnknownPreset(_) => "UnknownPreset",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::UnknownParam(_) => "UnknownParam",
            Error::CorruptManifest(_) => "CorruptManifest",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::DegenerateVariance => "DegenerateVariance",
            Error::TooLargeForExact { .. } => "TooLargeForExact",
            Error::InsufficientData(_) => "InsufficientData",
            Error::CorruptData(_) => "CorruptData",
            Error::Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
