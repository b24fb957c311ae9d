use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("degenerate convolution output: {0}")]
    DegenerateOutput(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("unknown filter id '{0}'")]
    UnknownFilter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input too small: {0}")]
    InputTooSmall(String),

    #[error("architecture '{0}' not supported at desk scale")]
    UnsupportedArchitecture(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("{path}: bad magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        got: u32,
    },

    #[error("{path}: format version mismatch: expected {expected}, got {got}")]
    FormatVersion {
        path: String,
        expected: u32,
        got: u32,
    },

    #[error("{path}: corrupt file: {detail}")]
    CorruptFile { path: String, detail: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("subset size {requested} exceeds dataset size {available}")]
    SubsetTooLarge { requested: usize, available: usize },

    #[error("no misclassified starting point found after {draws} random draws")]
    InitializationFailure { draws: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable kind tag, used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::DegenerateOutput(_) => "degenerate_output",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NonScalarBackward(_) => "non_scalar_backward",
            Error::NonFinite(_) => "non_finite",
            Error::UnknownFilter(_) => "unknown_filter",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InputTooSmall(_) => "input_too_small",
            Error::UnsupportedArchitecture(_) => "unsupported_architecture",
            Error::Divergence { .. } => "divergence",
            Error::BadMagic { .. } => "bad_magic",
            Error::FormatVersion { .. } => "format_version",
            Error::CorruptFile { .. } => "corrupt_file",
            Error::EmptyInput(_) => "empty_input",
            Error::SubsetTooLarge { .. } => "subset_too_large",
            Error::InitializationFailure { .. } => "initialization_failure",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
