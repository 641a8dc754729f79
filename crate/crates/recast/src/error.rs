use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("index {index} out of range for {what} (max {max})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        max: usize,
    },

    #[error("infeasible grid: S={s} exceeds t0+1={max}")]
    InfeasibleGrid { s: usize, max: usize },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("operands recorded on different graphs")]
    MixedGraphs,

    #[error("sigma {sigma} too large: sigma^2 must not exceed 1 - alpha_bar = {limit}")]
    SigmaTooLarge { sigma: f64, limit: f64 },

    #[error("combination weights at t={t} sum to {sum}, expected 1 within 1e-9")]
    WeightSum { t: usize, sum: f64 },

    #[error("combination weight {value} is negative")]
    NegativeWeight { value: f64 },

    #[error("degenerate {which} direction (norm below 1e-12)")]
    DegenerateDirection { which: &'static str },

    #[error("embedding has zero norm")]
    ZeroEmbedding,

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no fine-tuned model registered under '{0}'")]
    MissingModel(String),

    #[error("latent cache fingerprint does not match the supplied model")]
    FingerprintMismatch,

    #[error("training diverged at step {step}: parameters became non-finite")]
    Divergence { step: usize },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("payload checksum mismatch")]
    ChecksumMismatch,

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension overflow while sizing a buffer")]
    DimensionOverflow,

    #[error("image {h}x{w} smaller than the {window}x{window} metric window")]
    ImageTooSmall { h: usize, w: usize, window: usize },

    #[error("recipe error: {0}")]
    Recipe(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 usage, 3 format, 4 divergence, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Corrupt(_)
            | Error::VersionMismatch { .. }
            | Error::ChecksumMismatch
            | Error::MalformedHeader(_)
            | Error::DimensionOverflow
            | Error::Recipe(_) => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}
