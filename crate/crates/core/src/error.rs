use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward evaluation produced NaN or infinity.
    #[error("non-finite value in {op}{}", location.as_ref().map(|l| format!(" ({l})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        location: Option<String>,
    },

    /// An importance ratio overflowed for one sample of a group.
    #[error("non-finite importance ratio for sample {sample}")]
    NonFiniteRatio { sample: usize },

    /// Training stopped because the loss or the parameters became non-finite.
    #[error("training halted at step {step}: {detail}")]
    Halted { step: usize, detail: String },

    /// A configuration key is unknown or its value cannot be parsed.
    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error reports a numerical breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteRatio { .. } | Error::Halted { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
