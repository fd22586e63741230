use thiserror::Error;

#[derive(Debug, Error)]
pub enum JpoError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("FFT length {0} is not a power of two")]
    NonPowerOfTwoFft(usize),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("simulation diverged at step {step} (max |u| exceeded {guard})")]
    Divergence { step: usize, guard: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed container: {0}")]
    Container(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, JpoError>;
