use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    /// A layer received an input whose shape it cannot consume.
    #[error("layer {layer} ({kind}): {detail}")]
    Shape {
        layer: usize,
        kind: String,
        detail: String,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("insufficient capacity: {0}")]
    Capacity(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("corrupt data at byte {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProbeError>;
