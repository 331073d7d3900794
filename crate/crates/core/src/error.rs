use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token id {id} out of range for a vocabulary of {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// `line` is 1-based within the settings file; 0 marks a command-line override.
    #[error("config error at {}, key `{key}`: {msg}", origin(*line))]
    ConfigKey { line: usize, key: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("pair {index} needs {tokens} padded target tokens, budget is {budget}")]
    Oversize { index: usize, tokens: usize, budget: usize },

    #[error("every target position in the batch is padding")]
    DegenerateBatch,

    #[error("non-finite loss at step {step}: lr {lr:e}, gradient norm {grad_norm:e}, loss {loss}")]
    NonFiniteLoss { step: u64, lr: f64, grad_norm: f64, loss: f64 },

    #[error("checkpoint has bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint is truncated (needed {needed} more bytes at offset {offset})")]
    Truncated { offset: usize, needed: usize },

    #[error("checkpoint config mismatch on `{field}`: expected {expected}, found {found}")]
    ConfigMismatch { field: String, expected: String, found: String },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn origin(line: usize) -> String {
    match line {
        0 => "--set override".to_string(),
        n => format!("line {n}"),
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape { op, left: left.to_vec(), right: right.to_vec() }
    }
}
