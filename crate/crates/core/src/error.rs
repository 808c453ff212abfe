use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("too few tokens to prune: {unprotected} unprotected (need at least 2)")]
    TooFewTokens { unprotected: usize },

    #[error("prune count {r} exceeds limit {limit} for {op}")]
    PruneTooLarge {
        op: &'static str,
        r: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence limit exceeded: position {pos} >= max_seq {max_seq}")]
    MaxSeq { pos: usize, max_seq: usize },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("config parse error at `{path}`: {detail}")]
    Parse { path: String, detail: String },

    #[error("snt1: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
