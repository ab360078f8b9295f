use thiserror::Error;

/// Unified error type for the toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("malformed command: lone trailing backslash at byte {0}")]
    MalformedCommand(usize),

    #[error("malformed symbol: unterminated \\[...] starting at byte {0}")]
    MalformedSymbol(usize),

    #[error("more than {max} distinct multi-digit numbers in one formula")]
    NumberCapacity { max: usize },

    #[error("number tag <number_{0:02}> has no entry in the number map")]
    UnresolvedTag(u8),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error at line {line}: missing field `{field}`")]
    Schema { line: usize, field: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("a single pair of {len} tokens exceeds the batch budget of {budget}")]
    Batching { len: usize, budget: usize },

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("degenerate batch: all target positions are padding")]
    DegenerateBatch,

    #[error("metric undefined on an empty collection")]
    UndefinedMetric,

    #[error("empty input")]
    EmptyInput,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("external converter unavailable: {0}")]
    ConverterUnavailable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}
