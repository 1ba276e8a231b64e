use std::path::PathBuf;

/// Errors raised by the model, data, and persistence layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index out of bounds in {op}: {index} (limit {limit})")]
    Bounds {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error{}: {message}", line_note(.line))]
    Data {
        line: Option<usize>,
        message: String,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unsupported span ({start}, {end}): width exceeds maximum span size {max}")]
    UnsupportedSpan {
        start: usize,
        end: usize,
        max: usize,
    },
    #[error("checkpoint integrity error in section `{section}`: {message}")]
    Integrity {
        section: &'static str,
        message: String,
    },
    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch} (sentences {sentences:?})")]
    NonFinite {
        value: f64,
        epoch: usize,
        batch: usize,
        sentences: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn line_note(line: &Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
