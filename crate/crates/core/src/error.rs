use std::path::PathBuf;

/// Errors raised anywhere in the inference engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("simulation produced non-finite output for theta = {theta:?}")]
    Simulation { theta: Vec<f64> },
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint format error at byte offset {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
