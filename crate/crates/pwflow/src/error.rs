use thiserror::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by this crate.
///
/// Shape and configuration problems are caller errors; numeric, training and
/// evaluation errors describe runtime breakdowns and carry enough context to
/// locate them (offending value, epoch index, cluster indices).
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix or vector dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid argument or option value.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced a non-finite or otherwise invalid number.
    #[error("numeric error in {context}: offending value {value}")]
    Numeric { context: String, value: f64 },

    /// Training aborted; `epoch` is the 1-based epoch where it happened.
    #[error("training failed at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    /// Malformed input data; `line` is 1-based when known.
    #[error("format error{}: {message}", fmt_line(line))]
    Format { line: Option<usize>, message: String },

    /// A statistical evaluation could not produce a trustworthy estimate.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// One or more mixture components failed to train.
    #[error("training failed for cluster(s) {}: {}", fmt_indices(failures), fmt_causes(failures))]
    ClusterTraining { failures: Vec<(usize, Box<Error>)> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(context: impl Into<String>, value: f64) -> Self {
        Error::Numeric { context: context.into(), value }
    }

    pub(crate) fn format(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Format { line, message: msg.into() }
    }
}

fn fmt_line(line: &Option<usize>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}

fn fmt_indices(failures: &[(usize, Box<Error>)]) -> String {
    let ids: Vec<String> = failures.iter().map(|(i, _)| i.to_string()).collect();
    ids.join(", ")
}

fn fmt_causes(failures: &[(usize, Box<Error>)]) -> String {
    let msgs: Vec<String> = failures
        .iter()
        .map(|(i, e)| format!("[{i}] {e}"))
        .collect();
    msgs.join("; ")
}
