use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json at line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("missing field {field} at line {line}")]
    MissingField { field: &'static str, line: usize },

    #[error("invalid example {id}: {message}")]
    InvalidExample { id: String, message: String },

    #[error("duplicate example id {0}")]
    DuplicateId(String),

    #[error("subset size {requested} out of range 1..={available}")]
    SubsetOutOfRange { requested: usize, available: usize },

    #[error("cannot render {condition} prompt for example {id}: {missing} is missing")]
    MissingPromptContent {
        condition: &'static str,
        id: String,
        missing: &'static str,
    },

    #[error("unknown template version {0}")]
    UnknownTemplate(String),

    #[error("context overflow: sequence needs {required} tokens but the window holds {available}")]
    ContextOverflow { required: usize, available: usize },

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("non-finite loss at token {index}")]
    NonFiniteLoss { index: usize },

    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("saliency token has p_standard {p} not above threshold {p0}")]
    SaliencyBelowThreshold { p: f64, p0: f64 },

    #[error("{0}")]
    WrongBranch(String),

    #[error("judge request to {endpoint} failed after {attempts} attempts: {message}")]
    JudgeExhausted {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("judge error: {0}")]
    Judge(String),

    #[error("example {id}: {source}")]
    Example {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("epoch {epoch}, step {step}: {source}")]
    Training {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_example(id: &str, source: Error) -> Self {
        Error::Example {
            id: id.to_string(),
            source: Box::new(source),
        }
    }
}
