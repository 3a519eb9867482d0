use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: line {line}: {msg}")]
    Csv { path: String, line: usize, msg: String },

    #[error("config `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("model file: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input (config, files, arguments)
    /// rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. } | Error::Csv { .. } | Error::Format(_) | Error::Json(_) => true,
            Error::Context { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
