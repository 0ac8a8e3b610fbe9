use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("shape error: {0}")]
    ShapeMsg(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("unknown parameter `{0}`")]
    Lookup(String),

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("ingestion error at line {line}: {msg}")]
    Ingestion { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("integrity error at byte offset {offset}: {msg}")]
    Integrity { offset: u64, msg: String },

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of what was running.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 training/numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config { .. } | Error::Argument(_) | Error::Lookup(_) | Error::Schema(_) => 2,
            Error::Io { .. } | Error::Integrity { .. } | Error::Version { .. } => 4,
            Error::Ingestion { .. } => 4,
            _ => 3,
        }
    }
}
