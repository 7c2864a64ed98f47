use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("malformed document `{id}`: {reason}")]
    MalformedDocument { id: String, reason: String },

    #[error("unknown passage `{0}`")]
    UnknownPassage(String),

    #[error("missing predictions for {} gold instance(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    /// The target sequence has a token no retrieved passage can generate.
    #[error("target token `{token}` at position {position} has zero probability under every retrieved passage")]
    UngenerableTarget { token: String, position: usize },

    #[error("bad binary file: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite `{}`; run stage `{stage}` first", .path.display())]
    MissingPrerequisite { stage: String, path: PathBuf },

    #[error("artifact `{}` is stale ({reason}); rerun stage `{stage}`", .path.display())]
    StaleArtifact {
        stage: String,
        path: PathBuf,
        reason: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Error {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code for the command-line driver: 2 config, 3 missing
    /// or stale prerequisite, 4 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingPrerequisite { .. } | Error::StaleArtifact { .. } => 3,
            _ => 4,
        }
    }
}
