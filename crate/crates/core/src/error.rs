use thiserror::Error;

/// Errors surfaced by model construction, the exact oracles, and the learners.
#[derive(Debug, Error)]
pub enum Error {
    /// A model failed validation (distribution sums, disjoint supports,
    /// reward accounting, layering).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A combination of policy representation and emission kind that the
    /// requested operation cannot handle.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// An enumeration-based oracle refused because the instance is too large.
    #[error("enumeration budget exceeded: {count} {what} > budget {budget}")]
    BudgetExceeded {
        what: &'static str,
        count: u128,
        budget: u128,
    },

    /// A learner was handed an empty dataset.
    #[error("empty dataset for {0}")]
    EmptyDataset(&'static str),

    /// Configuration files and schema errors; `path` points at the offending
    /// field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// An algorithm failed mid-run; the context names the iteration.
    #[error("{context}: {source}")]
    InContext {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidModel(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wrap an error with iteration context (e.g. "cover iteration h=4, i=2").
    pub fn with_context(self, context: impl Into<String>) -> Self {
        Error::InContext {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
