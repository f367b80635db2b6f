use thiserror::Error;

/// Errors raised anywhere in the training and verification stack.
#[derive(Debug, Error)]
pub enum LogoError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric error: {message}{}", index_suffix(*.index))]
    Numeric {
        message: String,
        index: Option<usize>,
    },

    #[error("environment fault in episode {episode}: {message}")]
    Environment { episode: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("theory check failed: {0}")]
    TheoryCheck(String),

    #[error("aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: usize,
        #[source]
        source: Box<LogoError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn index_suffix(index: Option<usize>) -> String {
    match index {
        Some(i) => format!(" (batch index {i})"),
        None => String::new(),
    }
}

impl LogoError {
    pub fn config(msg: impl Into<String>) -> Self {
        LogoError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        LogoError::Numeric {
            message: msg.into(),
            index: None,
        }
    }

    pub fn numeric_at(msg: impl Into<String>, index: usize) -> Self {
        LogoError::Numeric {
            message: msg.into(),
            index: Some(index),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LogoError::Config(_) | LogoError::Parse { .. } | LogoError::Format { .. } => 2,
            LogoError::Numeric { .. } => 3,
            LogoError::TheoryCheck(_) => 4,
            LogoError::Aborted { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LogoError>;
