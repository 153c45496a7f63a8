use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, malformed or out of range.
    #[error("configuration error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    /// The total impedance matrix (or another system matrix) is too badly
    /// conditioned to solve reliably.
    #[error("numerical conditioning error in {context}: condition estimate {condition:.3e}{}", eta_suffix(.eta))]
    Conditioning {
        context: &'static str,
        condition: f64,
        eta: Option<Vec<f64>>,
    },

    #[error("transmitter coincides with array element {element}")]
    GeometricSingularity { element: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("undefined estimate: {0}")]
    UndefinedEstimate(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn eta_suffix(eta: &Option<Vec<f64>>) -> String {
    match eta {
        Some(eta) if eta.len() <= 16 => format!(" at eta = {eta:?}"),
        Some(eta) => format!(" at eta (len {})", eta.len()),
        None => String::new(),
    }
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn dimension(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Dimension { .. }
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::Io { .. } => 2,
            Error::Conditioning { .. }
            | Error::GeometricSingularity { .. }
            | Error::Numerical(_)
            | Error::Optimization(_)
            | Error::UndefinedEstimate(_) => 3,
        }
    }
}
