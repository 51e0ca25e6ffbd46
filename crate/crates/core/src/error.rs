use thiserror::Error;

/// Crate-wide error type. Contract violations and malformed inputs map to CLI
/// exit code 2; convergence flags map to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { line: Option<usize>, msg: String },

    #[error("training error at {path}: {msg}")]
    Training { path: String, msg: String },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("matrix inversion failed: {0}")]
    Inversion(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("selection failed: {0}")]
    Selection(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(line: usize, msg: impl Into<String>) -> Self {
        Error::Data {
            line: Some(line),
            msg: msg.into(),
        }
    }

    pub fn data_msg(msg: impl Into<String>) -> Self {
        Error::Data {
            line: None,
            msg: msg.into(),
        }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Convergence(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
