use std::io;

/// Errors surfaced by the library. `exit_code` maps each kind onto the
/// CLI convention: 1 validation, 2 I/O / format, 3 numeric failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn shape(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Shape {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub fn parse(path: &str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            msg: msg.into(),
        }
    }

    /// I/O error annotated with the file it concerns, for `map_err` at
    /// filesystem call sites.
    pub fn io_at(path: &std::path::Path, err: io::Error) -> Self {
        Error::Io(io::Error::new(
            err.kind(),
            format!("{}: {err}", path.display()),
        ))
    }

    /// CLI exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Empty(_) | Error::Config(_) => 1,
            Error::Parse { .. } | Error::Format { .. } | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
