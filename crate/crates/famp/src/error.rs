use std::fmt;
use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform for the requested primitive.
    ShapeMismatch { op: &'static str, detail: String },
    /// Input outside the mathematical domain of a primitive (log of a
    /// non-positive value, division by zero, ...).
    Domain { op: &'static str, detail: String },
    /// A primitive produced or received a NaN/Inf value.
    NonFinite { op: &'static str, detail: String },
    /// `grad` was asked to differentiate a non-scalar output.
    NonScalarGrad { len: usize },
    /// A node id referred outside the tape.
    NodeOutOfRange { id: u32, len: usize },
    /// An operation received an empty input where at least one element
    /// is required.
    Empty(&'static str),
    /// Invalid action id passed to the environment.
    InvalidAction { action: usize, n_actions: usize },
    /// A brute-force oracle was asked for an instance above its size cap.
    InstanceTooLarge { detail: String },
    /// Bad configuration value or unknown configuration key.
    Config(String),
    /// Malformed checkpoint file.
    Checkpoint(String),
    /// I/O failure, with the path that was being accessed.
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
            Error::NonFinite { op, detail } => write!(f, "non-finite value in {op}: {detail}"),
            Error::NonScalarGrad { len } => {
                write!(f, "grad requires a scalar output, got {len} elements")
            }
            Error::NodeOutOfRange { id, len } => {
                write!(f, "node id {id} out of range for tape of length {len}")
            }
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::InvalidAction { action, n_actions } => {
                write!(f, "invalid action id {action}, expected 0..{n_actions}")
            }
            Error::InstanceTooLarge { detail } => write!(f, "instance too large: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    /// Wrap an I/O error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Exit code this error maps to at the CLI boundary: 2 for usage or
    /// configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
