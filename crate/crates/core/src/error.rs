//! Error type shared across the crate.
//!
//! Everything that can go wrong at runtime is funneled into [`Error`] so that
//! callers (the CLI in particular) can print one coherent message and exit.
//! Shape mismatches and config violations are programmer/config errors; they
//! are still reported as values rather than panics so the CLI can surface
//! them cleanly.

use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape disagreement (bad matmul dims, wrong gate width, ...).
    Shape(String),
    /// Invalid configuration (violated invariants, unknown keys, bad ranges).
    Config(String),
    /// A value that must stay finite became NaN or infinite.
    NonFinite(String),
    /// A runtime invariant was violated (gate outside (0,1), empty softmax
    /// support, zero-mass renormalization, ...).
    Invariant(String),
    /// Checkpoint serialization / deserialization problems.
    Checkpoint(String),
    /// Malformed textual input (metrics CSV, config files, CLI values).
    Parse(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Invariant(msg) => write!(f, "invariant violated: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_includes_category_and_message() {
        let e = Error::Shape("lhs 2x3 vs rhs 4x5".to_string());
        assert!(e.to_string().contains("shape error"));
        assert!(e.to_string().contains("2x3"));
    }

    #[test]
    fn io_error_round_trips_through_from() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let e: Error = io.into();
        assert!(e.to_string().contains("gone"));
    }
}
