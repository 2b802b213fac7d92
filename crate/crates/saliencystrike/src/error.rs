//! Error type shared across the toolkit.
//!
//! Variants are grouped by how the command-line front end reports them:
//! configuration problems, file problems (I/O, parsing, format versions),
//! and numeric failures detected during optimization.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes the library surfaces.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value or argument combination.
    Config(String),
    /// A tensor or point-cloud shape did not match what an operation requires.
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// An index was outside the valid range for its container.
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },
    /// A size request exceeded what the data can provide (e.g. more
    /// neighbours than points).
    Capacity(String),
    /// A dataset or file held semantically invalid contents.
    Data(String),
    /// A computation produced a non-finite value.
    Numeric(String),
    /// Line-oriented parse failure (point files, manifests, config files).
    ParseLine {
        what: String,
        line: usize,
        msg: String,
    },
    /// Byte-oriented parse failure (checkpoints).
    ParseByte {
        what: String,
        offset: usize,
        msg: String,
    },
    /// A versioned file declared a version this build does not understand.
    Version { found: String, expected: String },
    /// An underlying I/O failure, with the path or action that triggered it.
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an I/O error with the path or action that caused it.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Shorthand for a shape mismatch.
    pub fn shape(context: &'static str, expected: impl fmt::Display, got: impl fmt::Display) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Shape {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected shape {expected}, got {got}"),
            Error::Index {
                context,
                index,
                len,
            } => write!(f, "{context}: index {index} out of range for length {len}"),
            Error::Capacity(msg) => write!(f, "capacity exceeded: {msg}"),
            Error::Data(msg) => write!(f, "invalid data: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::ParseLine { what, line, msg } => {
                write!(f, "parse error in {what} at line {line}: {msg}")
            }
            Error::ParseByte { what, offset, msg } => {
                write!(f, "parse error in {what} at byte {offset}: {msg}")
            }
            Error::Version { found, expected } => {
                write!(f, "unsupported format version {found:?} (this build reads {expected:?})")
            }
            Error::Io { context, source } => write!(f, "{context}: {source}"),
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_mentions_context() {
        let e = Error::shape("affine_map", "[2, 3]", "[2, 4]");
        assert_eq!(e.to_string(), "affine_map: expected shape [2, 3], got [2, 4]");

        let e = Error::ParseLine {
            what: "points.xyz".into(),
            line: 7,
            msg: "expected 3 coordinates".into(),
        };
        assert!(e.to_string().contains("line 7"));

        let e = Error::Version {
            found: "saliencystrike-ckpt v2".into(),
            expected: "saliencystrike-ckpt v1".into(),
        };
        assert!(e.to_string().contains("v2"));
        assert!(e.to_string().contains("v1"));
    }

    #[test]
    fn io_errors_expose_their_source() {
        let inner = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let e = Error::io("reading model.ckpt", inner);
        assert!(std::error::Error::source(&e).is_some());
        assert!(e.to_string().contains("model.ckpt"));
    }
}
