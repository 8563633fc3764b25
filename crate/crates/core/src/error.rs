//! Crate-wide error type and process exit-code mapping.

use std::path::PathBuf;

/// Everything that can go wrong across the pipeline.
///
/// Variants are grouped so the CLI can map each failure class to a distinct
/// process exit code (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad grid size, non-divisible factors,
    /// inconsistent stage settings, out-of-range hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Filesystem-level failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A container or checkpoint file exists but its bytes are not valid.
    #[error("format error in {path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    /// The time integration produced non-finite values.
    #[error("numerical instability at t = {time:.6} s (max |w| = {max_abs:.3e})")]
    Instability { time: f64, max_abs: f64 },

    /// A checkpoint was used in a pipeline stage it does not belong to.
    #[error("stage mismatch: {0}")]
    StageMismatch(String),

    /// A metric's defining expression is mathematically undefined for the
    /// given inputs (e.g. relative error against an all-zero reference).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// An error from a lower layer, annotated with where it happened
    /// (e.g. which simulation run failed). Keeps the inner failure class.
    #[error("{context}: {source}")]
    Annotated {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

/// Distinct corruption modes for on-disk artifacts. Each is reported
/// separately so a user can tell truncation apart from bit rot.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes (not a recognized container)")]
    BadMagic,
    #[error("unsupported container version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("checksum mismatch: metadata declares {declared}, payload hashes to {actual}")]
    Checksum { declared: String, actual: String },
    #[error("invalid metadata: {0}")]
    Metadata(String),
}

impl Error {
    /// Convenience constructor for I/O failures.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Convenience constructor for format failures.
    pub fn format(path: impl Into<PathBuf>, kind: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            kind,
        }
    }

    /// Process exit code used by the CLI for this failure class.
    ///
    /// 2 = usage, 3 = configuration, 4 = data format, 5 = numerical
    /// instability, 6 = stage mismatch, 7 = undefined metric. 1 is reserved
    /// for unexpected internal failures, 0 for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Io { .. } => 4,
            Error::Format { .. } => 4,
            Error::Instability { .. } => 5,
            Error::StageMismatch(_) => 6,
            Error::UndefinedMetric(_) => 7,
            Error::Annotated { source, .. } => source.exit_code(),
        }
    }

    /// Wrap with location context while preserving the failure class.
    pub fn annotate(self, context: impl Into<String>) -> Self {
        Error::Annotated {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        let config = Error::Config("x".into());
        let io = Error::io("/tmp/x", std::io::Error::other("x"));
        let fmt = Error::format("/tmp/x", FormatError::BadMagic);
        let unstable = Error::Instability {
            time: 1.0,
            max_abs: f64::INFINITY,
        };
        let stage = Error::StageMismatch("x".into());
        let metric = Error::UndefinedMetric("x".into());
        assert_eq!(config.exit_code(), 3);
        assert_eq!(io.exit_code(), 4);
        assert_eq!(fmt.exit_code(), 4);
        assert_eq!(unstable.exit_code(), 5);
        assert_eq!(stage.exit_code(), 6);
        assert_eq!(metric.exit_code(), 7);
    }

    #[test]
    fn format_errors_render_distinct_messages() {
        let kinds = [
            FormatError::BadMagic.to_string(),
            FormatError::Version {
                found: 9,
                supported: 1,
            }
            .to_string(),
            FormatError::Truncated {
                expected: 10,
                found: 3,
            }
            .to_string(),
            FormatError::Checksum {
                declared: "aa".into(),
                actual: "bb".into(),
            }
            .to_string(),
            FormatError::Metadata("missing field".into()).to_string(),
        ];
        for (i, a) in kinds.iter().enumerate() {
            for b in kinds.iter().skip(i + 1) {
                assert_ne!(a, b);
            }
        }
    }
}
