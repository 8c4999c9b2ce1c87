use std::path::PathBuf;

/// Error type shared across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or feature shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid argument or configuration (bad acceleration factor, depth < 2,
    /// incompatible batch size, ...). For config-file validation the message
    /// lists every failure, one per line.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A file exists but its contents do not match the expected format.
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Filesystem failure with the path that caused it.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A NaN or infinity appeared where finite values are required; the
    /// message names the tensor or parameter group and, during training,
    /// the epoch/batch where it was detected.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A metric's preconditions do not hold (zero peak, constant reference,
    /// window larger than the image, ...).
    #[error("metric undefined: {0}")]
    Metric(String),

    /// A pipeline stage failed; names the stage so a halted run is easy to
    /// locate in a multi-stage experiment.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Format-level parse failure for the file at `path`.
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wrap an error with the name of the pipeline stage it occurred in.
    pub fn in_stage(stage: &str, source: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }
}
