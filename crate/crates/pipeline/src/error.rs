use std::path::PathBuf;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("cannot read config {path}: {source}")]
    ConfigFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("config key `{key}`: {reason}")]
    ConfigValue { key: String, reason: String },

    #[error("manifest {0} lists no cases")]
    EmptyManifest(PathBuf),

    #[error("initial checkpoint is incompatible with the model config: {0}")]
    IncompatibleInit(#[source] modfuse_core::Error),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("no prediction for case `{0}`")]
    MissingCase(String),

    #[error(transparent)]
    Core(#[from] modfuse_core::Error),
}

impl PipelineError {
    pub(crate) fn value(key: &str, reason: impl Into<String>) -> Self {
        PipelineError::ConfigValue {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        use modfuse_core::Error as E;
        match self {
            PipelineError::ConfigFile { .. }
            | PipelineError::ConfigSyntax { .. }
            | PipelineError::UnknownKey(_)
            | PipelineError::ConfigValue { .. }
            | PipelineError::IncompatibleInit(_) => 2,
            PipelineError::EmptyManifest(_) | PipelineError::InvalidData(_) | PipelineError::MissingCase(_) => 3,
            PipelineError::Core(e) => match e {
                E::ConfigInvalid(_)
                | E::ConfigMismatch { .. }
                | E::SpecInfeasible(_)
                | E::EpochOutOfRange { .. }
                | E::EmptyRegionList => 2,
                _ => 3,
            },
        }
    }
}
