use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] anople_core::Error),

    #[error("cannot parse {path}: {source}")]
    ConfigFile {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2: configuration, 3: data ingestion, 4: undefined metric, 1: anything else.
    pub fn exit_code(&self) -> ExitCode {
        use anople_core::Error as E;
        let code = match self {
            CliError::ConfigFile { .. } | CliError::Usage(_) => 2,
            CliError::Core(E::Config(_) | E::Tokenizer { .. } | E::Checkpoint(_)) => 2,
            CliError::Core(E::Ingestion { .. } | E::Image(_)) => 3,
            CliError::Core(E::Metric(_)) => 4,
            _ => 1,
        };
        ExitCode::from(code)
    }
}
