use std::path::PathBuf;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("missing artifact: {0}")]
    Missing(PathBuf),
    #[error("{0} exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] reprobe_core::Error),
    #[error("{0}")]
    Invalid(String),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return LabError::Missing(path.into());
        }
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for anything the user can fix by editing configs or paths, 2 for
    /// failures during computation or writing.
    pub fn exit_code(&self) -> i32 {
        use reprobe_core::Error as E;
        match self {
            LabError::Config { .. }
            | LabError::Missing(_)
            | LabError::Exists(_)
            | LabError::Malformed { .. }
            | LabError::Format { .. }
            | LabError::Invalid(_) => 1,
            LabError::Core(
                E::InvalidConfig(_) | E::UnknownProperty(_) | E::LayerOutOfRange { .. } | E::Unattainable(_),
            ) => 1,
            LabError::Core(_) | LabError::Io { .. } => 2,
        }
    }
}
