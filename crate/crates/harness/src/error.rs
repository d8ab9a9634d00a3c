use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<HarnessError>,
    },

    #[error(transparent)]
    Core(#[from] tasgen_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config parse error in {path}: {msg}")]
    ConfigParse {
        path: std::path::PathBuf,
        msg: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for bad configuration or malformed input data.
    pub fn is_validation(&self) -> bool {
        use tasgen_core::Error as E;
        match self {
            HarnessError::Validation(_) | HarnessError::ConfigParse { .. } => true,
            HarnessError::Core(e) => matches!(
                e,
                E::Config(_) | E::Validation(_) | E::Schema(_) | E::Parse { .. }
            ),
            HarnessError::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub fn exit_code(&self) -> u8 {
        if self.is_validation() {
            2
        } else {
            1
        }
    }
}
