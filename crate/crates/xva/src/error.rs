use thiserror::Error;

pub type Result<T> = std::result::Result<T, XvaError>;

#[derive(Debug, Error)]
pub enum XvaError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("model configuration: {0}")]
    ModelConfig(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: u64,
        msg: String,
    },

    #[error("{solver} did not converge in {iterations} iterations (residual {residual:.3e})")]
    Convergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("estimation: {0}")]
    Estimation(String),

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<XvaError>,
    },

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl XvaError {
    /// Process exit code used by the CLI and mirrored by the C ABI.
    pub fn exit_code(&self) -> i32 {
        match self {
            XvaError::Convergence { .. } => 3,
            XvaError::Io(_) => 4,
            XvaError::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> XvaError {
        match self {
            XvaError::Stage { .. } => self,
            other => XvaError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, with stage wrappers removed.
    pub fn root(&self) -> &XvaError {
        match self {
            XvaError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
