use sentemb::cache::CacheError;
use sentemb::eval::EvalError;
use sentemb::formats::FormatError;
use sentemb::icl::IclError;
use sentemb::represent::RepresentError;
use sentemb::train::TrainError;
use sentemb::types::DataError;
use sentemb::BackendError;
use serde::Serialize;
use thiserror::Error;

/// Command failure, classified by the exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration (exit 1).
    #[error("{0}")]
    Config(String),
    /// Missing, unreadable or malformed inputs and outputs (exit 2).
    #[error("{0}")]
    Data(String),
    /// Model, labeler or adapter failures (exit 3).
    #[error("{0}")]
    Backend(String),
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    exit_code: i32,
    message: String,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Backend(_) => "backend",
        }
    }

    /// `{"error": {"kind", "exit_code", "message"}}` for stderr.
    pub fn to_json(&self) -> String {
        let body = ErrorBody {
            kind: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        };
        serde_json::json!({ "error": body }).to_string()
    }

    /// Prefixes the message with where the failure happened.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{what}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{what}: {m}")),
            CliError::Backend(m) => CliError::Backend(format!("{what}: {m}")),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        CliError::Data(format!("embedding cache: {e}"))
    }
}

impl From<RepresentError> for CliError {
    fn from(e: RepresentError) -> Self {
        match e {
            RepresentError::Backend { .. } => CliError::Backend(e.to_string()),
            RepresentError::DemonstrationNotAllowed | RepresentError::ZeroBatchSize => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let backend = matches!(
            &e,
            EvalError::Embedding {
                source: RepresentError::Backend { .. },
                ..
            }
        );
        match e {
            _ if backend => CliError::Backend(e.to_string()),
            EvalError::InvalidHyperparameter(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::AdapterUnsupported(_) | TrainError::Backend(_) => CliError::Backend(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<IclError> for CliError {
    fn from(e: IclError) -> Self {
        match e {
            IclError::GenerationUnsupported | IclError::LabelingFailed(_) => CliError::Backend(e.to_string()),
            IclError::Demo { source, index } => {
                let what = index.map_or("baseline".to_string(), |i| format!("demonstration {i}"));
                CliError::from(source).context(what)
            }
            IclError::ZeroBins => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
