use std::fmt;

use schemex::training::{CorpusError, TrainError};
use schemex::{ExtractError, ModelError, ModelFileError, PromptError, SchemaError};

/// A command failure with its exit code class.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    File(String),
    Schema(String),
    Overflow(String),
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::File(_) => 3,
            Failure::Schema(_) => 4,
            Failure::Overflow(_) => 5,
            Failure::Internal(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::File(_) => "file",
            Failure::Schema(_) => "schema",
            Failure::Overflow(_) => "overflow",
            Failure::Internal(_) => "internal",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::File(m) | Failure::Schema(m) | Failure::Overflow(m) | Failure::Internal(m) => {
                m
            }
        }
    }

    /// One-line JSON form printed on standard error.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "message": self.message(),
        })
        .to_string()
    }

    pub fn file(path: &str, e: impl fmt::Display) -> Self {
        Failure::File(format!("{path}: {e}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

impl From<ExtractError> for Failure {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::Prompt(PromptError::ContextOverflow { .. })
            | ExtractError::Model(ModelError::SequenceTooLong { .. }) => Failure::Overflow(e.to_string()),
            ExtractError::SchemaInvalid(_) | ExtractError::Prompt(_) => Failure::Schema(e.to_string()),
            ExtractError::Model(_) => Failure::Internal(e.to_string()),
        }
    }
}

impl From<SchemaError> for Failure {
    fn from(e: SchemaError) -> Self {
        Failure::Schema(e.to_string())
    }
}

impl From<ModelFileError> for Failure {
    fn from(e: ModelFileError) -> Self {
        Failure::File(e.to_string())
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::File(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            TrainError::EmptyCorpus => Failure::File(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}
