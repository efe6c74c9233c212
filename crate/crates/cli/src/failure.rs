//! Error classification and exit codes.

use std::fmt;

use scaar_core::nnet::NnetError;
use scaar_core::pipeline::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Config,
    Data,
    Runtime,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Usage => 1,
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Runtime => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Runtime => "runtime",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn msg(kind: Kind, msg: impl fmt::Display) -> Self {
        Self::new(kind, anyhow::anyhow!("{msg}"))
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": {
                "kind": self.kind.name(),
                "code": self.kind.code(),
                "message": format!("{:#}", self.error),
            }
        })
        .to_string()
    }
}

pub type CliResult<T> = Result<T, Failure>;

pub trait Classify<T> {
    fn kind(self, kind: Kind) -> CliResult<T>;
    fn kind_with<C: fmt::Display>(self, kind: Kind, context: impl FnOnce() -> C) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn kind(self, kind: Kind) -> CliResult<T> {
        self.map_err(|e| Failure::new(kind, e))
    }

    fn kind_with<C: fmt::Display>(self, kind: Kind, context: impl FnOnce() -> C) -> CliResult<T> {
        self.map_err(|e| Failure::new(kind, e.into().context(context().to_string())))
    }
}

/// Pipeline errors caused by the configuration map to [`Kind::Config`],
/// those caused by the traces to [`Kind::Data`].
pub fn from_pipeline(e: PipelineError) -> Failure {
    let kind = match &e {
        PipelineError::Config(_) | PipelineError::Sim(_) => Kind::Config,
        PipelineError::Split(_) | PipelineError::Preprocess(_) => Kind::Data,
        PipelineError::Nnet(NnetError::InvalidConfig(_) | NnetError::InvalidSpec(_)) => Kind::Config,
        PipelineError::Nnet(
            NnetError::LengthMismatch { .. } | NnetError::VariableLength | NnetError::LabelOutOfRange { .. },
        ) => Kind::Data,
        PipelineError::Nnet(_) => Kind::Runtime,
    };
    Failure::new(kind, e)
}
