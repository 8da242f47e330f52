use std::path::{Path, PathBuf};

use dacdet_core::evalmap::EvalError;
use dacdet_core::gradcheck::GradCheckError;
use dacdet_core::losses::LossBreakdown;
use dacdet_core::model::ModelError;
use dacdet_core::synth::SynthError;
use dacdet_core::train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration or arguments. Exit code 1.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{what} format version {found} is not supported (expected {supported})")]
    VersionMismatch { what: &'static str, found: u32, supported: u32 },
    #[error("corrupt record {record}: {detail}")]
    CorruptRecord { record: String, detail: String },
    #[error("manifest integrity: {0}")]
    ManifestIntegrity(String),
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFinite { step: u64, breakdown: LossBreakdown },
    #[error("training failed at step {step}: {source}")]
    Train { step: u64, source: TrainError },
    #[error("gradient check failed (max relative error {max_rel_error:e}); offending parameters: {params:?}")]
    GradCheckFailed { max_rel_error: f64, params: Vec<String> },
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io { path: path.to_path_buf(), source }
        }
    }

    pub fn corrupt(record: impl Into<String>, detail: impl ToString) -> Self {
        Error::CorruptRecord { record: record.into(), detail: detail.to_string() }
    }

    /// 1 for validation problems, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Synth(SynthError::InvalidConfig(_) | SynthError::InvalidDegradation(_)) => 1,
            Error::GradCheck(GradCheckError::InvalidConfig(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
