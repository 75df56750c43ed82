//! Training, ablation, per-variation evaluation, gradient checks and exports.

pub mod ablate;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod plot;
pub mod train;
pub mod variation;

use std::path::Path;

use thiserror::Error;

use crate::bank::BankError;
use crate::detector::DetectorError;
use crate::reasoner::ReasonerError;
use crate::relation::RelationError;
use crate::synth::SynthError;
use crate::tensor::TensorError;

pub use ablate::{run_ablation, AblationRow, AblationTable};
pub use config::RunConfig;
pub use data::make_data;
pub use gradcheck::{run_gradcheck, GradcheckEntry};
pub use plot::{pca_2d, plot_bank, plot_bank_training};
pub use train::{run_training, Dataset, RunOutcome, RunSummary, Session, StepLosses, METRICS_SCHEMA};
pub use variation::{eval_by_variation, VariationReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}; last good checkpoint kept")]
    Diverged { what: &'static str, epoch: usize, step: usize },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{0}")]
    Incompatible(String),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|source| HarnessError::Json { path: path.display().to_string(), source })?;
    write_file(path, text + "\n")
}

/// `Some(x)` as `x` with the given precision, `None` as `n/a`.
pub fn fmt_opt(v: Option<f64>, precision: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.precision$}"))
}
