//! Dataset ingestion, splitting, training, evaluation and feature analysis.

mod analysis;
mod dataset;
mod infer;
mod metrics;
mod run;
mod split;
mod task;
mod train;

pub use analysis::{
    analyze_features, correlation_matrix, pca, shannon_entropy, write_analysis, Analysis, Pca,
    Representation,
};
pub use dataset::{
    load_dataset, read_dataset, record_id, DatasetBundle, LoadOptions, Record, SkipEntry,
    MAX_SKIP_RATE,
};
pub use infer::{CheckpointMeta, Predictor, SinglePrediction};
pub use metrics::{auroc, multitask_auroc, rmse, MetricError, MultiTaskAuroc};
pub use run::{
    analyze_run, eval_run, train_run, KnowledgeSection, ModelSection, ProviderConfig, RunConfig,
    RunSummary, TaskRef, SCHEMA_VERSION,
};
pub use split::{assign_splits, random_split, scaffold_split, Split};
pub use task::{LabelColumns, SplitPolicy, Standardization, TaskSpec};
pub use train::{
    build_batch, evaluate, predict_records, standardize_targets, train, EpochReport, Evaluation,
    MetricKind, TrainConfig, TrainOutcome,
};

use thiserror::Error;

use crate::chem::ParseError;
use crate::knowledge::KnowledgeError;
use crate::model::ModelError;
use crate::numkit::OptimError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Smiles(#[from] ParseError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: String,
        epoch: usize,
        batch: usize,
    },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Short machine-readable category: `config`, `data`, `numeric` or `io`.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Data(_) | PipelineError::Smiles(_) | PipelineError::Csv(_) => "data",
            PipelineError::Knowledge(KnowledgeError::Config(_)) => "config",
            PipelineError::Knowledge(KnowledgeError::Io(_) | KnowledgeError::Http { .. }) => "io",
            PipelineError::Knowledge(_) => "data",
            PipelineError::Model(ModelError::Config(_)) => "config",
            PipelineError::Model(ModelError::Input(_) | ModelError::Checkpoint(_)) => "data",
            PipelineError::Model(ModelError::Io(_)) | PipelineError::Io(_) => "io",
            PipelineError::Json(_) => "config",
            PipelineError::Model(_)
            | PipelineError::Metric(_)
            | PipelineError::NonFinite { .. }
            | PipelineError::Optim(_) => "numeric",
        }
    }
}
