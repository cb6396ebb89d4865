//! Training, inference and evaluation for the predictive and contrastive
//! objectives, plus the shared config, metrics and report plumbing.

mod config;
mod contrastive;
mod fsl;
mod heads;
mod labeling;
mod metrics;
mod report;
mod train;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::encoder::EncoderError;
use crate::graph::GraphError;
use crate::nn::NnError;
use crate::oracle::OracleError;

pub use config::{sha256_hex, ConfigError, FslTarget, OracleConfig, PathsConfig, RunConfig, TrainConfig};
pub use contrastive::{
    component_readouts, null_retrieval_items, positive_for, readouts, retrieval_items, train_contrastive, PositiveMode,
};
pub use fsl::{
    evaluate_fsl, fsl_head, infer_global, init_fsl_head, predict_head, reconstruct, train_fsl, FslEvaluation,
    FslPredictor, Inference, ShiftSource, FSL_HEAD,
};
pub use heads::{
    evaluate_similarity, evaluate_transition, init_similarity_head, init_transition_head, predict_similarity,
    predict_transition, similarity_head, train_similarity, train_transition, transition_head, SIM_HEAD,
    TRANSITION_HEAD,
};
pub use labeling::{label_record, LabelRequest, SIM_PAIRS_PER_NODE};
pub use metrics::{cosine, eval_regression, eval_retrieval, positive_rank, RegressionMetrics, RetrievalItem};
pub use report::{dataset_id, loss_curve_csv, Report, ReportMetadata, TOOL_VERSION};
pub use train::TrainRun;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("MissingLabels: record '{record}' has no '{channel}' channel")]
    MissingLabels { channel: &'static str, record: String },
    #[error("contrastive training needs a batch of at least 2 circuits, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite loss in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("{0}")]
    Metrics(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}
