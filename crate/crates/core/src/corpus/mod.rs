//! Circuit ingestion, generation, rewriting and dataset storage.

mod aiger;
mod dataset;
mod generate;
mod rewrite;

use thiserror::Error;

use crate::graph::{GraphError, OperatorKind};

pub use aiger::{parse_aiger, serialize_aiger};
pub use dataset::{from_jsonl, read_dataset, to_jsonl, write_atomic, write_dataset, DatasetRecord, LabelChannels};
pub use generate::{generate_random_aig, generate_random_tree, with_random_pi_params, GeneratorSpec};
pub use rewrite::{
    applicable_sites, apply_rewrite, apply_rewrite_at, random_equivalent, RewriteKind, RewriteOutcome, RewriteRule,
    RewriteSite,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("AIGER parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0} cannot be written as AIGER; lower it to AND/NOT first")]
    UnsupportedKind(OperatorKind),
    #[error("dataset schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
}
