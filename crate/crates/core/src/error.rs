use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("inconsistent dimension: expected {expected}, found {found} (record {record})")]
    InconsistentDimension {
        expected: usize,
        found: usize,
        record: usize,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("zero-norm query at index {0}")]
    ZeroNormQuery(usize),

    #[error("zero-norm item at index {0}")]
    ZeroNormItem(usize),

    #[error("k = {k} exceeds dataset size {n}")]
    KTooLarge { k: usize, n: usize },

    #[error("invalid split ratios {0:?}: must be non-negative and sum to 1")]
    BadRatios([f64; 3]),

    #[error("invalid graph config: {0}")]
    BadGraphConfig(String),

    #[error("node {node} out of range for graph with {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },

    #[error("checksum mismatch: header {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("budget consumed by embedding: base {base}, d = {dim}, d' = {embed_dim}")]
    BudgetConsumed {
        base: usize,
        dim: usize,
        embed_dim: usize,
    },

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("probabilities sum to {0}, expected 1")]
    BadProbabilities(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("embedding table is stale: computed for graph {table:#018x}, graph is {graph:#018x}")]
    StaleEmbeddings { table: u64, graph: u64 },

    #[error("non-finite gradient in batch {batch}: {detail}")]
    NonFiniteGradient { batch: usize, detail: String },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
