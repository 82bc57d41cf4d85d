//! From raw impression logs to model-ready instances.
//!
//! Records are read from JSON Lines or CSV, folded into per-exposure CTR
//! instances, cleaned of rare attribute levels, and encoded against an
//! [`AuxSchema`] into one-hot plus text-embedding vectors. Image-side
//! attributes come from [`dominant_color`]; distribution targets come from
//! [`ctr_to_distribution`].

mod aggregate;
mod bucket;
mod color;
mod embedding;
mod records;
mod schema;

pub use aggregate::{aggregate, merge_rare_levels, AggregatedInstance, Aggregator, LevelMerge, DEFAULT_MERGE_THRESHOLD};
pub use bucket::{bucket_edges, bucket_values, ctr_to_distribution, LOGNORMAL_SHAPE, CTR_FLOOR};
pub use color::{
    dominant_color, dominant_color_with, kmeans, kmeans_pp_init, mcd_covariance, palette_name, ColorOptions, KMeans,
    Mcd, Metric, PALETTE,
};
pub use embedding::{EmbeddingStore, MissingPolicy, EMBEDDING_DIM};
pub use records::{
    read_csv, read_instances_jsonl, read_jsonl, write_instances_jsonl, write_jsonl, ImpressionRecord, ReadReport,
    Reject,
};
pub use schema::{encode_aux, AttrKind, AttributeSpec, AuxSchema, REALAD_ATTRIBUTES, TEXT_SLOTS};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("no embedding for text {0:?}")]
    MissingEmbedding(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}
