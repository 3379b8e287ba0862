//! DocRED-format documents, relation schemas, statistics, low-resource
//! subsampling and synthetic corpus generation.

mod document;
mod schema;
mod stats;
mod subsample;
mod synthetic;

pub use document::{load_docred, save_docred, Label, Mention, RawDocument};
pub use schema::{load_schema, save_schema, RelationDef, RelationSchema, NA_DESCRIPTION, NA_ID};
pub use stats::{relation_frequencies, save_stats, stats, CorpusStats};
pub use subsample::{
    l1_distance, label_distance, subsample, Subsample, DEFAULT_MAX_ATTEMPTS, DEFAULT_TOLERANCE,
};
pub use synthetic::{generate_synthetic, synthetic_schema, SyntheticConfig, SyntheticCorpus};
