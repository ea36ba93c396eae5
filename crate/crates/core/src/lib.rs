//! Two-stage visual place recognition retrieval.
//!
//! A query is first ranked against the gallery by cosine similarity of
//! global descriptors ([`ranker`]). The top candidates are then re-ordered
//! by the number of thresholded mutual nearest neighbours between their
//! attention-selected local features and the query's ([`reranker`]).
//! Features live in the `.efvp` container ([`feature_store`]); local
//! features come from a transformer layer's Value facet, selected by the
//! `[CLS]` attention score map ([`facets`]).

pub mod evaluator;
pub mod facets;
pub mod feature_store;
pub mod linalg;
pub mod matrix_file;
pub mod pipeline;
pub mod ranker;
pub mod reranker;
pub mod synth;

pub use feature_store::{FeatureSet, GeoKind, GeoTag, ImageRecord, LocalFeature};
pub use pipeline::RetrievalParams;

/// Crate version, reported by the CLI and the query service.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
