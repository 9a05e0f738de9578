//! Distinctiveness tooling for image captioning.
//!
//! Builds similar-image groups in a shared image/text embedding space,
//! measures how well captions single out their image (retrieval recall and
//! group embedding gaps), scores CIDEr-D, and combines both into a
//! self-critical policy-gradient reward. [`toytrain`] wires everything into a
//! small synthetic world that can be trained end to end.

pub mod ciderscore;
pub mod distmetrics;
pub mod embedstore;
pub mod groups;
pub mod scstreward;
pub mod toytrain;

pub use embedstore::{cosine, similarity, EmbeddingStore, EntryId, EntryKind, StoreError};
pub use groups::{build_all, build_group, score_pair, GroupFile, SimilarGroup};
