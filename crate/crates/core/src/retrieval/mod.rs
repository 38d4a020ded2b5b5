//! Sketch embedders and exact retrieval over component, contour and pose
//! repositories.

pub mod embedder;
pub mod index;

pub use embedder::{EmbedderConfig, EmbedderReport, EmbedderTraining, SketchEmbedder, MIN_TRAINING_PATCHES};
pub use index::{
    component_items, l2, merge_shadow, rerank_by_strokes, retrieve_component, retrieve_global_by_pose, shadow_for,
    IndexEntry, IndexItem, IndexManifest, RetrievalIndex, INDEX_FORMAT, INDEX_VERSION,
};
