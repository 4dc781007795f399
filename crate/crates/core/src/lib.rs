//! Core algorithms for CREPE-style scene graph predicate classification:
//! dataset ingestion, box geometry features, a seeded vision/language encoder
//! stub, pseudo-label retrieval, visually conditioned prompt learning, a
//! translational predicate head, frequency calibration, and mean-recall
//! evaluation.

pub mod autodiff;
pub mod baseline;
pub mod calibrate;
pub mod checkpoint;
pub mod data;
pub mod embed;
pub mod error;
pub mod features;
pub mod geometry;
pub mod head;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod prompt;

pub use data::{BoundingBox, DatasetSplit, Entity, RelationInstance, Scene, Vocabulary};
pub use embed::{cosine_sim, EmbeddingVector};
pub use error::{Error, Result};
pub use geometry::LocationFeature;
