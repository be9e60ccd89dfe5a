//! Weakly supervised referring-expression grounding.
//!
//! Given an image's region proposals and a query, the network scores every
//! proposal along three cues (subject appearance, location, context), mixes
//! the cue scores with query-dependent weights, and picks the best proposal.
//! Training never sees which proposal a query refers to: proposal attention
//! is learned through word-vector entity supervision and by reconstructing
//! the query and its phrase features from the attended proposals.
//!
//! Module map:
//!
//! - [`data`]: boxes, scenes, queries and the JSON Lines dataset format
//! - [`synth`]: a synthetic scene/query benchmark with known referents
//! - [`visual`]: location and context pair features
//! - [`lang`]: the query encoder
//! - [`entity`]: word-vector similarity, entity attention, filters, context pooling
//! - [`grounding`]: per-cue matching and cue-weighted combination
//! - [`reconstruct`]: reconstruction and attribute losses, loss composition
//! - [`model`]: the assembled network
//! - [`train`]: optimizer, schedule, checkpoints
//! - [`eval`]: accuracy, ablations and reports
//! - [`report`]: SVG charts from the CSV logs

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod entity;
pub mod error;
pub mod eval;
pub mod grounding;
pub mod lang;
pub mod model;
pub mod nn;
pub mod report;
pub mod reconstruct;
pub mod synth;
pub mod train;
pub mod visual;

pub use data::{compute_iou, load_dataset, save_dataset, BBox, Dataset, Query, QueryKind, Scene};
pub use error::{Error, Result};
pub use model::{Earn, ModelConfig};
pub use train::{train, TrainConfig};
