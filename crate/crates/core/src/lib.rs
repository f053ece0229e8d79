//! Weakly-supervised visual relationship detection.
//!
//! Trains a single-layer relational graph network to classify which
//! predicates appear in an image from image-level labels only, then recovers
//! full subject-predicate-object triplets by attributing each predicate
//! prediction to the pair of input objects it is most sensitive to. A
//! class-pair prior disambiguates relation direction, and detection-style
//! metrics (recall@x, 11-point interpolated mAP) evaluate the result.

pub mod autodiff;
pub mod checkpoint;
pub mod graph;
pub mod model;
#[doc(hidden)]
pub mod testutil;
pub mod train;

pub use autodiff::{adam_step, AdamState, Array, Gradients, NodeId, PoolMode, Tape};
pub use graph::{
    build_graph, edge_features, filter_detections, iou, spatial_features, BBox, DetectedObject,
    GraphStructure, GtTriplet, ImageGraph, ImageRecord,
};
pub use checkpoint::{check_compat, load_checkpoint, save_checkpoint};
pub use model::{forward, loss, recall_at_k, ForwardPass, ModelDims, ModelParams, VisualSpec};
pub use train::{train, TrainConfig, TrainLogEntry, TrainOutcome};
