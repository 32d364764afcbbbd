//! Joint semantic and instance segmentation of 3D point clouds.
//!
//! The pipeline runs a multi-task pointwise network over overlapping
//! windows, clusters the predicted instance embeddings with mean-shift,
//! refines both label fields jointly with mean-field inference on a
//! multi-value CRF, merges window results into scene instances and
//! suppresses duplicates. [`eval`] scores the result.

pub mod crf;
pub mod error;
pub mod eval;
pub mod loss;
pub mod meanshift;
pub mod merge;
pub mod network;
pub mod parallel;
pub mod pipeline;
pub mod scene;

pub use crf::{Ablation, CrfConfig, JointLabeling, LabelState};
pub use error::{Error, Result};
pub use loss::{InstancePartition, LossConfig};
pub use eval::EvalReport;
pub use meanshift::{ClusterResult, MeanShiftConfig};
pub use merge::{MergeConfig, SegmentationResult};
pub use pipeline::{segment_scene, PipelineConfig, SceneOutput};
pub use network::{NetworkConfig, NetworkParams, PredictionField, TrainConfig};
pub use scene::labels::LabelRecord;
pub use scene::window::{Window, WindowConfig};
pub use scene::{PointCloud, Vec3, Vertex};
