//! Semi-supervised 3-D hand pose estimation from depth crops.
//!
//! A teacher network learns from labeled crops and from equivariance
//! consistency on unlabeled crops, with per-joint uncertainty masks whose
//! thresholds follow a scheduled acceptance fraction. A student then learns
//! from an exponentially averaged copy of the teacher and is fine-tuned on
//! the labeled crops.

pub mod averaging;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod pseudolabel;
pub mod rng;
pub mod schedule;
pub mod trainer;

pub use averaging::{AveragedParams, Flavor};
pub use data::{Dataset, Sample, SplitSpec, SyntheticHandConfig};
pub use error::{Error, Result};
pub use geometry::{AffineAugmentation, AugmentationRanges, CameraIntrinsics, CropSpec, DepthFrame, JointFrame, JointSet};
pub use model::{HeatmapBundle, ModelConfig, PoseNet};
pub use pseudolabel::MaskWeights;
pub use schedule::{RhoSchedule, ThresholdState};
pub use trainer::{EpochReport, TrainConfig, TrainData, TrainOutput, Trainer};
