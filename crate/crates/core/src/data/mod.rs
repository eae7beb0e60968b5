//! Datasets: the generic on-disk format, splitting, batching and a
//! procedural depth-hand generator.

mod batch;
mod format;
mod split;
pub mod synthetic;

use serde::{Deserialize, Serialize};

pub use batch::{batches, cycled_batches, epoch_batches, Batch, BatchStream};
pub use format::{load_generic, save_generic, FORMAT_VERSION};
pub use split::{split, Split, SplitSpec};
pub use synthetic::{generate_synthetic, SyntheticHandConfig};

use crate::error::{Error, Result};
use crate::geometry::{crop_and_normalize, CameraIntrinsics, DepthFrame, JointFrame, JointSet, RawDepth};

/// Dataset-wide metadata stored in `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub intrinsics: CameraIntrinsics,
    pub n_joints: usize,
    pub cube_mm: f64,
    pub joint_names: Vec<String>,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        let cfg = SyntheticHandConfig::default();
        Self {
            intrinsics: cfg.intrinsics,
            n_joints: cfg.n_joints(),
            cube_mm: cfg.cube_mm,
            joint_names: cfg.joint_names(),
        }
    }
}

/// One stored sample: the raw depth raster plus its crop centre and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub depth: RawDepth,
    pub center_xyz: [f64; 3],
    /// Camera-frame labels, if known.
    pub joints: Option<JointSet>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<Record>,
}

/// A cropped training/evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub frame: DepthFrame,
    /// Camera-frame labels; `None` for unlabeled samples.
    pub joints: Option<JointSet>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Crops every record to `out_size` pixels around its stored centre.
    pub fn samples(&self, out_size: usize) -> Result<Vec<Sample>> {
        self.records
            .iter()
            .map(|r| {
                if let Some(j) = &r.joints {
                    j.expect_frame(JointFrame::CameraMm)?;
                    if j.len() != self.meta.n_joints {
                        return Err(Error::Shape(format!(
                            "record {} has {} joints, dataset declares {}",
                            r.id,
                            j.len(),
                            self.meta.n_joints
                        )));
                    }
                }
                let frame =
                    crop_and_normalize(&r.depth, &self.meta.intrinsics, r.center_xyz, self.meta.cube_mm, out_size)?;
                Ok(Sample { id: r.id.clone(), frame, joints: r.joints.clone() })
            })
            .collect()
    }
}
