//! Optimizer, loss, augmentation, metrics, checkpoints and the epoch loop.

mod augment;
mod checkpoint;
mod fit;
mod loss;
mod metrics;
mod optim;

pub use augment::{augment, augment_coords, AugmentSpec};
pub use checkpoint::{Checkpoint, MAGIC};
pub use fit::{
    evaluate, fit, recalibrate, snapshot, EpochRow, EvalResult, FitOutput, TrainConfig,
    METRICS_HEADER,
};
pub use loss::{cross_entropy, softmax_rows};
pub use metrics::{accuracy, segmentation_scores, shape_iou, SegmentationScores};
pub use optim::{adam_step, AdamConfig, OptimState};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::Point3;
use crate::tensor::Float;

/// Per-point input channels fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// The (augmented) coordinates.
    Xyz,
    /// A constant 1; all geometric information then enters through the
    /// kernels.
    Ones,
    /// The cloud's stored feature channels.
    Features,
    /// Coordinates followed by stored features.
    XyzFeatures,
}

impl FeatureMode {
    pub fn channels(self, stored: usize) -> usize {
        match self {
            FeatureMode::Xyz => 3,
            FeatureMode::Ones => 1,
            FeatureMode::Features => stored,
            FeatureMode::XyzFeatures => 3 + stored,
        }
    }

    /// Appends the input rows of one cloud to `out`.
    pub fn extend_rows(
        self,
        coords: &[Point3],
        stored: &[Float],
        out: &mut Vec<Float>,
    ) -> Result<()> {
        let c = if coords.is_empty() {
            0
        } else {
            stored.len() / coords.len()
        };
        if c * coords.len() != stored.len() {
            bail!(
                Dimension,
                "{} stored values for {} points",
                stored.len(),
                coords.len()
            );
        }
        if matches!(self, FeatureMode::Features) && c == 0 {
            bail!(
                Input,
                "feature mode `features` on a cloud without stored features"
            );
        }
        for (i, p) in coords.iter().enumerate() {
            if matches!(self, FeatureMode::Xyz | FeatureMode::XyzFeatures) {
                out.extend(p.iter().map(|&v| v as Float));
            }
            match self {
                FeatureMode::Ones => out.push(1.0),
                FeatureMode::Features | FeatureMode::XyzFeatures => {
                    out.extend_from_slice(&stored[i * c..(i + 1) * c])
                }
                FeatureMode::Xyz => {}
            }
        }
        Ok(())
    }
}
