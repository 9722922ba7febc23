//! Labeled clouds, datasets, file loaders, scene blocks and synthetic shapes.

mod blocks;
mod loaders;
mod synthetic;

pub use blocks::{split_blocks, MIN_BLOCK_POINTS};
pub use loaders::{load_manifest, load_off, load_ply, load_xyz, sample_mesh, ManifestEntry};
pub use synthetic::{
    generate_synthetic, synthetic_classification, synthetic_segmentation, ShapeKind,
    SyntheticShapeSpec,
};

use crate::error::{bail, Result};
use crate::geometry::PointSet;

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    /// One part label per point.
    Parts(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointSet,
    pub label: Label,
    /// Object category; selects the part labels a segmentation shape may use.
    pub category: usize,
}

impl LabeledCloud {
    pub fn new(cloud: PointSet, label: Label, category: usize) -> Result<Self> {
        if let Label::Parts(p) = &label {
            if p.len() != cloud.len() {
                bail!(Input, "{} part labels for {} points", p.len(), cloud.len());
            }
        }
        Ok(Self {
            cloud,
            label,
            category,
        })
    }
}

/// A set of clouds sharing one label space.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<LabeledCloud>,
    /// Classes (classification) or total part labels (segmentation).
    pub classes: usize,
    /// Part labels allowed per category; empty for classification.
    pub category_parts: Vec<Vec<usize>>,
}

impl Dataset {
    /// Checks that every label lies in the label space.
    pub fn new(
        clouds: Vec<LabeledCloud>,
        classes: usize,
        category_parts: Vec<Vec<usize>>,
    ) -> Result<Self> {
        for (i, c) in clouds.iter().enumerate() {
            match &c.label {
                Label::Class(y) if *y >= classes => {
                    bail!(Input, "cloud {i} has class {y} outside {classes}")
                }
                Label::Parts(p) => {
                    let Some(allowed) = category_parts.get(c.category) else {
                        bail!(Input, "cloud {i} has unknown category {}", c.category);
                    };
                    if let Some(bad) = p.iter().find(|y| !allowed.contains(y)) {
                        bail!(Input, "cloud {i} has part {bad} outside its category");
                    }
                }
                _ => {}
            }
        }
        Ok(Self {
            clouds,
            classes,
            category_parts,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Feature channels of the first cloud (all clouds are expected to agree).
    pub fn feature_channels(&self) -> usize {
        self.clouds.first().map_or(0, |c| c.cloud.channels())
    }

    /// Largest cloud size.
    pub fn max_points(&self) -> usize {
        self.clouds.iter().map(|c| c.cloud.len()).max().unwrap_or(0)
    }
}
