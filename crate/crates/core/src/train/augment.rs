//! Training-time scale and jitter augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{Point3, PointSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub scale_min: f64,
    pub scale_max: f64,
    pub jitter_std: f64,
    /// Jitter is clipped to this many standard deviations.
    #[serde(default = "default_clip")]
    pub jitter_clip: f64,
}

fn default_clip() -> f64 {
    3.0
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            scale_min: 0.8,
            scale_max: 1.2,
            jitter_std: 0.02,
            jitter_clip: 3.0,
        }
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            jitter_std: 0.0,
            jitter_clip: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0) || self.scale_max < self.scale_min {
            bail!(
                Config,
                "augment scale range [{}, {}] is invalid",
                self.scale_min,
                self.scale_max
            );
        }
        if !(self.jitter_std >= 0.0) || !(self.jitter_clip >= 0.0) {
            bail!(Config, "augment jitter must be nonnegative");
        }
        Ok(())
    }
}

/// Scales every coordinate by one factor drawn for the cloud, then adds
/// clipped Gaussian jitter per coordinate.
pub fn augment_coords(coords: &[Point3], spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    let s = if spec.scale_max > spec.scale_min {
        rng.random_range(spec.scale_min..=spec.scale_max)
    } else {
        spec.scale_min
    };
    let clip = spec.jitter_clip * spec.jitter_std;
    let normal =
        (spec.jitter_std > 0.0).then(|| Normal::new(0.0, spec.jitter_std).expect("std > 0"));
    coords
        .iter()
        .map(|p| {
            let mut q = [p[0] * s, p[1] * s, p[2] * s];
            if let Some(n) = &normal {
                for v in &mut q {
                    *v += n.sample(rng).clamp(-clip, clip);
                }
            }
            q
        })
        .collect()
}

/// [`augment_coords`] on a cloud; features are untouched.
pub fn augment(cloud: &PointSet, spec: &AugmentSpec, rng: &mut ChaCha8Rng) -> Result<PointSet> {
    PointSet::new(
        augment_coords(cloud.coords(), spec, rng),
        cloud.features().clone(),
    )
}
