//! Analytic surface sampling for desk-scale datasets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, LabeledCloud};
use crate::error::{bail, Result};
use crate::geometry::{normalize_coords, Point3, PointSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Unit sphere.
    Sphere,
    /// Surface of `[-1, 1]³`; part = face index.
    Cube,
    /// Radius 1, `z ∈ [-1, 1]`; wall is part 0, caps part 1.
    Cylinder,
    /// Square `[-1, 1]²` at `z = 0`.
    Plane,
    /// Major radius 1, minor radius 0.35.
    Torus,
}

impl ShapeKind {
    /// Number of part labels the kind produces.
    pub fn parts(self) -> usize {
        match self {
            ShapeKind::Cube => 6,
            ShapeKind::Cylinder => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShapeSpec {
    pub kind: ShapeKind,
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
}

const TORUS_MINOR: f64 = 0.35;

fn unit_vector(rng: &mut ChaCha8Rng) -> Point3 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Point3 = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if r > 1e-9 {
            return [v[0] / r, v[1] / r, v[2] / r];
        }
    }
}

fn sample_surface(kind: ShapeKind, rng: &mut ChaCha8Rng) -> (Point3, usize) {
    match kind {
        ShapeKind::Sphere => (unit_vector(rng), 0),
        ShapeKind::Cube => {
            let face = rng.random_range(0..6usize);
            let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            let p = match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            };
            (p, face)
        }
        ShapeKind::Cylinder => {
            // Wall area 4π, caps 2π together.
            if rng.random::<f64>() < 2.0 / 3.0 {
                let t = rng.random_range(0.0..2.0 * PI);
                ([t.cos(), t.sin(), rng.random_range(-1.0..1.0)], 0)
            } else {
                let t = rng.random_range(0.0..2.0 * PI);
                let r = rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { 1.0 } else { -1.0 };
                ([r * t.cos(), r * t.sin(), z], 1)
            }
        }
        ShapeKind::Plane => (
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                0.0,
            ],
            0,
        ),
        ShapeKind::Torus => loop {
            // Area element is proportional to R + r·cos(v).
            let u = rng.random_range(0.0..2.0 * PI);
            let v = rng.random_range(0.0..2.0 * PI);
            let w = (1.0 + TORUS_MINOR * v.cos()) / (1.0 + TORUS_MINOR);
            if rng.random::<f64>() < w {
                let ring = 1.0 + TORUS_MINOR * v.cos();
                break ([ring * u.cos(), ring * u.sin(), TORUS_MINOR * v.sin()], 0);
            }
        },
    }
}

/// Area-uniform surface samples plus isotropic Gaussian noise, with per
/// point part labels. Coordinates are left in the shape's own units.
pub fn generate_synthetic(spec: &SyntheticShapeSpec) -> Result<LabeledCloud> {
    if spec.points < 8 {
        bail!(
            Input,
            "synthetic shapes need at least 8 points, got {}",
            spec.points
        );
    }
    if !(spec.noise >= 0.0) {
        bail!(Input, "noise std {} must be nonnegative", spec.noise);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("std > 0"));
    let mut coords = Vec::with_capacity(spec.points);
    let mut parts = Vec::with_capacity(spec.points);
    for _ in 0..spec.points {
        let (mut p, part) = sample_surface(spec.kind, &mut rng);
        if let Some(n) = &noise {
            p.iter_mut().for_each(|v| *v += n.sample(&mut rng));
        }
        coords.push(p);
        parts.push(part);
    }
    LabeledCloud::new(PointSet::from_coords(coords)?, Label::Parts(parts), 0)
}

fn normalized(mut c: LabeledCloud) -> Result<LabeledCloud> {
    let (coords, feats) = c.cloud.into_parts();
    c.cloud = PointSet::new(normalize_coords(&coords), feats)?;
    Ok(c)
}

/// Balanced sphere / cube / cylinder classification split (class ids in
/// that order), each cloud normalized into the unit ball.
pub fn synthetic_classification(
    train: usize,
    test: usize,
    points: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let kinds = [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Cylinder];
    let make = |count: usize, offset: u64| -> Result<Dataset> {
        let clouds = (0..count)
            .map(|i| {
                let class = i % kinds.len();
                let spec = SyntheticShapeSpec {
                    kind: kinds[class],
                    points,
                    noise,
                    seed: seed.wrapping_mul(1_000_003).wrapping_add(offset + i as u64),
                };
                let mut c = normalized(generate_synthetic(&spec)?)?;
                c.label = Label::Class(class);
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(clouds, kinds.len(), Vec::new())
    };
    Ok((make(train, 0)?, make(test, 1 << 32)?))
}

/// Cylinder wall (0) versus caps (1): `count` clouds, the last
/// `test` of which form the test split.
pub fn synthetic_segmentation(
    count: usize,
    test: usize,
    points: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if test > count {
        bail!(Input, "test split {test} larger than {count} clouds");
    }
    let clouds = (0..count)
        .map(|i| {
            normalized(generate_synthetic(&SyntheticShapeSpec {
                kind: ShapeKind::Cylinder,
                points,
                noise,
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            })?)
        })
        .collect::<Result<Vec<_>>>()?;
    let parts = vec![vec![0, 1]];
    let (a, b) = clouds.split_at(count - test);
    Ok((
        Dataset::new(a.to_vec(), 2, parts.clone())?,
        Dataset::new(b.to_vec(), 2, parts)?,
    ))
}
