//! Seeded random operator instances shared by tests and the check suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Point3, PointSet};
use crate::interpconv::InterpConvParams;
use crate::kernel::{InterpKind, KernelLayout, KernelSpec, Mutation, Normalization};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct Instance {
    pub inputs: PointSet,
    pub outputs: Vec<Point3>,
    pub params: InterpConvParams,
}

#[derive(Clone, Copy, Debug)]
pub struct InstanceShape {
    pub points: usize,
    pub outputs: usize,
    pub c: usize,
    pub cout: usize,
    pub kernel: KernelSpec,
    /// Half-width of the cube the points are drawn from.
    pub spread: f64,
}

pub fn uniform_points(rng: &mut impl Rng, n: usize, spread: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            [
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            ]
        })
        .collect()
}

pub fn uniform_values(rng: &mut impl Rng, n: usize) -> Vec<Float> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn build(shape: InstanceShape, seed: u64, mutation: Mutation) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = uniform_points(&mut rng, shape.points, shape.spread);
    let feats = Tensor::new(
        vec![shape.points, shape.c],
        uniform_values(&mut rng, shape.points * shape.c),
    )
    .unwrap();
    let inputs = PointSet::new(coords.clone(), feats).unwrap();
    // Half the outputs sit on input points, the rest anywhere in the cube.
    let mut outputs: Vec<Point3> = coords.iter().take(shape.outputs / 2).copied().collect();
    outputs.extend(uniform_points(
        &mut rng,
        shape.outputs - outputs.len(),
        shape.spread,
    ));
    let layout = KernelLayout::new(shape.kernel)
        .unwrap()
        .with_mutation(mutation);
    let s = layout.sites();
    let weights = Tensor::new(
        vec![shape.cout, s, shape.c],
        uniform_values(&mut rng, shape.cout * s * shape.c),
    )
    .unwrap();
    let bias = Tensor::from_vec(uniform_values(&mut rng, shape.cout));
    Instance {
        inputs,
        outputs,
        params: InterpConvParams::new(layout, weights, Some(bias)).unwrap(),
    }
}

/// Random shape within the oracle-equivalence envelope: up to 64 points,
/// up to 8 channels, kernel size 1, 3 or 5.
pub fn random_shape(seed: u64) -> InstanceShape {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5a9e);
    let n = [1, 3, 5][rng.random_range(0..3)];
    let l = rng.random_range(0.08..0.3);
    let normalization = if rng.random_bool(0.5) {
        Normalization::ByCount
    } else {
        Normalization::ByWeightSum
    };
    let kernel = if rng.random_bool(0.5) {
        KernelSpec::trilinear(n, l, normalization)
    } else {
        KernelSpec {
            n,
            l,
            interpolation: InterpKind::Gaussian,
            sigma: rng.random_range(0.03..0.12),
            normalization,
        }
    };
    InstanceShape {
        points: rng.random_range(1..=64),
        outputs: rng.random_range(1..=16),
        c: rng.random_range(1..=8),
        cout: rng.random_range(1..=8),
        kernel,
        spread: rng.random_range(0.15..0.5),
    }
}
