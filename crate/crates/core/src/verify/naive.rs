//! Straight-line evaluation of the interpolated convolution: every output
//! point against every lattice site against every input point. Shares only
//! type definitions with the planned operator.

use crate::geometry::{Point3, PointSet};
use crate::interpconv::InterpConvParams;
use crate::kernel::{InterpKind, Normalization};
use crate::tensor::{Float, Tensor};

pub fn naive_interpconv(
    inputs: &PointSet,
    outputs: &[Point3],
    params: &InterpConvParams,
) -> Tensor {
    let spec = *params.layout.spec();
    let n = spec.n as i64;
    let half = (n - 1) / 2;
    let w = params.weights.values();
    let (cout, sites, c) = (
        params.weights.shape()[0],
        params.weights.shape()[1],
        params.weights.shape()[2],
    );
    let mut out = vec![0.0 as Float; outputs.len() * cout];
    for (m, centre) in outputs.iter().enumerate() {
        let row = &mut out[m * cout..(m + 1) * cout];
        if let Some(b) = &params.bias {
            row.copy_from_slice(b.values());
        }
        let mut site = 0usize;
        for kx in -half..=half {
            for ky in -half..=half {
                for kz in -half..=half {
                    let lattice = [kx as f64 * spec.l, ky as f64 * spec.l, kz as f64 * spec.l];
                    let mut acc = vec![0.0 as Float; c];
                    let mut count = 0usize;
                    let mut weight_sum = 0.0f64;
                    for (i, p) in inputs.coords().iter().enumerate() {
                        let rel = [p[0] - centre[0], p[1] - centre[1], p[2] - centre[2]];
                        let t = match spec.interpolation {
                            InterpKind::Trilinear => {
                                let mut t = 1.0f64;
                                for a in 0..3 {
                                    t *= (1.0 - (rel[a] - lattice[a]).abs() / spec.l).max(0.0);
                                }
                                t
                            }
                            InterpKind::Gaussian => {
                                let d2 = (rel[0] - lattice[0]).powi(2)
                                    + (rel[1] - lattice[1]).powi(2)
                                    + (rel[2] - lattice[2]).powi(2);
                                if d2.sqrt() > 3.0 * spec.sigma {
                                    0.0
                                } else {
                                    (-d2 / (2.0 * spec.sigma * spec.sigma)).exp()
                                }
                            }
                        };
                        if t <= 0.0 {
                            continue;
                        }
                        count += 1;
                        weight_sum += t;
                        let f = inputs.feature_row(i);
                        for ch in 0..c {
                            acc[ch] += t as Float * f[ch];
                        }
                    }
                    if count > 0 {
                        let denom = match spec.normalization {
                            Normalization::ByCount => count as f64,
                            Normalization::ByWeightSum => weight_sum,
                        };
                        for (k, o) in row.iter_mut().enumerate() {
                            let wk = &w[(k * sites + site) * c..(k * sites + site + 1) * c];
                            let mut s = 0.0 as Float;
                            for ch in 0..c {
                                s += acc[ch] / denom as Float * wk[ch];
                            }
                            *o += s;
                        }
                    }
                    site += 1;
                }
            }
        }
    }
    Tensor::new(vec![outputs.len(), cout], out).expect("consistent shape")
}
