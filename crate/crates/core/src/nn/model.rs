//! Parameter storage, per-batch geometry and tape evaluation of a network.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    batch_norm, dropout_mask, linear, propagation_weights, stack_mixes, BatchStats, BN_MOMENTUM,
};
use super::spec::{sampled_count, LayerKind, Level, NetworkSpec};
use crate::error::{bail, Result};
use crate::geometry::{fps, FpsStart, Point3};
use crate::interpconv::{interp_conv, NeighborPlan};
use crate::kernel::KernelLayout;
use crate::par;
use crate::tensor::{Float, SparseRows, Tape, Tensor, Var};

/// Downsampling controls shared by every sample layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    pub seed: u64,
    pub start: FpsStart,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            seed: 0,
            start: FpsStart::SeededDirection,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Coordinate-only precomputation for one batch of clouds: sampled subsets,
/// neighbor plans, propagation weights and pooling segments.
#[derive(Clone)]
pub struct Geometry {
    /// `[level][cloud]` coordinates.
    levels: Vec<Vec<Vec<Point3>>>,
    /// `[level][cloud]` first stacked row, plus the total at the end.
    offsets: Vec<Vec<usize>>,
    nodes: Vec<NodeGeometry>,
}

#[derive(Clone)]
enum NodeGeometry {
    None,
    Rows(Vec<usize>),
    Plan(Arc<NeighborPlan>),
    Mix(Arc<SparseRows>),
    Segments(Vec<(usize, usize)>),
}

impl Geometry {
    pub fn clouds(&self) -> usize {
        self.levels[0].len()
    }

    /// Stacked row count of the input level.
    pub fn input_rows(&self) -> usize {
        *self.offsets[0].last().expect("offsets end with the total")
    }

    /// `(start, end)` rows of each cloud at the input level.
    pub fn input_segments(&self) -> Vec<(usize, usize)> {
        self.offsets[0].windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Approximate heap footprint in bytes, for cache budgeting.
    pub fn heap_bytes(&self) -> usize {
        use std::mem::size_of_val;
        let coords: usize = self
            .levels
            .iter()
            .flatten()
            .map(|c| size_of_val(&c[..]))
            .sum();
        let nodes: usize = self
            .nodes
            .iter()
            .map(|n| match n {
                NodeGeometry::None => 0,
                NodeGeometry::Rows(r) => size_of_val(&r[..]),
                NodeGeometry::Plan(p) => p.heap_bytes(),
                NodeGeometry::Mix(m) => size_of_val(&m.offsets[..]) + size_of_val(&m.entries[..]),
                NodeGeometry::Segments(s) => size_of_val(&s[..]),
            })
            .sum();
        coords + nodes
    }

    /// Coordinates of one cloud at a level.
    pub fn level_coords(&self, level: usize, cloud: usize) -> &[Point3] {
        &self.levels[level][cloud]
    }
}

pub enum Mode {
    /// Batch statistics, dropout with the given seed, gradient on parameters.
    Train {
        dropout_seed: u64,
    },
    Eval,
    /// Batch statistics without dropout or gradient; used to re-estimate
    /// running statistics.
    Statistics,
}

pub struct Pass {
    pub output: Var,
    /// Tape handle of every parameter, parallel to [`Model::params`].
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm node (empty in evaluation mode).
    pub stats: Vec<(usize, BatchStats)>,
}

pub struct Model {
    spec: NetworkSpec,
    sampling: Sampling,
    layouts: Vec<Option<KernelLayout>>,
    params: Vec<Param>,
    slots: Vec<Vec<usize>>,
    running: Vec<Option<BatchStats>>,
}

impl Model {
    /// Fan-in scaled uniform weights `U(±1/√fan_in)`, zero biases, unit
    /// batch-norm scales.
    pub fn new(spec: NetworkSpec, sampling: Sampling, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(spec.layers().len());
        let mut layouts = Vec::with_capacity(spec.layers().len());
        let mut running = Vec::with_capacity(spec.layers().len());
        for (i, layer) in spec.layers().iter().enumerate() {
            layouts.push(match &layer.kind {
                LayerKind::InterpConv { kernel, .. } if kernel.n > 1 => {
                    Some(KernelLayout::new(*kernel)?)
                }
                _ => None,
            });
            let c = spec.shapes()[i].channels;
            running.push(
                matches!(layer.kind, LayerKind::BatchNorm).then(|| BatchStats {
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                }),
            );
            let mut slot = Vec::new();
            for (suffix, shape) in spec.param_shapes(i) {
                let n: usize = shape.iter().product();
                let values = match suffix {
                    "weight" => {
                        let fan_in = (n / shape[0]).max(1);
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n)
                            .map(|_| rng.random_range(-bound..bound) as Float)
                            .collect()
                    }
                    "gamma" => vec![1.0; n],
                    _ => vec![0.0; n],
                };
                slot.push(params.len());
                params.push(Param {
                    name: format!("{}.{suffix}", layer.name),
                    value: Tensor::new(shape, values)?,
                });
            }
            slots.push(slot);
        }
        Ok(Self {
            spec,
            sampling,
            layouts,
            params,
            slots,
            running,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Running batch-norm statistics as named tensors.
    pub fn running_stats(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (layer, r) in self.spec.layers().iter().zip(&self.running) {
            if let Some(r) = r {
                out.push((
                    format!("{}.running_mean", layer.name),
                    Tensor::from_vec(r.mean.clone()),
                ));
                out.push((
                    format!("{}.running_var", layer.name),
                    Tensor::from_vec(r.var.clone()),
                ));
            }
        }
        out
    }

    /// Restores one named parameter or running statistic.
    pub fn load_tensor(&mut self, name: &str, t: Tensor) -> Result<()> {
        if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
            if p.value.shape() != t.shape() {
                bail!(
                    Checkpoint,
                    "`{name}` has shape {:?}, checkpoint {:?}",
                    p.value.shape(),
                    t.shape()
                );
            }
            p.value = t;
            return Ok(());
        }
        for (layer, r) in self.spec.layers().iter().zip(self.running.iter_mut()) {
            let Some(r) = r else { continue };
            let slot = if name == format!("{}.running_mean", layer.name) {
                &mut r.mean
            } else if name == format!("{}.running_var", layer.name) {
                &mut r.var
            } else {
                continue;
            };
            if slot.len() != t.numel() {
                bail!(
                    Checkpoint,
                    "`{name}` has {} channels, checkpoint {}",
                    slot.len(),
                    t.numel()
                );
            }
            *slot = t.into_values();
            return Ok(());
        }
        bail!(
            Checkpoint,
            "checkpoint tensor `{name}` matches nothing in the network"
        )
    }

    /// Blends training-batch statistics into the running ones.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats)]) {
        for (i, s) in stats {
            let Some(r) = &mut self.running[*i] else {
                continue;
            };
            for (r, b) in r.mean.iter_mut().zip(&s.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in r.var.iter_mut().zip(&s.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    /// Replaces running statistics with the pooled statistics of the given
    /// per-batch statistics, each weighted by its count (clouds or rows).
    pub fn set_running_from(&mut self, batches: &[(Vec<(usize, BatchStats)>, usize)]) {
        for (i, slot) in self.running.iter_mut().enumerate() {
            let Some(r) = slot else { continue };
            let c = r.mean.len();
            let (mut sum, mut sq, mut total) = (vec![0.0; c], vec![0.0; c], 0.0);
            for (stats, rows) in batches {
                let Some((_, s)) = stats.iter().find(|(j, _)| *j == i) else {
                    continue;
                };
                let w = *rows as Float;
                for j in 0..c {
                    sum[j] += w * s.mean[j];
                    sq[j] += w * (s.var[j] + s.mean[j] * s.mean[j]);
                }
                total += w;
            }
            if total == 0.0 {
                continue;
            }
            for j in 0..c {
                let m = sum[j] / total;
                r.mean[j] = m;
                r.var[j] = (sq[j] / total - m * m).max(0.0);
            }
        }
    }

    /// Samples, neighbor plans and interpolation weights for a batch.
    pub fn prepare(&self, clouds: &[&[Point3]]) -> Result<Geometry> {
        if clouds.is_empty() {
            bail!(Input, "empty batch");
        }
        let offsets_of = |coords: &[Vec<Point3>]| {
            let mut o = Vec::with_capacity(coords.len() + 1);
            o.push(0);
            for c in coords {
                o.push(o.last().unwrap() + c.len());
            }
            o
        };
        let level0: Vec<Vec<Point3>> = clouds.iter().map(|c| c.to_vec()).collect();
        if level0.iter().any(|c| c.is_empty()) {
            bail!(Input, "empty cloud in batch");
        }
        let mut geo = Geometry {
            offsets: vec![offsets_of(&level0)],
            levels: vec![level0],
            nodes: Vec::with_capacity(self.spec.layers().len()),
        };
        let level_of = |j: usize| match self.spec.shapes()[j].level {
            Level::Points(id) => id,
            Level::Pooled => usize::MAX,
        };
        let b = clouds.len();
        for (i, layer) in self.spec.layers().iter().enumerate() {
            let ins = self.spec.inputs_of(i);
            let node = match &layer.kind {
                LayerKind::Sample { ratio } => {
                    let src = level_of(ins[0]);
                    let parent = &geo.levels[src];
                    let seed = self.sampling.seed;
                    let start = self.sampling.start;
                    let picks: Vec<Result<Vec<usize>>> = par::map_indices(b, |c| {
                        let m = sampled_count(parent[c].len(), *ratio);
                        if m == 0 {
                            bail!(
                                Input,
                                "`{}` samples a {}-point cloud to none",
                                layer.name,
                                parent[c].len()
                            );
                        }
                        fps(&parent[c], m, seed, start)
                    });
                    let picks = picks.into_iter().collect::<Result<Vec<_>>>()?;
                    let coords: Vec<Vec<Point3>> = picks
                        .iter()
                        .zip(parent)
                        .map(|(idx, pc)| idx.iter().map(|&k| pc[k]).collect())
                        .collect();
                    let rows = picks
                        .iter()
                        .zip(&geo.offsets[src])
                        .flat_map(|(idx, &o)| idx.iter().map(move |&k| o + k))
                        .collect();
                    geo.offsets.push(offsets_of(&coords));
                    geo.levels.push(coords);
                    NodeGeometry::Rows(rows)
                }
                LayerKind::InterpConv { at, .. } => {
                    let src = level_of(ins[0]);
                    let dst = level_of(i);
                    match &self.layouts[i] {
                        Some(layout) => {
                            let plans: Vec<Result<NeighborPlan>> = par::map_indices(b, |c| {
                                NeighborPlan::for_cloud(
                                    &geo.levels[src][c],
                                    &geo.levels[dst][c],
                                    layout,
                                )
                            });
                            let plans = plans.into_iter().collect::<Result<Vec<_>>>()?;
                            NodeGeometry::Plan(Arc::new(NeighborPlan::concat(&plans)?))
                        }
                        None => match at {
                            Some(at) => {
                                let j = self.spec.index_of(at).expect("validated");
                                match &geo.nodes[j] {
                                    NodeGeometry::Rows(r) => NodeGeometry::Rows(r.clone()),
                                    _ => unreachable!("sample nodes record rows"),
                                }
                            }
                            None => NodeGeometry::None,
                        },
                    }
                }
                LayerKind::FeaturePropagation => {
                    let (coarse, fine) = (level_of(ins[0]), level_of(ins[1]));
                    let weights: Vec<Result<Vec<Vec<(usize, Float)>>>> = par::map_indices(b, |c| {
                        propagation_weights(&geo.levels[coarse][c], &geo.levels[fine][c])
                    });
                    let parts = weights
                        .into_iter()
                        .zip(&geo.offsets[coarse])
                        .map(|(w, &o)| w.map(|w| (w, o)))
                        .collect::<Result<Vec<_>>>()?;
                    let total = *geo.offsets[coarse].last().unwrap();
                    NodeGeometry::Mix(stack_mixes(&parts, total))
                }
                LayerKind::GlobalMaxPool => {
                    let src = level_of(ins[0]);
                    NodeGeometry::Segments(
                        geo.offsets[src].windows(2).map(|w| (w[0], w[1])).collect(),
                    )
                }
                _ => NodeGeometry::None,
            };
            geo.nodes.push(node);
        }
        Ok(geo)
    }

    /// Records the network on `tape`. `features` is the stacked `[rows, c]`
    /// input of the batch prepared in `geo`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        geo: &Geometry,
        features: Tensor,
        mode: &Mode,
    ) -> Result<Pass> {
        if features.rank() != 2
            || features.rows() != geo.input_rows()
            || features.shape()[1] != self.spec.in_channels()
        {
            bail!(
                Dimension,
                "features {:?} do not match {} rows of {} channels",
                features.shape(),
                geo.input_rows(),
                self.spec.in_channels()
            );
        }
        if geo.nodes.len() != self.spec.layers().len() {
            bail!(Contract, "geometry was prepared for a different network");
        }
        let train = matches!(mode, Mode::Train { .. });
        let batch_stats = !matches!(mode, Mode::Eval);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone().with_requires_grad(train)))
            .collect();
        let mut vars: Vec<Var> = Vec::with_capacity(self.spec.layers().len());
        let mut stats = Vec::new();
        let mut features = Some(features);
        for (i, layer) in self.spec.layers().iter().enumerate() {
            let ins = self.spec.inputs_of(i);
            let x = ins.first().map(|&j| vars[j]);
            let p = |k: usize| self.slots[i].get(k).map(|&s| params[s]);
            let v = match &layer.kind {
                LayerKind::Input => tape.constant(features.take().expect("one input layer")),
                LayerKind::InterpConv { bias, .. } => {
                    let x = x.expect("arity checked");
                    let b = if *bias { p(1) } else { None };
                    match &geo.nodes[i] {
                        NodeGeometry::Plan(plan) => {
                            interp_conv(tape, x, p(0).unwrap(), b, plan.clone())?
                        }
                        NodeGeometry::Rows(rows) => {
                            let g = tape.gather_rows(x, rows)?;
                            linear(tape, g, p(0).unwrap(), b)?
                        }
                        _ => linear(tape, x, p(0).unwrap(), b)?,
                    }
                }
                LayerKind::Sample { .. } => match &geo.nodes[i] {
                    NodeGeometry::Rows(rows) => tape.gather_rows(x.unwrap(), rows)?,
                    _ => unreachable!("sample geometry"),
                },
                LayerKind::BatchNorm => {
                    let running = if batch_stats {
                        None
                    } else {
                        self.running[i].as_ref()
                    };
                    let (y, s) =
                        batch_norm(tape, x.unwrap(), p(0).unwrap(), p(1).unwrap(), running)?;
                    stats.extend(s.map(|s| (i, s)));
                    y
                }
                LayerKind::Relu => tape.relu(x.unwrap()),
                LayerKind::GlobalMaxPool => match &geo.nodes[i] {
                    NodeGeometry::Segments(s) => tape.segment_max(x.unwrap(), s)?,
                    _ => unreachable!("pool geometry"),
                },
                LayerKind::FeaturePropagation => match &geo.nodes[i] {
                    NodeGeometry::Mix(mix) => {
                        let up = tape.row_mix(x.unwrap(), mix.clone())?;
                        tape.concat_cols(&[up, vars[ins[1]]])?
                    }
                    _ => unreachable!("propagation geometry"),
                },
                LayerKind::Linear { .. } => linear(tape, x.unwrap(), p(0).unwrap(), p(1))?,
                LayerKind::Dropout { p } => match mode {
                    Mode::Train { dropout_seed } if *p > 0.0 => {
                        let x = x.unwrap();
                        let seed = dropout_seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                        let mask =
                            tape.constant(dropout_mask(tape.value(x).shape(), *p as Float, seed));
                        tape.mul(x, mask)?
                    }
                    _ => x.unwrap(),
                },
                LayerKind::Concat => {
                    let parts: Vec<Var> = ins.iter().map(|&j| vars[j]).collect();
                    tape.concat_cols(&parts)?
                }
            };
            vars.push(v);
        }
        Ok(Pass {
            output: *vars.last().expect("validated nonempty"),
            params,
            stats,
        })
    }

    /// Evaluation-mode output for a batch.
    pub fn infer(&self, geo: &Geometry, features: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, geo, features, &Mode::Eval)?;
        Ok(tape.value(pass.output).clone())
    }
}
