//! Network graphs: layer nodes, static shape validation and parameter counts.

use std::collections::HashMap;

use crate::error::{bail, Result};
use crate::kernel::{KernelLayout, KernelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

/// One node of a network graph.
///
/// A 1³ InterpConv inside a network is evaluated pointwise: its single
/// kernel site sits on the output point and, in the limit of a vanishing
/// kernel length, only that point contributes. When `at` names a sample
/// node the output rows are the sampled points themselves.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    InterpConv {
        c_out: usize,
        kernel: KernelSpec,
        bias: bool,
        /// Sample node whose points become the output points.
        at: Option<String>,
    },
    /// Farthest point subset of the input level; forwards the features of
    /// the kept points.
    Sample {
        ratio: f64,
    },
    BatchNorm,
    Relu,
    /// Per-cloud maximum over points.
    GlobalMaxPool,
    /// Inputs `[coarse, fine]`: coarse features interpolated onto the fine
    /// points (3 nearest, inverse squared distance) and concatenated with
    /// the fine features.
    FeaturePropagation,
    Linear {
        c_out: usize,
    },
    Dropout {
        p: f64,
    },
    Concat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Which point set a node's rows belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    /// Level 0 is the input cloud; every sample node opens a new level.
    Points(usize),
    /// One row per cloud.
    Pooled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeShape {
    pub channels: usize,
    /// Rows per cloud.
    pub points: usize,
    pub level: Level,
}

/// A validated layer graph. Nodes are stored in evaluation order and only
/// consume earlier nodes; the last node is the output.
#[derive(Clone, Debug)]
pub struct NetworkSpec {
    task: Task,
    in_channels: usize,
    points: usize,
    classes: usize,
    layers: Vec<LayerSpec>,
    shapes: Vec<NodeShape>,
    inputs: Vec<Vec<usize>>,
}

/// Output count of a sample node applied to `points` rows.
pub fn sampled_count(points: usize, ratio: f64) -> usize {
    (points as f64 * ratio).floor() as usize
}

impl NetworkSpec {
    /// Validates channel arithmetic, point counts and skip edges.
    pub fn new(
        task: Task,
        in_channels: usize,
        points: usize,
        classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        if in_channels == 0 || points == 0 || classes == 0 {
            bail!(
                Config,
                "network needs positive input channels, points and classes"
            );
        }
        let mut by_name: HashMap<&str, usize> = HashMap::new();
        let mut shapes: Vec<NodeShape> = Vec::with_capacity(layers.len());
        let mut inputs = Vec::with_capacity(layers.len());
        // Parent level of every sampled level.
        let mut level_parent: Vec<Option<usize>> = vec![None];
        for (i, layer) in layers.iter().enumerate() {
            let name = layer.name.as_str();
            if by_name.contains_key(name) {
                bail!(Config, "duplicate layer name `{name}`");
            }
            let mut ins = Vec::with_capacity(layer.inputs.len());
            for src in &layer.inputs {
                match by_name.get(src.as_str()) {
                    Some(&j) => ins.push(j),
                    None => bail!(
                        Config,
                        "layer `{name}` reads unknown or later layer `{src}`"
                    ),
                }
            }
            let arity = |want: usize| -> Result<()> {
                if ins.len() != want {
                    bail!(
                        Config,
                        "layer `{name}` takes {want} input(s), got {}",
                        ins.len()
                    );
                }
                Ok(())
            };
            let points_input = |j: usize| -> Result<(NodeShape, usize)> {
                match shapes[j].level {
                    Level::Points(id) => Ok((shapes[j], id)),
                    Level::Pooled => bail!(Config, "layer `{name}` needs per-point input"),
                }
            };
            let shape = match &layer.kind {
                LayerKind::Input => {
                    arity(0)?;
                    if i != 0 {
                        bail!(Config, "input layer `{name}` must come first");
                    }
                    NodeShape {
                        channels: in_channels,
                        points,
                        level: Level::Points(0),
                    }
                }
                _ if i == 0 => bail!(Config, "first layer must be the input"),
                LayerKind::InterpConv {
                    c_out, kernel, at, ..
                } => {
                    arity(1)?;
                    let (src, src_level) = points_input(ins[0])?;
                    if *c_out == 0 {
                        bail!(Config, "layer `{name}` has zero output channels");
                    }
                    if kernel.n != 1 {
                        if let Err(e) = KernelLayout::new(*kernel) {
                            bail!(Config, "layer `{name}`: {e}");
                        }
                    }
                    match at {
                        None => NodeShape {
                            channels: *c_out,
                            ..src
                        },
                        Some(at) => {
                            let Some(&j) = by_name.get(at.as_str()) else {
                                bail!(Config, "layer `{name}` outputs at unknown layer `{at}`");
                            };
                            let (target, target_level) = match (&layers[j].kind, shapes[j].level) {
                                (LayerKind::Sample { .. }, Level::Points(id)) => (shapes[j], id),
                                _ => bail!(
                                    Config,
                                    "layer `{name}` outputs at `{at}`, which is not a sample layer"
                                ),
                            };
                            if level_parent[target_level] != Some(src_level) {
                                bail!(
                                    Config,
                                    "layer `{name}` outputs at `{at}`, which does not sample its input points"
                                );
                            }
                            NodeShape {
                                channels: *c_out,
                                ..target
                            }
                        }
                    }
                }
                LayerKind::Sample { ratio } => {
                    arity(1)?;
                    let (src, src_level) = points_input(ins[0])?;
                    if !(*ratio > 0.0 && *ratio <= 1.0) {
                        bail!(Config, "layer `{name}` sample ratio {ratio} outside (0, 1]");
                    }
                    let kept = sampled_count(src.points, *ratio);
                    if kept == 0 {
                        bail!(
                            Config,
                            "layer `{name}` samples {} points down to none",
                            src.points
                        );
                    }
                    level_parent.push(Some(src_level));
                    NodeShape {
                        channels: src.channels,
                        points: kept,
                        level: Level::Points(level_parent.len() - 1),
                    }
                }
                LayerKind::BatchNorm | LayerKind::Relu => {
                    arity(1)?;
                    shapes[ins[0]]
                }
                LayerKind::Dropout { p } => {
                    arity(1)?;
                    if !(0.0..1.0).contains(p) {
                        bail!(Config, "layer `{name}` dropout {p} outside [0, 1)");
                    }
                    shapes[ins[0]]
                }
                LayerKind::GlobalMaxPool => {
                    arity(1)?;
                    let (src, _) = points_input(ins[0])?;
                    NodeShape {
                        channels: src.channels,
                        points: 1,
                        level: Level::Pooled,
                    }
                }
                LayerKind::FeaturePropagation => {
                    arity(2)?;
                    let (coarse, _) = points_input(ins[0])?;
                    let (fine, _) = points_input(ins[1])?;
                    if coarse.points > fine.points {
                        bail!(
                            Config,
                            "layer `{name}` propagates {} points onto only {}",
                            coarse.points,
                            fine.points
                        );
                    }
                    NodeShape {
                        channels: coarse.channels + fine.channels,
                        ..fine
                    }
                }
                LayerKind::Linear { c_out } => {
                    arity(1)?;
                    if *c_out == 0 {
                        bail!(Config, "layer `{name}` has zero output channels");
                    }
                    NodeShape {
                        channels: *c_out,
                        ..shapes[ins[0]]
                    }
                }
                LayerKind::Concat => {
                    if ins.len() < 2 {
                        bail!(Config, "concat `{name}` needs at least two inputs");
                    }
                    let first = shapes[ins[0]];
                    let mut channels = 0;
                    for &j in &ins {
                        if shapes[j].level != first.level {
                            bail!(
                                Config,
                                "concat `{name}` joins layers with different point sets ({} vs {} points)",
                                first.points,
                                shapes[j].points
                            );
                        }
                        channels += shapes[j].channels;
                    }
                    NodeShape { channels, ..first }
                }
            };
            by_name.insert(name, i);
            shapes.push(shape);
            inputs.push(ins);
        }
        let Some(out) = shapes.last() else {
            bail!(Config, "empty network");
        };
        let want_level = match task {
            Task::Classification => Level::Pooled,
            Task::Segmentation => Level::Points(0),
        };
        if out.level != want_level {
            bail!(
                Config,
                "{task:?} network ends at {:?}, expected {want_level:?}",
                out.level
            );
        }
        if out.channels != classes {
            bail!(
                Config,
                "network ends with {} channels for {classes} classes",
                out.channels
            );
        }
        Ok(Self {
            task,
            in_channels,
            points,
            classes,
            layers,
            shapes,
            inputs,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn shapes(&self) -> &[NodeShape] {
        &self.shapes
    }

    /// Indices of the nodes feeding node `i`.
    pub fn inputs_of(&self, i: usize) -> &[usize] {
        &self.inputs[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Learnable parameter shapes of node `i`, named by suffix.
    pub fn param_shapes(&self, i: usize) -> Vec<(&'static str, Vec<usize>)> {
        let c_in = self.inputs[i].first().map(|&j| self.shapes[j].channels);
        match &self.layers[i].kind {
            LayerKind::InterpConv {
                c_out,
                kernel,
                bias,
                ..
            } => {
                let sites = kernel.n.pow(3);
                let mut v = vec![("weight", vec![*c_out, sites, c_in.unwrap_or(0)])];
                if *bias {
                    v.push(("bias", vec![*c_out]));
                }
                v
            }
            LayerKind::Linear { c_out } => {
                vec![
                    ("weight", vec![*c_out, c_in.unwrap_or(0)]),
                    ("bias", vec![*c_out]),
                ]
            }
            LayerKind::BatchNorm => {
                let c = self.shapes[i].channels;
                vec![("gamma", vec![c]), ("beta", vec![c])]
            }
            _ => Vec::new(),
        }
    }

    /// Total learnable scalars. BatchNorm running statistics are state, not
    /// parameters, and are not counted.
    pub fn param_count(&self) -> usize {
        (0..self.layers.len())
            .flat_map(|i| self.param_shapes(i))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// One line per node: name, kind, output channels and points per cloud.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (l, sh) in self.layers.iter().zip(&self.shapes) {
            let kind = match &l.kind {
                LayerKind::InterpConv { kernel, .. } if kernel.n == 1 => "interpconv 1x1x1".into(),
                LayerKind::InterpConv { kernel, .. } => {
                    format!("interpconv {n}x{n}x{n} l={}", kernel.l, n = kernel.n)
                }
                other => format!("{other:?}")
                    .split([' ', '{'])
                    .next()
                    .unwrap_or_default()
                    .to_lowercase(),
            };
            s.push_str(&format!(
                "{:<24} {:<28} c={:<5} points={}\n",
                l.name, kind, sh.channels, sh.points
            ));
        }
        s
    }
}
