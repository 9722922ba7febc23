//! Blocks and the two reference architectures.

use serde::{Deserialize, Serialize};

use super::spec::{LayerKind, LayerSpec, NetworkSpec, Task};
use crate::error::{bail, Result};
use crate::kernel::{InterpKind, KernelSpec, Normalization, DEFAULT_SIGMA};

/// Kernel of a pointwise layer. The length is never read for `n = 1`.
fn unit_kernel(like: &KernelSpec) -> KernelSpec {
    KernelSpec { n: 1, ..*like }
}

fn conv(
    name: String,
    input: &str,
    c_out: usize,
    kernel: KernelSpec,
    at: Option<&str>,
) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::InterpConv {
            c_out,
            kernel,
            bias: true,
            at: at.map(str::to_string),
        },
        &[input],
    )
}

/// Appends InterpConv + BatchNorm + ReLU and returns the ReLU's name.
fn conv_bn_relu(
    out: &mut Vec<LayerSpec>,
    prefix: &str,
    input: &str,
    c_out: usize,
    kernel: KernelSpec,
    at: Option<&str>,
) -> String {
    out.push(conv(format!("{prefix}.conv"), input, c_out, kernel, at));
    out.push(LayerSpec::new(
        format!("{prefix}.bn"),
        LayerKind::BatchNorm,
        &[&format!("{prefix}.conv")],
    ));
    out.push(LayerSpec::new(
        format!("{prefix}.relu"),
        LayerKind::Relu,
        &[&format!("{prefix}.bn")],
    ));
    format!("{prefix}.relu")
}

/// Bottleneck block: 1³ reduce to `c_mid`, `middle` spatial layer, 1³
/// expand to `c_out`, each followed by BatchNorm and ReLU. With `at` set,
/// the middle layer outputs at that sample layer's points.
pub fn interpconv_block(
    prefix: &str,
    input: &str,
    c_in: usize,
    c_mid: usize,
    c_out: usize,
    middle: KernelSpec,
    at: Option<&str>,
) -> Result<Vec<LayerSpec>> {
    if c_in == 0 || c_mid == 0 || c_out == 0 {
        bail!(Config, "block `{prefix}` needs positive channels");
    }
    if c_mid >= c_in || c_mid >= c_out {
        bail!(
            Config,
            "block `{prefix}` bottleneck {c_mid} must be narrower than {c_in} and {c_out}"
        );
    }
    let mut v = Vec::with_capacity(9);
    let a = conv_bn_relu(
        &mut v,
        &format!("{prefix}.reduce"),
        input,
        c_mid,
        unit_kernel(&middle),
        None,
    );
    let b = conv_bn_relu(&mut v, &format!("{prefix}.spatial"), &a, c_mid, middle, at);
    conv_bn_relu(
        &mut v,
        &format!("{prefix}.expand"),
        &b,
        c_out,
        unit_kernel(&middle),
        None,
    );
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub c_mid: usize,
    pub c_out: usize,
    pub kernel: KernelSpec,
}

/// Parallel blocks over the same input, channel-concatenated. With
/// `ratio < 1` one shared farthest-point sample is taken and every branch's
/// spatial layer outputs at it, so the branches stay point-aligned.
/// Returns the layers; the last one is the concat node `{prefix}.concat`.
pub fn point_inception(
    prefix: &str,
    input: &str,
    c_in: usize,
    branches: &[Branch],
    ratio: f64,
) -> Result<Vec<LayerSpec>> {
    if branches.len() < 2 {
        bail!(Config, "inception `{prefix}` needs at least two branches");
    }
    let mut v = Vec::new();
    let sample = format!("{prefix}.sample");
    let at = if ratio < 1.0 {
        v.push(LayerSpec::new(
            sample.clone(),
            LayerKind::Sample { ratio },
            &[input],
        ));
        Some(sample.as_str())
    } else {
        None
    };
    let mut tails = Vec::with_capacity(branches.len());
    for (i, b) in branches.iter().enumerate() {
        let block = interpconv_block(
            &format!("{prefix}.b{i}"),
            input,
            c_in,
            b.c_mid,
            b.c_out,
            b.kernel,
            at,
        )?;
        tails.push(block.last().expect("nonempty block").name.clone());
        v.extend(block);
    }
    let tails: Vec<&str> = tails.iter().map(String::as_str).collect();
    v.push(LayerSpec::new(
        format!("{prefix}.concat"),
        LayerKind::Concat,
        &tails,
    ));
    Ok(v)
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

fn default_ratio() -> f64 {
    0.5
}

fn default_bottleneck() -> usize {
    4
}

fn default_kernel_size() -> usize {
    3
}

/// One PointInception module: branch width and one kernel length per branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleConfig {
    pub width: usize,
    pub lengths: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub stem: usize,
    pub modules: Vec<ModuleConfig>,
    /// Block bottleneck is `width / bottleneck`.
    #[serde(default = "default_bottleneck")]
    pub bottleneck: usize,
    /// Kernel size of every block's middle layer (1 gives the all-1³ net).
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    pub interpolation: InterpKind,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub normalization: Normalization,
    #[serde(default = "default_ratio")]
    pub sample_ratio: f64,
    pub head: Vec<usize>,
    pub dropout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            stem: 64,
            modules: vec![
                ModuleConfig {
                    width: 64,
                    lengths: vec![0.1, 0.2, 0.4],
                },
                ModuleConfig {
                    width: 128,
                    lengths: vec![0.2, 0.4, 0.8],
                },
            ],
            bottleneck: 4,
            kernel_size: 3,
            interpolation: InterpKind::Gaussian,
            sigma: DEFAULT_SIGMA,
            normalization: Normalization::ByCount,
            sample_ratio: 0.5,
            head: vec![512, 256],
            dropout: 0.5,
        }
    }
}

fn kernel(
    n: usize,
    l: f64,
    interpolation: InterpKind,
    sigma: f64,
    normalization: Normalization,
) -> KernelSpec {
    KernelSpec {
        n,
        l,
        interpolation,
        sigma,
        normalization,
    }
}

/// Stem 1³ layer, PointInception modules (halving at each), global max
/// pool, then Linear/BatchNorm/ReLU/Dropout head layers and a final Linear
/// to class logits.
pub fn build_classifier(
    cfg: &ClassifierConfig,
    in_channels: usize,
    points: usize,
    classes: usize,
) -> Result<NetworkSpec> {
    if cfg.bottleneck == 0 {
        bail!(Config, "bottleneck divisor must be positive");
    }
    let mut layers = vec![LayerSpec::new("input", LayerKind::Input, &[])];
    let stem_kernel = kernel(1, 0.0, cfg.interpolation, cfg.sigma, cfg.normalization);
    let mut tail = conv_bn_relu(&mut layers, "stem", "input", cfg.stem, stem_kernel, None);
    let mut width = cfg.stem;
    for (m, module) in cfg.modules.iter().enumerate() {
        let branches: Vec<Branch> = module
            .lengths
            .iter()
            .map(|&l| Branch {
                c_mid: module.width / cfg.bottleneck,
                c_out: module.width,
                kernel: kernel(
                    cfg.kernel_size,
                    l,
                    cfg.interpolation,
                    cfg.sigma,
                    cfg.normalization,
                ),
            })
            .collect();
        let block = point_inception(&format!("m{m}"), &tail, width, &branches, cfg.sample_ratio)?;
        tail = block.last().expect("nonempty module").name.clone();
        width = module.width * branches.len();
        layers.extend(block);
    }
    layers.push(LayerSpec::new("pool", LayerKind::GlobalMaxPool, &[&tail]));
    tail = "pool".into();
    for (h, &c) in cfg.head.iter().enumerate() {
        let p = format!("fc{h}");
        layers.push(LayerSpec::new(
            format!("{p}.linear"),
            LayerKind::Linear { c_out: c },
            &[&tail],
        ));
        layers.push(LayerSpec::new(
            format!("{p}.bn"),
            LayerKind::BatchNorm,
            &[&format!("{p}.linear")],
        ));
        layers.push(LayerSpec::new(
            format!("{p}.relu"),
            LayerKind::Relu,
            &[&format!("{p}.bn")],
        ));
        tail = format!("{p}.relu");
        if cfg.dropout > 0.0 {
            layers.push(LayerSpec::new(
                format!("{p}.dropout"),
                LayerKind::Dropout { p: cfg.dropout },
                &[&tail],
            ));
            tail = format!("{p}.dropout");
        }
    }
    layers.push(LayerSpec::new(
        "logits",
        LayerKind::Linear { c_out: classes },
        &[&tail],
    ));
    NetworkSpec::new(Task::Classification, in_channels, points, classes, layers)
}

impl ClassifierConfig {
    /// Learnable scalars tallied from the configuration alone: `c′·s·c`
    /// weights and `c′` biases per convolution or linear layer, scale and
    /// shift per batch norm.
    pub fn analytic_param_count(&self, in_channels: usize, classes: usize) -> usize {
        let conv = |cin: usize, cout: usize, sites: usize| cout * sites * cin + cout;
        let bn = |c: usize| 2 * c;
        let sites = self.kernel_size.pow(3);
        let mut total = conv(in_channels, self.stem, 1) + bn(self.stem);
        let mut c = self.stem;
        for m in &self.modules {
            let mid = m.width / self.bottleneck.max(1);
            let block = conv(c, mid, 1)
                + bn(mid)
                + conv(mid, mid, sites)
                + bn(mid)
                + conv(mid, m.width, 1)
                + bn(m.width);
            total += block * m.lengths.len();
            c = m.width * m.lengths.len();
        }
        for &h in &self.head {
            total += conv(c, h, 1) + bn(h);
            c = h;
        }
        total + conv(c, classes, 1)
    }
}

fn default_first_length() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub stem: usize,
    /// Width of each encoder stage; the depth is its length.
    pub encoder: Vec<usize>,
    /// Width after each feature propagation, deepest first.
    pub decoder: Vec<usize>,
    /// Kernel length of the first encoder layer; doubles per stage.
    #[serde(default = "default_first_length")]
    pub first_length: f64,
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    pub interpolation: InterpKind,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub normalization: Normalization,
    #[serde(default = "default_ratio")]
    pub sample_ratio: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            stem: 32,
            encoder: vec![64, 128, 256],
            decoder: vec![128, 64, 64],
            first_length: 0.05,
            kernel_size: 3,
            interpolation: InterpKind::Trilinear,
            sigma: DEFAULT_SIGMA,
            normalization: Normalization::ByCount,
            sample_ratio: 0.5,
        }
    }
}

impl SegmenterConfig {
    /// Kernel length of each encoder stage.
    pub fn lengths(&self) -> Vec<f64> {
        (0..self.encoder.len())
            .map(|i| self.first_length * 2f64.powi(i as i32))
            .collect()
    }
}

/// Encoder of sampled spatial InterpConv layers with doubling kernel
/// length, decoder of feature propagation layers with skip concatenation
/// onto the matching encoder stage, and a final 1³ layer to per-point
/// logits.
pub fn build_segmenter(
    cfg: &SegmenterConfig,
    in_channels: usize,
    points: usize,
    classes: usize,
) -> Result<NetworkSpec> {
    if cfg.encoder.is_empty() {
        bail!(Config, "segmenter needs at least one encoder stage");
    }
    if cfg.decoder.len() != cfg.encoder.len() {
        bail!(
            Config,
            "segmenter has {} encoder stages but {} decoder widths",
            cfg.encoder.len(),
            cfg.decoder.len()
        );
    }
    let mut remaining = points;
    for _ in &cfg.encoder {
        remaining = super::spec::sampled_count(remaining, cfg.sample_ratio);
        if remaining == 0 {
            bail!(
                Config,
                "{} encoder stages reduce {points} points below one",
                cfg.encoder.len()
            );
        }
    }
    let k = |n, l| kernel(n, l, cfg.interpolation, cfg.sigma, cfg.normalization);
    let mut layers = vec![LayerSpec::new("input", LayerKind::Input, &[])];
    let mut stages = vec![conv_bn_relu(
        &mut layers,
        "stem",
        "input",
        cfg.stem,
        k(1, 0.0),
        None,
    )];
    for (i, (&w, l)) in cfg.encoder.iter().zip(cfg.lengths()).enumerate() {
        let prev = stages.last().expect("stem").clone();
        let sample = format!("enc{i}.sample");
        layers.push(LayerSpec::new(
            sample.clone(),
            LayerKind::Sample {
                ratio: cfg.sample_ratio,
            },
            &[&prev],
        ));
        stages.push(conv_bn_relu(
            &mut layers,
            &format!("enc{i}"),
            &prev,
            w,
            k(cfg.kernel_size, l),
            Some(&sample),
        ));
    }
    let mut tail = stages.pop().expect("deepest stage");
    for (j, &w) in cfg.decoder.iter().enumerate() {
        let skip = stages.pop().expect("one skip per decoder stage");
        let fp = format!("dec{j}.fp");
        layers.push(LayerSpec::new(
            fp.clone(),
            LayerKind::FeaturePropagation,
            &[&tail, &skip],
        ));
        tail = conv_bn_relu(&mut layers, &format!("dec{j}"), &fp, w, k(1, 0.0), None);
    }
    layers.push(conv("logits".into(), &tail, classes, k(1, 0.0), None));
    NetworkSpec::new(Task::Segmentation, in_channels, points, classes, layers)
}
