//! Named invariant checks. Each check runs on fixed seeds, reduces to one
//! measured error and compares it with a fixed tolerance; failures are data.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{add, dist2, fps, FpsStart, Point3, PointSet, SpatialIndex};
use crate::interpconv::{dense_grid_conv_oracle, interp_conv, InterpConvParams, NeighborPlan};
use crate::kernel::{KernelLayout, KernelSpec, Mutation, Normalization};
use crate::nn::layers::batch_norm;
use crate::nn::{
    build_classifier, build_segmenter, ClassifierConfig, Mode, Model, ModuleConfig, Sampling,
    SegmenterConfig,
};
use crate::tensor::{Float, Tape, Tensor};
use crate::train::cross_entropy;
use crate::verify::gradcheck::{central_difference, max_relative_error, REL_TOL, STEP};
use crate::verify::instances::{build, random_shape, uniform_points, uniform_values, Instance};
use crate::verify::naive_interpconv;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub status: Status,
    /// Worst error over all trials.
    pub measured: f64,
    pub tolerance: f64,
    /// Seed of the worst trial.
    pub seed: u64,
    pub seconds: f64,
    /// Expected vs actual at the worst trial; empty on success.
    pub diff: String,
}

/// What to run. `base_seed` shifts every per-check seed; `mutation` swaps
/// in a broken kernel wherever a check builds one.
#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub base_seed: u64,
    pub mutation: Mutation,
    /// Substring a check name must contain to run.
    pub filter: Option<String>,
}

pub struct Check {
    pub name: &'static str,
    pub about: &'static str,
    pub tolerance: f64,
    run: fn(&SuiteOptions) -> Trial,
}

/// Worst case found by a check.
struct Trial {
    error: f64,
    seed: u64,
    expected: String,
    actual: String,
}

impl Trial {
    fn none() -> Self {
        Trial {
            error: 0.0,
            seed: 0,
            expected: String::new(),
            actual: String::new(),
        }
    }

    fn keep(
        &mut self,
        error: f64,
        seed: u64,
        expected: impl FnOnce() -> String,
        actual: impl FnOnce() -> String,
    ) {
        if error > self.error || error.is_nan() {
            *self = Trial {
                error,
                seed,
                expected: expected(),
                actual: actual(),
            };
        }
    }
}

macro_rules! check {
    ($name:expr, $tol:expr, $run:expr, $about:expr) => {
        Check {
            name: $name,
            about: $about,
            tolerance: $tol,
            run: $run,
        }
    };
}

pub fn checks() -> Vec<Check> {
    vec![
        check!(
            "oracle.forward_vs_naive",
            1e-12,
            oracle_equivalence,
            "fast forward equals the naive evaluator on 100 random instances"
        ),
        check!(
            "grid.dense_equivalence",
            1e-10,
            grid_equivalence,
            "aligned 6^3 grid equals the dense convolution at interior voxels"
        ),
        check!(
            "gradient.features",
            REL_TOL,
            |o| operator_gradient(o, Wrt::Features),
            "grad_features vs central differences, 20 seeds"
        ),
        check!(
            "gradient.weights",
            REL_TOL,
            |o| operator_gradient(o, Wrt::Weights),
            "grad_weights vs central differences, 20 seeds"
        ),
        check!(
            "gradient.bias",
            REL_TOL,
            |o| operator_gradient(o, Wrt::Bias),
            "grad_bias vs central differences, 20 seeds"
        ),
        check!(
            "gradient.batch_norm",
            REL_TOL,
            batch_norm_gradient,
            "batch norm input, scale and shift gradients, 20 seeds"
        ),
        check!(
            "gradient.cross_entropy",
            REL_TOL,
            cross_entropy_gradient,
            "cross-entropy logit gradient, 20 seeds"
        ),
        check!(
            "gradient.two_layer_net",
            REL_TOL,
            two_layer_gradient,
            "conv, batch norm, relu, conv, cross-entropy; all parameters, 20 seeds"
        ),
        check!(
            "network.classifier_permutation",
            1e-8,
            classifier_permutation,
            "classifier logits on 256 points under 10 permutations"
        ),
        check!(
            "network.segmenter_equivariance",
            1e-8,
            segmenter_equivariance,
            "segmenter outputs permute with the input"
        ),
        check!(
            "network.finite_gradients",
            0.0,
            finite_gradients,
            "non-finite gradient entries after one training pass"
        ),
        check!(
            "network.param_count",
            0.0,
            param_count,
            "parameter count minus the hand count"
        ),
        check!(
            "sparsity.duplication_by_count",
            1e-10,
            |o| duplication(o, Normalization::ByCount),
            "2- and 4-fold duplication, count normalization"
        ),
        check!(
            "sparsity.duplication_by_weight_sum",
            1e-10,
            |o| duplication(o, Normalization::ByWeightSum),
            "2- and 4-fold duplication, weight-sum normalization"
        ),
        check!(
            "operator.permutation",
            1e-12,
            operator_permutation,
            "input order does not change outputs"
        ),
        check!(
            "operator.translation",
            1e-12,
            operator_translation,
            "shifting inputs and outputs together"
        ),
        check!(
            "operator.linearity",
            1e-10,
            operator_linearity,
            "forward is linear in the features without bias"
        ),
        check!(
            "interpolation.partition_of_unity",
            1e-12,
            partition_of_unity,
            "trilinear weights of 10^4 interior points sum to 1"
        ),
        check!(
            "interpolation.gaussian_truncation",
            1e-12,
            gaussian_truncation,
            "zero beyond 3 sigma, exp(-1/2) at sigma"
        ),
        check!(
            "interpolation.weight_range",
            0.0,
            weight_range,
            "weights outside [0, 1]"
        ),
        check!(
            "interpolation.gaussian_monotone",
            0.0,
            gaussian_monotone,
            "increase of the Gaussian weight along a ray"
        ),
        check!(
            "interpolation.translation_symmetry",
            1e-12,
            weight_translation,
            "w(d + v, p + v) = w(d, p)"
        ),
        check!(
            "geometry.radius_query",
            0.0,
            radius_query_sets,
            "set difference against brute force on 10^4 points, 50 queries"
        ),
        check!(
            "geometry.radius_query_permutation",
            0.0,
            radius_query_permutation,
            "returned offsets under input permutation"
        ),
        check!(
            "geometry.fps_maxmin",
            0.0,
            fps_replay,
            "mismatches against a brute-force greedy replay on 200 points"
        ),
    ]
}

/// Runs every check whose name contains the filter, in registry order.
pub fn run_invariant_suite(opts: &SuiteOptions) -> Vec<CheckReport> {
    let selected: Vec<Check> = checks()
        .into_iter()
        .filter(|c| opts.filter.as_deref().is_none_or(|f| c.name.contains(f)))
        .collect();
    crate::par::map_indices(selected.len(), |i| run_check(&selected[i], opts))
}

fn run_check(check: &Check, opts: &SuiteOptions) -> CheckReport {
    let start = Instant::now();
    let trial = (check.run)(opts);
    let pass = trial.error <= check.tolerance;
    CheckReport {
        name: check.name,
        status: if pass { Status::Pass } else { Status::Fail },
        measured: trial.error,
        tolerance: check.tolerance,
        seed: trial.seed,
        seconds: start.elapsed().as_secs_f64(),
        diff: if pass {
            String::new()
        } else {
            format!("expected {}, got {}", trial.expected, trial.actual)
        },
    }
}

pub const REPORT_HEADER: &str = "check,status,measured,tolerance,seed,seconds,diff";

/// CSV rendering of a report list, header included.
pub fn report_csv(reports: &[CheckReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER.split(','))
        .expect("in-memory write");
    for r in reports {
        w.write_record([
            r.name.to_string(),
            r.status.as_str().to_string(),
            format!("{:e}", r.measured),
            format!("{:e}", r.tolerance),
            r.seed.to_string(),
            format!("{:.3}", r.seconds),
            r.diff.clone(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

// ---- helpers -----------------------------------------------------------------

fn max_abs_diff(a: &[Float], b: &[Float]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

fn preview(v: &[Float]) -> String {
    let head: Vec<String> = v.iter().take(4).map(|x| format!("{x:.6e}")).collect();
    if v.len() > 4 {
        format!("[{}, ... ({} values)]", head.join(", "), v.len())
    } else {
        format!("[{}]", head.join(", "))
    }
}

fn run(inst: &Instance) -> Tensor {
    let plan = NeighborPlan::for_cloud(inst.inputs.coords(), &inst.outputs, &inst.params.layout)
        .expect("instance plans are valid");
    inst.params
        .forward(&inst.inputs, &plan)
        .expect("instance shapes agree")
        .0
}

fn compare(trial: &mut Trial, seed: u64, want: &[Float], got: &[Float]) {
    trial.keep(
        max_abs_diff(want, got),
        seed,
        || preview(want),
        || preview(got),
    );
}

fn seeds(opts: &SuiteOptions, base: u64, count: u64) -> impl Iterator<Item = u64> {
    let start = opts.base_seed.wrapping_mul(1000).wrapping_add(base);
    (0..count).map(move |i| start.wrapping_add(i))
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
    uniform_points(rng, n, 1.0)
}

fn xyz(coords: &[Point3]) -> Tensor {
    let vals = coords
        .iter()
        .flat_map(|p| p.iter().map(|&v| v as Float))
        .collect();
    Tensor::new(vec![coords.len(), 3], vals).expect("three columns")
}

fn layout(spec: KernelSpec, opts: &SuiteOptions) -> KernelLayout {
    KernelLayout::new(spec)
        .expect("valid suite kernel")
        .with_mutation(opts.mutation)
}

// ---- operator ----------------------------------------------------------------

fn oracle_equivalence(opts: &SuiteOptions) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 100, 100) {
        let inst = build(random_shape(seed), seed, opts.mutation);
        let want = naive_interpconv(&inst.inputs, &inst.outputs, &inst.params);
        compare(&mut t, seed, want.values(), run(&inst).values());
    }
    t
}

fn grid_equivalence(opts: &SuiteOptions) -> Trial {
    let (d, c, cout, l) = (6usize, 2usize, 3usize, 0.1);
    let seed = opts.base_seed.wrapping_add(77);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = uniform_values(&mut rng, d * d * d * c);
    let w = uniform_values(&mut rng, cout * 27 * c);
    let mut coords = Vec::with_capacity(d * d * d);
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                coords.push([x as f64 * l, y as f64 * l, z as f64 * l]);
            }
        }
    }
    let inputs = PointSet::new(
        coords.clone(),
        Tensor::new(vec![d * d * d, c], g.clone()).unwrap(),
    )
    .unwrap();
    let lay = layout(
        KernelSpec::trilinear(3, l, Normalization::ByWeightSum),
        opts,
    );
    let params = InterpConvParams::new(
        lay,
        Tensor::new(vec![cout, 27, c], w.clone()).unwrap(),
        None,
    )
    .unwrap();
    let plan = NeighborPlan::for_cloud(&coords, &coords, &params.layout).unwrap();
    let got = params.forward(&inputs, &plan).unwrap().0;
    let want = dense_grid_conv_oracle(
        &Tensor::new(vec![d, d, d, c], g).unwrap(),
        &Tensor::new(vec![cout, 27, c], w).unwrap(),
    )
    .unwrap();
    let mut t = Trial::none();
    for x in 1..d - 1 {
        for y in 1..d - 1 {
            for z in 1..d - 1 {
                let v = (x * d + y) * d + z;
                let (a, b) = (
                    &want.values()[v * cout..][..cout],
                    &got.values()[v * cout..][..cout],
                );
                t.keep(
                    max_abs_diff(a, b),
                    seed,
                    || format!("voxel ({x},{y},{z}) {}", preview(a)),
                    || preview(b),
                );
            }
        }
    }
    t
}

#[derive(Clone, Copy)]
enum Wrt {
    Features,
    Weights,
    Bias,
}

fn operator_gradient(opts: &SuiteOptions, wrt: Wrt) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 200, 20) {
        let inst = build(random_shape(seed), seed, opts.mutation);
        let plan =
            NeighborPlan::for_cloud(inst.inputs.coords(), &inst.outputs, &inst.params.layout)
                .unwrap();
        let (out, saved) = inst.params.forward(&inst.inputs, &plan).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let probe = uniform_values(&mut rng, out.numel());
        let loss =
            |o: &Tensor| -> Float { o.values().iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let g = inst
            .params
            .backward(
                &Tensor::new(out.shape().to_vec(), probe.clone()).unwrap(),
                Some(&saved),
            )
            .unwrap();
        let (analytic, numeric) = match wrt {
            Wrt::Features => {
                let (coords, feats) = inst.inputs.clone().into_parts();
                let num = central_difference(
                    |x| {
                        let ps = PointSet::new(
                            coords.clone(),
                            Tensor::new(feats.shape().to_vec(), x.to_vec()).unwrap(),
                        )
                        .unwrap();
                        loss(&inst.params.forward(&ps, &plan).unwrap().0)
                    },
                    feats.values(),
                    STEP,
                );
                (g.grad_features.values().to_vec(), num)
            }
            Wrt::Weights => {
                let shape = inst.params.weights.shape().to_vec();
                let num = central_difference(
                    |x| {
                        let mut p = inst.params.clone();
                        p.weights = Tensor::new(shape.clone(), x.to_vec()).unwrap();
                        loss(&p.forward(&inst.inputs, &plan).unwrap().0)
                    },
                    inst.params.weights.values(),
                    STEP,
                );
                (g.grad_weights.values().to_vec(), num)
            }
            Wrt::Bias => {
                let num = central_difference(
                    |x| {
                        let mut p = inst.params.clone();
                        p.bias = Some(Tensor::from_vec(x.to_vec()));
                        loss(&p.forward(&inst.inputs, &plan).unwrap().0)
                    },
                    inst.params
                        .bias
                        .as_ref()
                        .expect("instances carry a bias")
                        .values(),
                    STEP,
                );
                (g.grad_bias.expect("bias gradient").values().to_vec(), num)
            }
        };
        t.keep(
            max_relative_error(&analytic, &numeric),
            seed,
            || preview(&numeric),
            || preview(&analytic),
        );
    }
    t
}

fn duplication(opts: &SuiteOptions, norm: Normalization) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 400, 20) {
        let mut shape = random_shape(seed);
        shape.kernel.normalization = norm;
        let inst = build(shape, seed, opts.mutation);
        let base = run(&inst);
        for k in [2, 4] {
            let idx: Vec<usize> = (0..inst.inputs.len())
                .flat_map(|i| std::iter::repeat_n(i, k))
                .collect();
            let mut dup = inst.clone();
            dup.inputs = inst.inputs.select(&idx);
            let out = run(&dup);
            t.keep(
                max_abs_diff(base.values(), out.values()),
                seed,
                || preview(base.values()),
                || format!("{} after {k}-fold duplication", preview(out.values())),
            );
        }
    }
    t
}

fn operator_permutation(opts: &SuiteOptions) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 300, 20) {
        let inst = build(random_shape(seed), seed, opts.mutation);
        let mut perm: Vec<usize> = (0..inst.inputs.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut permuted = inst.clone();
        permuted.inputs = inst.inputs.select(&perm);
        compare(&mut t, seed, run(&inst).values(), run(&permuted).values());
    }
    t
}

fn operator_translation(opts: &SuiteOptions) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 500, 20) {
        let inst = build(random_shape(seed), seed, opts.mutation);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Dyadic shifts keep the translated coordinates exact.
        let v = [0.0; 3].map(|_: f64| rng.random_range(-8..8) as f64 / 16.0);
        let (coords, feats) = inst.inputs.clone().into_parts();
        let mut moved = inst.clone();
        moved.inputs = PointSet::new(coords.iter().map(|&p| add(p, v)).collect(), feats).unwrap();
        moved.outputs = inst.outputs.iter().map(|&p| add(p, v)).collect();
        compare(&mut t, seed, run(&inst).values(), run(&moved).values());
    }
    t
}

fn operator_linearity(opts: &SuiteOptions) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 600, 20) {
        let mut inst = build(random_shape(seed), seed, opts.mutation);
        inst.params.bias = None;
        let (coords, f1) = inst.inputs.clone().into_parts();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f2 = uniform_values(&mut rng, f1.numel());
        let (alpha, beta) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let with = |vals: Vec<Float>| {
            let mut i = inst.clone();
            i.inputs = PointSet::new(
                coords.clone(),
                Tensor::new(f1.shape().to_vec(), vals).unwrap(),
            )
            .unwrap();
            run(&i)
        };
        let mix = f1
            .values()
            .iter()
            .zip(&f2)
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        let (y1, y2, y) = (with(f1.values().to_vec()), with(f2), with(mix));
        let combo: Vec<Float> = y1
            .values()
            .iter()
            .zip(y2.values())
            .map(|(a, b)| alpha * a + beta * b)
            .collect();
        compare(&mut t, seed, &combo, y.values());
    }
    t
}

// ---- other gradients ---------------------------------------------------------

fn batch_norm_gradient(opts: &SuiteOptions) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 700, 20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(3..12), rng.random_range(1..5));
        let x0: Vec<Float> = (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g0: Vec<Float> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let b0: Vec<Float> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let probe: Vec<Float> = uniform_values(&mut rng, r * c);
        let loss_of = |x: &[Float], g: &[Float], b: &[Float]| -> Float {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![r, c], x.to_vec()).unwrap());
            let g = tape.leaf(Tensor::from_vec(g.to_vec()));
            let b = tape.leaf(Tensor::from_vec(b.to_vec()));
            let (y, _) = batch_norm(&mut tape, x, g, b, None).unwrap();
            tape.value(y)
                .values()
                .iter()
                .zip(&probe)
                .map(|(a, p)| a * p)
                .sum()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![r, c], x0.clone())
                .unwrap()
                .with_requires_grad(true),
        );
        let g = tape.leaf(Tensor::from_vec(g0.clone()).with_requires_grad(true));
        let b = tape.leaf(Tensor::from_vec(b0.clone()).with_requires_grad(true));
        let (y, _) = batch_norm(&mut tape, x, g, b, None).unwrap();
        let p = tape.constant(Tensor::new(vec![r, c], probe.clone()).unwrap());
        let prod = tape.mul(y, p).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = tape.grad(x).unwrap().to_vec();
        analytic.extend_from_slice(tape.grad(g).unwrap());
        analytic.extend_from_slice(tape.grad(b).unwrap());
        let mut numeric = central_difference(|v| loss_of(v, &g0, &b0), &x0, STEP);
        numeric.extend(central_difference(|v| loss_of(&x0, v, &b0), &g0, STEP));
        numeric.extend(central_difference(|v| loss_of(&x0, &g0, v), &b0, STEP));
        t.keep(
            max_relative_error(&analytic, &numeric),
            seed,
            || preview(&numeric),
            || preview(&analytic),
        );
    }
    t
}

fn cross_entropy_gradient(opts: &SuiteOptions) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 800, 20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, k) = (rng.random_range(1..8), rng.random_range(2..6));
        let z0: Vec<Float> = (0..r * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..k)).collect();
        let loss_of = |z: &[Float]| -> Float {
            let mut tape = Tape::new();
            let z = tape.leaf(Tensor::new(vec![r, k], z.to_vec()).unwrap());
            let l = cross_entropy(&mut tape, z, &labels).unwrap();
            tape.value(l).values()[0]
        };
        let mut tape = Tape::new();
        let z = tape.leaf(
            Tensor::new(vec![r, k], z0.clone())
                .unwrap()
                .with_requires_grad(true),
        );
        let l = cross_entropy(&mut tape, z, &labels).unwrap();
        tape.backward(l).unwrap();
        let analytic = tape.grad(z).unwrap().to_vec();
        let numeric = central_difference(loss_of, &z0, STEP);
        t.keep(
            max_relative_error(&analytic, &numeric),
            seed,
            || preview(&numeric),
            || preview(&analytic),
        );
    }
    t
}

/// Two interpolated convolutions with batch norm and relu between them,
/// mean-pooled per cloud into cross-entropy.
fn two_layer_gradient(opts: &SuiteOptions) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 900, 20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(12..32);
        let (c, hidden, k) = (2usize, 4usize, 3usize);
        let coords = uniform_points(&mut rng, n, 0.3);
        let l1 = layout(
            KernelSpec::trilinear(3, 0.15, Normalization::ByWeightSum),
            opts,
        );
        let l2 = layout(
            KernelSpec::gaussian(3, 0.2, 0.08, Normalization::ByCount),
            opts,
        );
        let p1 = Arc::new(NeighborPlan::for_cloud(&coords, &coords, &l1).unwrap());
        let p2 = Arc::new(NeighborPlan::for_cloud(&coords, &coords, &l2).unwrap());
        let feats = uniform_values(&mut rng, n * c);
        let params: Vec<(Vec<usize>, Vec<Float>)> = vec![
            (
                vec![hidden, 27, c],
                uniform_values(&mut rng, hidden * 27 * c),
            ),
            (vec![hidden], uniform_values(&mut rng, hidden)),
            (
                vec![hidden],
                (0..hidden).map(|_| rng.random_range(0.5..1.5)).collect(),
            ),
            (vec![hidden], uniform_values(&mut rng, hidden)),
            (
                vec![k, 27, hidden],
                uniform_values(&mut rng, k * 27 * hidden),
            ),
            (vec![k], uniform_values(&mut rng, k)),
        ];
        let label = rng.random_range(0..k);
        let forward = |tape: &mut Tape, values: &[&[Float]]| {
            let vars: Vec<_> = params
                .iter()
                .zip(values)
                .map(|((shape, _), v)| {
                    tape.leaf(
                        Tensor::new(shape.clone(), v.to_vec())
                            .unwrap()
                            .with_requires_grad(true),
                    )
                })
                .collect();
            let x = tape.constant(Tensor::new(vec![n, c], feats.clone()).unwrap());
            let h = interp_conv(tape, x, vars[0], Some(vars[1]), p1.clone()).unwrap();
            let (h, _) = batch_norm(tape, h, vars[2], vars[3], None).unwrap();
            let h = tape.relu(h);
            let y = interp_conv(tape, h, vars[4], Some(vars[5]), p2.clone()).unwrap();
            let pooled = tape.reduce(crate::tensor::ReduceKind::Mean, y, 0).unwrap();
            let logits = tape.reshape(pooled, vec![1, k]).unwrap();
            (cross_entropy(tape, logits, &[label]).unwrap(), vars)
        };
        let base: Vec<&[Float]> = params.iter().map(|(_, v)| v.as_slice()).collect();
        let mut tape = Tape::new();
        let (loss, vars) = forward(&mut tape, &base);
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (j, &v) in vars.iter().enumerate() {
            analytic.extend_from_slice(tape.grad(v).unwrap());
            numeric.extend(central_difference(
                |x| {
                    let mut vals = base.clone();
                    vals[j] = x;
                    let mut tape = Tape::new();
                    let (l, _) = forward(&mut tape, &vals);
                    tape.value(l).values()[0]
                },
                base[j],
                STEP,
            ));
        }
        t.keep(
            max_relative_error(&analytic, &numeric),
            seed,
            || preview(&numeric),
            || preview(&analytic),
        );
    }
    t
}

// ---- networks ----------------------------------------------------------------

fn suite_classifier() -> ClassifierConfig {
    ClassifierConfig {
        stem: 16,
        modules: vec![
            ModuleConfig {
                width: 16,
                lengths: vec![0.1, 0.2, 0.4],
            },
            ModuleConfig {
                width: 32,
                lengths: vec![0.2, 0.4, 0.8],
            },
        ],
        head: vec![32, 16],
        ..Default::default()
    }
}

fn classifier_permutation(opts: &SuiteOptions) -> Trial {
    let seed = opts.base_seed.wrapping_add(1000);
    let spec = build_classifier(&suite_classifier(), 3, 256, 3).unwrap();
    let model = Model::new(spec, Sampling::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(&mut rng, 256);
    let base = model
        .infer(&model.prepare(&[&cloud]).unwrap(), xyz(&cloud))
        .unwrap();
    let mut t = Trial::none();
    for _ in 0..10 {
        let mut p = cloud.clone();
        p.shuffle(&mut rng);
        let out = model
            .infer(&model.prepare(&[&p]).unwrap(), xyz(&p))
            .unwrap();
        compare(&mut t, seed, base.values(), out.values());
    }
    t
}

fn segmenter_equivariance(opts: &SuiteOptions) -> Trial {
    let seed = opts.base_seed.wrapping_add(1100);
    let cfg = SegmenterConfig {
        stem: 8,
        encoder: vec![16, 32],
        decoder: vec![16, 16],
        ..Default::default()
    };
    let model = Model::new(
        build_segmenter(&cfg, 3, 96, 2).unwrap(),
        Sampling::default(),
        seed,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = random_cloud(&mut rng, 96);
    let base = model
        .infer(&model.prepare(&[&cloud]).unwrap(), xyz(&cloud))
        .unwrap();
    let mut t = Trial::none();
    for _ in 0..3 {
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.shuffle(&mut rng);
        let p: Vec<Point3> = perm.iter().map(|&i| cloud[i]).collect();
        let out = model
            .infer(&model.prepare(&[&p]).unwrap(), xyz(&p))
            .unwrap();
        let want: Vec<Float> = perm.iter().flat_map(|&i| base.row(i).to_vec()).collect();
        compare(&mut t, seed, &want, out.values());
    }
    t
}

fn finite_gradients(opts: &SuiteOptions) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 1200, 3) {
        let spec = build_classifier(&suite_classifier(), 3, 64, 3).unwrap();
        let model = Model::new(spec, Sampling::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clouds: Vec<Vec<Point3>> = (0..3).map(|_| random_cloud(&mut rng, 64)).collect();
        let refs: Vec<&[Point3]> = clouds.iter().map(Vec::as_slice).collect();
        let feats: Vec<Float> = clouds
            .iter()
            .flat_map(|c| xyz(c).values().to_vec())
            .collect();
        let geo = model.prepare(&refs).unwrap();
        let mut tape = Tape::new();
        let pass = model
            .forward(
                &mut tape,
                &geo,
                Tensor::new(vec![192, 3], feats).unwrap(),
                &Mode::Train { dropout_seed: seed },
            )
            .unwrap();
        let loss = cross_entropy(&mut tape, pass.output, &[0, 1, 2]).unwrap();
        tape.backward(loss).unwrap();
        let mut bad = Vec::new();
        for (v, p) in pass.params.iter().zip(model.params()) {
            match tape.grad(*v) {
                Some(g) => {
                    let n = g.iter().filter(|x| !x.is_finite()).count();
                    if n > 0 {
                        bad.push(format!("{}: {n}", p.name));
                    }
                }
                None => bad.push(format!("{}: missing", p.name)),
            }
        }
        t.keep(
            bad.len() as f64,
            seed,
            || "all finite".into(),
            || bad.join("; "),
        );
    }
    t
}

fn param_count(_opts: &SuiteOptions) -> Trial {
    let cfg = suite_classifier();
    let spec = build_classifier(&cfg, 3, 64, 4).unwrap();
    let model = Model::new(spec, Sampling::default(), 0).unwrap();
    let (want, got) = (cfg.analytic_param_count(3, 4), model.param_count());
    let mut t = Trial::none();
    t.keep(
        (want as f64 - got as f64).abs(),
        0,
        || want.to_string(),
        || got.to_string(),
    );
    t
}

// ---- interpolation -----------------------------------------------------------

fn partition_of_unity(opts: &SuiteOptions) -> Trial {
    let seed = opts.base_seed.wrapping_add(1300);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Trial::none();
    for (n, l) in [(3usize, 0.1), (5, 0.07)] {
        let lay = layout(
            KernelSpec::trilinear(n, l, Normalization::ByWeightSum),
            opts,
        );
        let h = ((n - 1) / 2) as f64 * l;
        for _ in 0..5000 {
            let p: Point3 = [0.0; 3].map(|_: f64| rng.random_range(-h..h));
            let sum: f64 = lay.coords().iter().map(|&q| lay.weight(p, q)).sum();
            t.keep(
                (sum - 1.0).abs(),
                seed,
                || "1".into(),
                || format!("{sum} at {p:?}, n = {n}"),
            );
        }
    }
    t
}

fn gaussian_truncation(opts: &SuiteOptions) -> Trial {
    let seed = opts.base_seed.wrapping_add(1400);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Trial::none();
    for sigma in [0.1 / 3.0, 0.05, 0.2] {
        let lay = layout(
            KernelSpec::gaussian(3, 0.1, sigma, Normalization::ByWeightSum),
            opts,
        );
        for _ in 0..1000 {
            let u = random_unit(&mut rng);
            let at = |d: f64| lay.weight([u[0] * d, u[1] * d, u[2] * d], [0.0; 3]);
            let w = at(sigma);
            let want = (-0.5f64).exp();
            t.keep(
                (w - want).abs(),
                seed,
                || format!("{want} at d = sigma"),
                || w.to_string(),
            );
            let d = 3.0 * sigma * rng.random_range(1.0 + 1e-9..2.0);
            let w = at(d);
            t.keep(
                w.abs(),
                seed,
                || format!("0 at d = {d} > 3 sigma = {}", 3.0 * sigma),
                || w.to_string(),
            );
        }
    }
    t
}

fn random_unit(rng: &mut impl Rng) -> Point3 {
    loop {
        let v: Point3 = [0.0; 3].map(|_: f64| rng.random_range(-1.0..1.0));
        let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if r > 1e-3 && r <= 1.0 {
            return v.map(|x| x / r);
        }
    }
}

fn suite_kernels(opts: &SuiteOptions) -> [KernelLayout; 2] {
    [
        layout(KernelSpec::trilinear(3, 0.1, Normalization::ByCount), opts),
        layout(
            KernelSpec::gaussian(3, 0.1, 0.05, Normalization::ByCount),
            opts,
        ),
    ]
}

fn weight_range(opts: &SuiteOptions) -> Trial {
    let seed = opts.base_seed.wrapping_add(1500);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Trial::none();
    for lay in suite_kernels(opts) {
        for _ in 0..5000 {
            let p: Point3 = [0.0; 3].map(|_: f64| rng.random_range(-0.3..0.3));
            for &q in lay.coords() {
                let w = lay.weight(p, q);
                let excess = if w.is_nan() {
                    f64::INFINITY
                } else {
                    (-w).max(w - 1.0).max(0.0)
                };
                t.keep(
                    excess,
                    seed,
                    || "weight in [0, 1]".into(),
                    || format!("{w} at {p:?} towards {q:?}"),
                );
            }
        }
    }
    t
}

fn gaussian_monotone(opts: &SuiteOptions) -> Trial {
    let seed = opts.base_seed.wrapping_add(1600);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lay = layout(
        KernelSpec::gaussian(1, 0.1, 0.05, Normalization::ByCount),
        opts,
    );
    let mut t = Trial::none();
    for _ in 0..200 {
        let u = random_unit(&mut rng);
        let mut prev = f64::INFINITY;
        for i in 0..=200 {
            let d = i as f64 * 0.001;
            let w = lay.weight([u[0] * d, u[1] * d, u[2] * d], [0.0; 3]);
            t.keep(
                w - prev,
                seed,
                || format!("at most {prev}"),
                || format!("{w} at d = {d}"),
            );
            prev = w;
        }
    }
    t
}

fn weight_translation(opts: &SuiteOptions) -> Trial {
    let seed = opts.base_seed.wrapping_add(1700);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Trial::none();
    for lay in suite_kernels(opts) {
        for _ in 0..2000 {
            let p: Point3 = [0.0; 3].map(|_: f64| rng.random_range(-0.2..0.2));
            let v: Point3 = [0.0; 3].map(|_: f64| rng.random_range(-4..4) as f64 / 8.0);
            for &q in lay.coords() {
                let (a, b) = (lay.weight(p, q), lay.weight(add(p, v), add(q, v)));
                t.keep((a - b).abs(), seed, || a.to_string(), || b.to_string());
            }
        }
    }
    t
}

// ---- geometry ----------------------------------------------------------------

fn radius_query_sets(opts: &SuiteOptions) -> Trial {
    let seed = opts.base_seed.wrapping_add(1800);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = random_cloud(&mut rng, 10_000);
    let mut t = Trial::none();
    for cell in [0.1, 0.25] {
        let index = SpatialIndex::from_coords(&coords, cell).unwrap();
        for _ in 0..50 {
            let q: Point3 = [0.0; 3].map(|_: f64| rng.random_range(-1.1..1.1));
            let r = cell * rng.random_range(0.1..1.0);
            let got: BTreeSet<usize> = index
                .radius_query(q, r)
                .unwrap()
                .iter()
                .map(|e| e.0)
                .collect();
            let want: BTreeSet<usize> = (0..coords.len())
                .filter(|&i| dist2(coords[i], q) <= r * r)
                .collect();
            let miss = want.symmetric_difference(&got).count();
            t.keep(
                miss as f64,
                seed,
                || format!("{} points", want.len()),
                || format!("{} points, {miss} differ", got.len()),
            );
        }
    }
    t
}

fn radius_query_permutation(opts: &SuiteOptions) -> Trial {
    let seed = opts.base_seed.wrapping_add(1900);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = random_cloud(&mut rng, 2000);
    let mut perm: Vec<usize> = (0..coords.len()).collect();
    perm.shuffle(&mut rng);
    let shuffled: Vec<Point3> = perm.iter().map(|&i| coords[i]).collect();
    let a = SpatialIndex::from_coords(&coords, 0.2).unwrap();
    let b = SpatialIndex::from_coords(&shuffled, 0.2).unwrap();
    let key = |p: Point3| p.map(f64::to_bits);
    let mut t = Trial::none();
    for _ in 0..50 {
        let q: Point3 = [0.0; 3].map(|_: f64| rng.random_range(-1.0..1.0));
        let sa: BTreeSet<_> = a
            .radius_query(q, 0.2)
            .unwrap()
            .iter()
            .map(|e| key(e.1))
            .collect();
        let sb: BTreeSet<_> = b
            .radius_query(q, 0.2)
            .unwrap()
            .iter()
            .map(|e| key(e.1))
            .collect();
        let miss = sa.symmetric_difference(&sb).count();
        t.keep(
            miss as f64,
            seed,
            || format!("{} offsets", sa.len()),
            || format!("{} offsets, {miss} differ", sb.len()),
        );
    }
    t
}

/// Greedy max-min replay with a full distance recomputation at every step.
fn brute_greedy(coords: &[Point3], m: usize, first: usize) -> Vec<usize> {
    let mut chosen = vec![first];
    while chosen.len() < m {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..coords.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| dist2(coords[i], coords[j]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        match best {
            Some(i) => chosen.push(i),
            None => break,
        }
    }
    chosen
}

fn fps_replay(opts: &SuiteOptions) -> Trial {
    let mut t = Trial::none();
    for seed in seeds(opts, 2000, 10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_cloud(&mut rng, 200);
        for start in [FpsStart::SeededIndex, FpsStart::SeededDirection] {
            let got = fps(&coords, 50, seed, start).unwrap();
            let want = brute_greedy(&coords, 50, got[0]);
            let distinct = got.iter().collect::<BTreeSet<_>>().len();
            let miss =
                got.iter().zip(&want).filter(|(a, b)| a != b).count() + (got.len() - distinct);
            t.keep(
                miss as f64,
                seed,
                || format!("{want:?}"),
                || format!("{got:?}"),
            );
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names: BTreeSet<_> = checks().iter().map(|c| c.name).collect();
        assert_eq!(names.len(), checks().len());
    }

    #[test]
    fn filter_selects_by_substring() {
        let opts = SuiteOptions {
            filter: Some("interpolation.gaussian".into()),
            ..Default::default()
        };
        let r = run_invariant_suite(&opts);
        let names: Vec<_> = r.iter().map(|r| r.name).collect();
        assert_eq!(
            names,
            [
                "interpolation.gaussian_truncation",
                "interpolation.gaussian_monotone"
            ]
        );
        assert!(r.iter().all(|r| r.status == Status::Pass), "{r:?}");
    }

    #[test]
    fn untruncated_gaussian_fails_the_truncation_check() {
        let opts = SuiteOptions {
            filter: Some("interpolation.gaussian_truncation".into()),
            mutation: Mutation::UntruncatedGaussian,
            ..Default::default()
        };
        let r = run_invariant_suite(&opts);
        assert_eq!(r[0].status, Status::Fail);
        assert!(r[0].diff.starts_with("expected 0 at d"), "{}", r[0].diff);
    }

    #[test]
    fn csv_has_header_and_one_row_per_check() {
        let opts = SuiteOptions {
            filter: Some("network.param_count".into()),
            ..Default::default()
        };
        let csv = report_csv(&run_invariant_suite(&opts));
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert!(
            lines[1].starts_with("network.param_count,pass,0e0,0e0,0,"),
            "{}",
            lines[1]
        );
    }
}
