use super::*;
use crate::kernel::{KernelSpec, Mutation, Normalization};
use crate::verify::gradcheck::{central_difference, max_relative_error, REL_TOL, STEP};
use crate::verify::instances::{build, random_shape, InstanceShape};
use crate::verify::naive_interpconv;

fn max_abs_diff(a: &[Float], b: &[Float]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

fn run(inst: &crate::verify::instances::Instance) -> Tensor {
    let plan =
        NeighborPlan::for_cloud(inst.inputs.coords(), &inst.outputs, &inst.params.layout).unwrap();
    inst.params.forward(&inst.inputs, &plan).unwrap().0
}

fn cloud(coords: Vec<Point3>, c: usize, values: Vec<Float>) -> PointSet {
    let n = coords.len();
    PointSet::new(coords, Tensor::new(vec![n, c], values).unwrap()).unwrap()
}

#[test]
fn point_on_a_site_gets_weight_one_only_there() {
    let layout =
        KernelLayout::new(KernelSpec::trilinear(3, 0.2, Normalization::ByWeightSum)).unwrap();
    let plan = NeighborPlan::for_cloud(&[[0.2, 0.0, -0.2]], &[[0.0; 3]], &layout).unwrap();
    assert_eq!(plan.entry_count(), 1);
    let target = layout.site_index([1, 0, -1]);
    for s in 0..27 {
        if s == target {
            assert_eq!(plan.pair(0, s), &[(0, 1.0)]);
        } else {
            assert!(plan.pair(0, s).is_empty());
        }
    }
}

#[test]
fn far_inputs_give_an_empty_plan() {
    let layout = KernelLayout::new(KernelSpec::trilinear(3, 0.1, Normalization::ByCount)).unwrap();
    let plan = NeighborPlan::for_cloud(&[[5.0, 5.0, 5.0]], &[[0.0; 3]], &layout).unwrap();
    assert_eq!(plan.entry_count(), 0);
    assert_eq!(plan.nonempty_pairs(), 0);
}

#[test]
fn coarse_index_is_rejected() {
    let layout = KernelLayout::new(KernelSpec::trilinear(3, 0.1, Normalization::ByCount)).unwrap();
    let pts = [[0.0; 3]];
    let idx = SpatialIndex::from_coords(&pts, 0.05).unwrap();
    assert!(NeighborPlan::build(&pts, &pts, &layout, &idx).is_err());
}

#[test]
fn both_search_strategies_agree() {
    for seed in 0..20 {
        let inst = build(random_shape(seed), seed, Mutation::None);
        let inputs = inst.inputs.coords();
        for layout in [
            inst.params.layout.clone(),
            KernelLayout::new(KernelSpec::gaussian(3, 0.4, 0.05, Normalization::ByCount)).unwrap(),
        ] {
            let a = NeighborPlan::build(
                inputs,
                &inst.outputs,
                &layout,
                &SpatialIndex::from_coords(inputs, layout.reach()).unwrap(),
            )
            .unwrap();
            let b = NeighborPlan::build_by_site(
                inputs,
                &inst.outputs,
                &layout,
                &SpatialIndex::from_coords(inputs, NeighborPlan::site_query_radius(&layout))
                    .unwrap(),
            )
            .unwrap();
            assert_eq!(a.entry_count(), b.entry_count(), "seed {seed}");
            for m in 0..inst.outputs.len() {
                for s in 0..layout.sites() {
                    let (pa, pb) = (a.pair(m, s), b.pair(m, s));
                    assert_eq!(pa.len(), pb.len());
                    for (x, y) in pa.iter().zip(pb) {
                        assert_eq!(x.0, y.0);
                        assert!((x.1 - y.1).abs() < 1e-12);
                    }
                    assert!((a.denominator(m, s) - b.denominator(m, s)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn plan_matches_brute_force_planner() {
    for seed in 0..20 {
        let inst = build(random_shape(seed), seed, Mutation::None);
        let layout = &inst.params.layout;
        let plan = NeighborPlan::for_cloud(inst.inputs.coords(), &inst.outputs, layout).unwrap();
        for (m, &o) in inst.outputs.iter().enumerate() {
            for (s, &q) in layout.coords().iter().enumerate() {
                let want: Vec<(u32, f64)> = inst
                    .inputs
                    .coords()
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &p)| {
                        let w = layout.weight(sub(p, o), q);
                        (w > 0.0).then_some((i as u32, w))
                    })
                    .collect();
                // Per-axis factoring reorders the products, so weights agree
                // to rounding only.
                let got = plan.pair(m, s);
                assert_eq!(got.len(), want.len(), "seed {seed} m {m} s {s}");
                for (g, w) in got.iter().zip(&want) {
                    assert!(
                        g.0 == w.0 && (g.1 - w.1).abs() <= 1e-12,
                        "seed {seed} m {m} s {s}: {g:?} vs {w:?}"
                    );
                }
                assert!(plan.pair(m, s).iter().all(|e| e.1 > 0.0));
            }
        }
    }
}

#[test]
fn unit_kernel_identity_weights_copy_the_feature() {
    let layout =
        KernelLayout::new(KernelSpec::trilinear(1, 0.3, Normalization::ByWeightSum)).unwrap();
    let c = 3;
    let mut w = vec![0.0; c * c];
    for k in 0..c {
        w[k * c + k] = 1.0;
    }
    let params =
        InterpConvParams::new(layout, Tensor::new(vec![c, 1, c], w).unwrap(), None).unwrap();
    let inputs = cloud(vec![[0.4, 0.1, 0.2]], c, vec![0.5, -2.0, 7.0]);
    let plan = NeighborPlan::for_cloud(inputs.coords(), inputs.coords(), &params.layout).unwrap();
    let (out, _) = params.forward(&inputs, &plan).unwrap();
    assert_eq!(out.values(), &[0.5, -2.0, 7.0]);
}

#[test]
fn zero_features_give_bias() {
    let mut inst = build(random_shape(3), 3, Mutation::None);
    let (coords, feats) = inst.inputs.clone().into_parts();
    inst.inputs = PointSet::new(coords, Tensor::zeros(feats.shape())).unwrap();
    let out = run(&inst);
    let b = inst.params.bias.as_ref().unwrap().values();
    for row in out.values().chunks(b.len()) {
        assert_eq!(row, b);
    }
}

#[test]
fn matches_naive_on_a_fixed_instance() {
    let shape = InstanceShape {
        points: 8,
        outputs: 8,
        c: 2,
        cout: 3,
        kernel: KernelSpec::trilinear(3, 0.15, Normalization::ByCount),
        spread: 0.2,
    };
    let inst = build(shape, 42, Mutation::None);
    let fast = run(&inst);
    let slow = naive_interpconv(&inst.inputs, &inst.outputs, &inst.params);
    assert!(max_abs_diff(fast.values(), slow.values()) < 1e-12);
}

#[test]
fn matches_naive_on_random_instances() {
    for seed in 100..160 {
        let inst = build(random_shape(seed), seed, Mutation::None);
        let fast = run(&inst);
        let slow = naive_interpconv(&inst.inputs, &inst.outputs, &inst.params);
        let d = max_abs_diff(fast.values(), slow.values());
        assert!(d < 1e-12, "seed {seed}: {d}");
    }
}

fn loss_probe(seed: u64) -> Vec<Float> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    crate::verify::instances::uniform_values(&mut rng, 4096)
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let inst = build(random_shape(7), 7, Mutation::None);
    let plan =
        NeighborPlan::for_cloud(inst.inputs.coords(), &inst.outputs, &inst.params.layout).unwrap();
    let (out, saved) = inst.params.forward(&inst.inputs, &plan).unwrap();
    let g = inst
        .params
        .backward(&Tensor::zeros(out.shape()), Some(&saved))
        .unwrap();
    assert!(g.grad_features.values().iter().all(|&v| v == 0.0));
    assert!(g.grad_weights.values().iter().all(|&v| v == 0.0));
    assert!(g.grad_bias.unwrap().values().iter().all(|&v| v == 0.0));
    assert!(inst.params.backward(&out, None).is_err());
}

#[test]
fn unit_kernel_single_point_is_a_linear_layer() {
    let layout =
        KernelLayout::new(KernelSpec::gaussian(1, 0.2, 0.05, Normalization::ByCount)).unwrap();
    let w = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let params = InterpConvParams::new(layout, w, Some(Tensor::from_vec(vec![0.5, -0.5]))).unwrap();
    let inputs = cloud(vec![[0.0; 3]], 2, vec![1.0, -1.0]);
    let plan = NeighborPlan::for_cloud(inputs.coords(), inputs.coords(), &params.layout).unwrap();
    let (out, saved) = params.forward(&inputs, &plan).unwrap();
    assert_eq!(out.values(), &[1.0 - 2.0 + 0.5, 3.0 - 4.0 - 0.5]);
    let g = params
        .backward(
            &Tensor::new(vec![1, 2], vec![1.0, 10.0]).unwrap(),
            Some(&saved),
        )
        .unwrap();
    // dx = Wᵀ g, dW = g xᵀ, db = g
    assert_eq!(g.grad_features.values(), &[31.0, 42.0]);
    assert_eq!(g.grad_weights.values(), &[1.0, -1.0, 10.0, -10.0]);
    assert_eq!(g.grad_bias.unwrap().values(), &[1.0, 10.0]);
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 200..225 {
        let inst = build(random_shape(seed), seed, Mutation::None);
        let plan =
            NeighborPlan::for_cloud(inst.inputs.coords(), &inst.outputs, &inst.params.layout)
                .unwrap();
        let probe = loss_probe(seed);
        let loss =
            |out: &Tensor| -> Float { out.values().iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let (out, saved) = inst.params.forward(&inst.inputs, &plan).unwrap();
        let g_out = Tensor::new(out.shape().to_vec(), probe[..out.numel()].to_vec()).unwrap();
        let g = inst.params.backward(&g_out, Some(&saved)).unwrap();

        let (coords, feats) = inst.inputs.clone().into_parts();
        let num_f = central_difference(
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
        assert!(
            max_relative_error(g.grad_features.values(), &num_f) < REL_TOL,
            "seed {seed}"
        );

        let wshape = inst.params.weights.shape().to_vec();
        let num_w = central_difference(
            |x| {
                let mut p = inst.params.clone();
                p.weights = Tensor::new(wshape.clone(), x.to_vec()).unwrap();
                loss(&p.forward(&inst.inputs, &plan).unwrap().0)
            },
            inst.params.weights.values(),
            STEP,
        );
        assert!(
            max_relative_error(g.grad_weights.values(), &num_w) < REL_TOL,
            "seed {seed}"
        );

        let num_b = central_difference(
            |x| {
                let mut p = inst.params.clone();
                p.bias = Some(Tensor::from_vec(x.to_vec()));
                loss(&p.forward(&inst.inputs, &plan).unwrap().0)
            },
            inst.params.bias.as_ref().unwrap().values(),
            STEP,
        );
        assert!(max_relative_error(g.grad_bias.as_ref().unwrap().values(), &num_b) < REL_TOL);
    }
}

#[test]
fn tape_op_matches_direct_api() {
    let inst = build(random_shape(9), 9, Mutation::None);
    let plan = Arc::new(
        NeighborPlan::for_cloud(inst.inputs.coords(), &inst.outputs, &inst.params.layout).unwrap(),
    );
    let (direct, saved) = inst.params.forward(&inst.inputs, &plan).unwrap();
    let mut tape = Tape::new();
    let f = tape.leaf(inst.inputs.features().clone().with_requires_grad(true));
    let w = tape.leaf(inst.params.weights.clone().with_requires_grad(true));
    let b = tape.leaf(inst.params.bias.clone().unwrap().with_requires_grad(true));
    let y = interp_conv(&mut tape, f, w, Some(b), plan.clone()).unwrap();
    assert_eq!(tape.value(y).values(), direct.values());
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    let g = inst
        .params
        .backward(&Tensor::full(direct.shape(), 1.0), Some(&saved))
        .unwrap();
    assert_eq!(tape.grad(f).unwrap(), g.grad_features.values());
    assert_eq!(tape.grad(w).unwrap(), g.grad_weights.values());
    assert_eq!(tape.grad(b).unwrap(), g.grad_bias.unwrap().values());
}

#[test]
fn stacked_plans_equal_separate_runs() {
    let a = build(random_shape(11), 11, Mutation::None);
    let mut shape_b = random_shape(11);
    shape_b.points = 20;
    let b = build(shape_b, 12, Mutation::None);
    let params = a.params.clone();
    let b_inputs = PointSet::new(
        b.inputs.coords().to_vec(),
        Tensor::new(
            vec![20, a.inputs.channels()],
            vec![0.25; 20 * a.inputs.channels()],
        )
        .unwrap(),
    )
    .unwrap();
    let pa = NeighborPlan::for_cloud(a.inputs.coords(), &a.outputs, &params.layout).unwrap();
    let pb = NeighborPlan::for_cloud(b_inputs.coords(), &b.outputs, &params.layout).unwrap();
    let ya = params.forward(&a.inputs, &pa).unwrap().0;
    let yb = params.forward(&b_inputs, &pb).unwrap().0;
    let stacked = NeighborPlan::concat(&[pa, pb]).unwrap();
    let mut coords = a.inputs.coords().to_vec();
    coords.extend_from_slice(b_inputs.coords());
    let mut feats = a.inputs.features().values().to_vec();
    feats.extend_from_slice(b_inputs.features().values());
    let n = coords.len();
    let both = PointSet::new(
        coords,
        Tensor::new(vec![n, a.inputs.channels()], feats).unwrap(),
    )
    .unwrap();
    let y = params.forward(&both, &stacked).unwrap().0;
    let mut want = ya.values().to_vec();
    want.extend_from_slice(yb.values());
    assert_eq!(y.values(), want.as_slice());
}

// ---- dense reference ---------------------------------------------------------

/// Second, independently written zero-padded convolution.
fn dense_reference(
    grid: &[Float],
    d: usize,
    c: usize,
    w: &[Float],
    cout: usize,
    n: usize,
) -> Vec<Float> {
    let h = (n / 2) as isize;
    let mut out = vec![0.0; d * d * d * cout];
    for idx in 0..d * d * d {
        let (x, y, z) = (
            (idx / (d * d)) as isize,
            ((idx / d) % d) as isize,
            (idx % d) as isize,
        );
        for k in 0..cout {
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    for e in 0..n {
                        let (px, py, pz) =
                            (x + a as isize - h, y + b as isize - h, z + e as isize - h);
                        if px < 0
                            || py < 0
                            || pz < 0
                            || px >= d as isize
                            || py >= d as isize
                            || pz >= d as isize
                        {
                            continue;
                        }
                        let v = ((px as usize * d + py as usize) * d + pz as usize) * c;
                        let s = (a * n + b) * n + e;
                        for ch in 0..c {
                            acc += grid[v + ch] * w[(k * n * n * n + s) * c + ch];
                        }
                    }
                }
            }
            out[idx * cout + k] = acc;
        }
    }
    out
}

#[test]
fn dense_all_ones_centre_is_27() {
    let grid = Tensor::full(&[3, 3, 3, 1], 1.0);
    let w = Tensor::full(&[1, 27, 1], 1.0);
    let out = dense_grid_conv_oracle(&grid, &w).unwrap();
    assert_eq!(out.values()[13], 27.0);
    assert_eq!(out.values()[0], 8.0);
}

#[test]
fn dense_impulse_stamps_flipped_kernel() {
    let d = 5;
    let mut g = vec![0.0; d * d * d];
    g[(2 * d + 2) * d + 2] = 1.0;
    let grid = Tensor::new(vec![d, d, d, 1], g).unwrap();
    let w: Vec<Float> = (0..27).map(|i| i as Float + 1.0).collect();
    let out =
        dense_grid_conv_oracle(&grid, &Tensor::new(vec![1, 27, 1], w.clone()).unwrap()).unwrap();
    for a in 0..3usize {
        for b in 0..3usize {
            for e in 0..3usize {
                // Output at centre + (1 - k) sees the impulse through site k.
                let (x, y, z) = (3 - a, 3 - b, 3 - e);
                let v = out.values()[(x * d + y) * d + z];
                assert_eq!(v, w[(a * 3 + b) * 3 + e]);
            }
        }
    }
}

#[test]
fn dense_matches_second_reference() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    let (d, c, cout, n) = (5, 2, 3, 3);
    let g = crate::verify::instances::uniform_values(&mut rng, d * d * d * c);
    let w = crate::verify::instances::uniform_values(&mut rng, cout * 27 * c);
    let out = dense_grid_conv_oracle(
        &Tensor::new(vec![d, d, d, c], g.clone()).unwrap(),
        &Tensor::new(vec![cout, 27, c], w.clone()).unwrap(),
    )
    .unwrap();
    let want = dense_reference(&g, d, c, &w, cout, n);
    assert!(max_abs_diff(out.values(), &want) < 1e-12);
}

#[test]
fn aligned_grid_collapses_to_dense_convolution() {
    let (d, c, cout, l) = (6usize, 2usize, 3usize, 0.1);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(77);
    let g = crate::verify::instances::uniform_values(&mut rng, d * d * d * c);
    let w = crate::verify::instances::uniform_values(&mut rng, cout * 27 * c);
    let mut coords = Vec::new();
    for x in 0..d {
        for y in 0..d {
            for z in 0..d {
                coords.push([x as f64 * l, y as f64 * l, z as f64 * l]);
            }
        }
    }
    let inputs = cloud(coords.clone(), c, g.clone());
    let layout =
        KernelLayout::new(KernelSpec::trilinear(3, l, Normalization::ByWeightSum)).unwrap();
    let params = InterpConvParams::new(
        layout,
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
    for x in 1..d - 1 {
        for y in 1..d - 1 {
            for z in 1..d - 1 {
                let v = (x * d + y) * d + z;
                let diff = max_abs_diff(
                    &got.values()[v * cout..][..cout],
                    &want.values()[v * cout..][..cout],
                );
                assert!(diff < 1e-10, "voxel {x},{y},{z}: {diff}");
            }
        }
    }
}

// ---- invariants --------------------------------------------------------------

#[test]
fn permutation_invariance() {
    for seed in 300..310 {
        let inst = build(random_shape(seed), seed, Mutation::None);
        let base = run(&inst);
        let n = inst.inputs.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        let mut seen = perm.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            continue;
        }
        let mut permuted = inst.clone();
        permuted.inputs = inst.inputs.select(&perm);
        let out = run(&permuted);
        assert!(max_abs_diff(base.values(), out.values()) < 1e-12);
    }
}

#[test]
fn duplication_invariance_both_modes() {
    for seed in 400..410 {
        for norm in [Normalization::ByCount, Normalization::ByWeightSum] {
            let mut shape = random_shape(seed);
            shape.kernel.normalization = norm;
            let inst = build(shape, seed, Mutation::None);
            let base = run(&inst);
            for k in [2, 4] {
                let idx: Vec<usize> = (0..inst.inputs.len())
                    .flat_map(|i| std::iter::repeat_n(i, k))
                    .collect();
                let mut dup = inst.clone();
                dup.inputs = inst.inputs.select(&idx);
                assert!(max_abs_diff(base.values(), run(&dup).values()) < 1e-10);
            }
        }
    }
}

#[test]
fn translation_equivariance() {
    let inst = build(random_shape(21), 21, Mutation::None);
    let base = run(&inst);
    let v = [0.25, -0.5, 0.125];
    let mut moved = inst.clone();
    let (coords, feats) = inst.inputs.clone().into_parts();
    moved.inputs = PointSet::new(
        coords.iter().map(|&p| crate::geometry::add(p, v)).collect(),
        feats,
    )
    .unwrap();
    moved.outputs = inst
        .outputs
        .iter()
        .map(|&p| crate::geometry::add(p, v))
        .collect();
    assert!(max_abs_diff(base.values(), run(&moved).values()) < 1e-12);
}

#[test]
fn linear_in_features() {
    let mut inst = build(random_shape(31), 31, Mutation::None);
    inst.params.bias = None;
    let other = build(random_shape(31), 32, Mutation::None);
    let (coords, f1) = inst.inputs.clone().into_parts();
    let f2 = other.inputs.features().clone();
    let (alpha, beta) = (0.7, -1.3);
    let mix: Vec<Float> = f1
        .values()
        .iter()
        .zip(f2.values())
        .map(|(a, b)| alpha * a + beta * b)
        .collect();
    let with = |vals: Vec<Float>| {
        let mut i = inst.clone();
        i.inputs = PointSet::new(
            coords.clone(),
            Tensor::new(f1.shape().to_vec(), vals).unwrap(),
        )
        .unwrap();
        run(&i)
    };
    let y1 = with(f1.values().to_vec());
    let y2 = with(f2.values().to_vec());
    let y = with(mix);
    let combo: Vec<Float> = y1
        .values()
        .iter()
        .zip(y2.values())
        .map(|(a, b)| alpha * a + beta * b)
        .collect();
    assert!(max_abs_diff(y.values(), &combo) < 1e-10);
}
