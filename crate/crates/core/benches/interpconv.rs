//! InterpConv and classifier timings on one worker versus the full pool.
//!
//! Built without the `parallel` feature, every case runs sequentially and
//! only the `sequential` series is reported.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use interpcnn::data::{synthetic_classification, Label};
use interpcnn::geometry::{fps, FpsStart, Point3, PointSet};
use interpcnn::interpconv::{InterpConvParams, NeighborPlan};
use interpcnn::kernel::{InterpKind, KernelLayout, KernelSpec, Normalization};
use interpcnn::nn::{build_classifier, ClassifierConfig, Mode, Model, ModuleConfig, Sampling};
use interpcnn::tensor::{Float, Tape, Tensor};
use interpcnn::train::cross_entropy;

fn sphere(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n)
        .map(|_| loop {
            let p: Point3 = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if r > 1e-3 && r <= 1.0 {
                break [p[0] / r, p[1] / r, p[2] / r];
            }
        })
        .collect()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.random_range(-1.0..1.0) as Float)
            .collect(),
    )
    .unwrap()
}

type Runner = Box<dyn Fn(&mut (dyn FnMut() + Send))>;

/// Runs `f` on a single worker and, with rayon enabled, on the default pool.
fn modes() -> Vec<(&'static str, Runner)> {
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        vec![
            (
                "one_thread",
                Box::new(move |f: &mut (dyn FnMut() + Send)| one.install(f)),
            ),
            ("pool", Box::new(|f: &mut (dyn FnMut() + Send)| f())),
        ]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential", Box::new(|f: &mut (dyn FnMut() + Send)| f()))]
    }
}

fn operator(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layout = KernelLayout::new(KernelSpec {
        n: 3,
        l: 0.2,
        interpolation: InterpKind::Gaussian,
        sigma: 0.1 / 3.0,
        normalization: Normalization::ByCount,
    })
    .unwrap();
    let mut group = c.benchmark_group("interpconv");
    group.sample_size(20);
    for &n in &[1024usize, 4096] {
        let coords = sphere(n, &mut rng);
        let centers: Vec<Point3> = fps(&coords, n / 2, 1, FpsStart::SeededIndex)
            .unwrap()
            .into_iter()
            .map(|i| coords[i])
            .collect();
        let cloud = PointSet::new(coords.clone(), random(&[n, 32], &mut rng)).unwrap();
        let params = InterpConvParams::new(
            layout.clone(),
            random(&[32, 27, 32], &mut rng),
            Some(random(&[32], &mut rng)),
        )
        .unwrap();
        let plan = NeighborPlan::for_cloud(&coords, &centers, &layout).unwrap();
        for (mode, run) in modes() {
            group.bench_with_input(BenchmarkId::new(format!("plan/{mode}"), n), &n, |b, _| {
                b.iter(|| {
                    run(&mut || {
                        drop(black_box(
                            NeighborPlan::for_cloud(&coords, &centers, &layout).unwrap(),
                        ))
                    })
                })
            });
            group.bench_with_input(
                BenchmarkId::new(format!("forward/{mode}"), n),
                &n,
                |b, _| {
                    b.iter(|| run(&mut || drop(black_box(params.forward(&cloud, &plan).unwrap()))))
                },
            );
        }
    }
    group.finish();
}

fn classifier(c: &mut Criterion) {
    let (train, _) = synthetic_classification(8, 3, 256, 0.02, 1).unwrap();
    let cfg = ClassifierConfig {
        stem: 32,
        modules: vec![
            ModuleConfig {
                width: 32,
                lengths: vec![0.1, 0.2, 0.4],
            },
            ModuleConfig {
                width: 64,
                lengths: vec![0.2, 0.4, 0.8],
            },
        ],
        head: vec![128, 64],
        ..Default::default()
    };
    let model = Model::new(
        build_classifier(&cfg, 3, 256, 3).unwrap(),
        Sampling::default(),
        1,
    )
    .unwrap();
    let coords: Vec<&[Point3]> = train.clouds.iter().map(|c| c.cloud.coords()).collect();
    let feats: Vec<Float> = coords
        .iter()
        .flat_map(|c| c.iter().flat_map(|p| p.map(|v| v as Float)))
        .collect();
    let feats = Tensor::new(vec![8 * 256, 3], feats).unwrap();
    let labels: Vec<usize> = train
        .clouds
        .iter()
        .map(|c| match c.label {
            Label::Class(k) => k,
            Label::Parts(_) => unreachable!("classification set"),
        })
        .collect();
    let mut group = c.benchmark_group("classifier_batch8x256");
    group.sample_size(10);
    for (mode, run) in modes() {
        group.bench_function(format!("train_step/{mode}"), |b| {
            b.iter(|| {
                run(&mut || {
                    let geo = model.prepare(&coords).unwrap();
                    let mut tape = Tape::new();
                    let pass = model
                        .forward(
                            &mut tape,
                            &geo,
                            feats.clone(),
                            &Mode::Train { dropout_seed: 1 },
                        )
                        .unwrap();
                    let loss = cross_entropy(&mut tape, pass.output, &labels).unwrap();
                    tape.backward(loss).unwrap();
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, operator, classifier);
criterion_main!(benches);
