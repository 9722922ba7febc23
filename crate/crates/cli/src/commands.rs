use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use interpcnn::geometry::Point3;
use interpcnn::kernel::Mutation;
use interpcnn::nn::{build_classifier, Mode, Model, Task};
use interpcnn::tensor::{Float, Tape, Tensor};
use interpcnn::train::{evaluate, fit, softmax_rows, Checkpoint};
use interpcnn::verify::{checks, report_csv, run_invariant_suite, Status, SuiteOptions};

use crate::config::{BenchConfig, Overrides, RunConfig};
use crate::dataset;

pub fn exit_code(e: &anyhow::Error) -> u8 {
    let diverged = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<interpcnn::Error>(),
            Some(interpcnn::Error::Divergence(_))
        )
    });
    if diverged {
        3
    } else {
        2
    }
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn train(config: &Path, o: &Overrides) -> Result<u8> {
    let mut cfg = RunConfig::load(config)?;
    cfg.apply(o);
    init_threads(cfg.runtime.threads);
    let out = cfg
        .out
        .clone()
        .context("no output directory: pass --out or set `out` in the config")?;
    let (train, val) = dataset::load(&cfg.data, cfg.task)?;
    let in_channels = cfg.train.features.channels(train.feature_channels());
    let spec = cfg.network(in_channels, cfg.data.points(), train.classes)?;
    let mut model = Model::new(spec, cfg.sampling, cfg.runtime.seed)?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let text = cfg.effective_toml();
    write(&out.join("effective.toml"), &text)?;
    log::info!(
        "{} train / {} val clouds, {} parameters",
        train.len(),
        val.len(),
        model.param_count()
    );
    let res = fit(
        &mut model,
        &train,
        &val,
        &cfg.train,
        cfg.runtime.seed,
        Some(&out),
        &text,
        !cfg.runtime.deterministic,
    )?;
    println!(
        "best epoch {}: accuracy {:.4}{}",
        res.best_epoch,
        res.best.accuracy,
        res.best
            .miou_inst
            .map(|m| format!(", instance mIoU {m:.4}"))
            .unwrap_or_default()
    );
    Ok(0)
}

/// Rebuilds the network a checkpoint was trained as and loads its tensors.
fn restore(cfg: &RunConfig, ck: &Checkpoint) -> Result<Model> {
    let spec = cfg.network(ck.in_channels, ck.points, ck.classes)?;
    let mut model = Model::new(spec, cfg.sampling, cfg.runtime.seed)?;
    let names: BTreeSet<&str> = ck.tensors.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(p) = model
        .params()
        .iter()
        .find(|p| !names.contains(p.name.as_str()))
    {
        bail!("checkpoint has no tensor for parameter `{}`", p.name);
    }
    for (name, t) in &ck.tensors {
        model.load_tensor(name, t.clone())?;
    }
    Ok(model)
}

fn open_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let cfg = RunConfig::parse(
        &ck.config,
        &format!("config stored in {}", path.display()),
        Path::new("."),
    )?;
    Ok((ck, cfg))
}

pub fn eval(checkpoint: &Path, config: Option<&Path>, split: &str, o: &Overrides) -> Result<u8> {
    let (ck, mut cfg) = open_checkpoint(checkpoint)?;
    if let Some(p) = config {
        cfg.data = RunConfig::load(p)?.data;
    }
    cfg.apply(o);
    init_threads(cfg.runtime.threads);
    let model = restore(&cfg, &ck)?;
    let (train, test) = dataset::load(&cfg.data, cfg.task)?;
    let data = match split {
        "train" => train,
        "test" | "val" => test,
        other => bail!("unknown split `{other}`; use `train` or `test`"),
    };
    ensure!(
        data.classes == ck.classes,
        "label space mismatch: data has {} classes, checkpoint {}",
        data.classes,
        ck.classes
    );
    let channels = cfg.train.features.channels(data.feature_channels());
    ensure!(
        channels == ck.in_channels,
        "input mismatch: data gives {channels} channels, checkpoint expects {}",
        ck.in_channels
    );
    let ev = evaluate(&model, &data, cfg.train.features, cfg.train.batch_size)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    println!(
        "{:<10} {:>8} {:>10} {:>10} {:>10}",
        "split", "clouds", "accuracy", "mIoU-cat", "mIoU-inst"
    );
    println!(
        "{:<10} {:>8} {:>10.4} {:>10} {:>10}",
        split,
        data.len(),
        ev.accuracy,
        ev.miou_cat.map(|x| format!("{x:.4}")).unwrap_or("-".into()),
        ev.miou_inst
            .map(|x| format!("{x:.4}"))
            .unwrap_or("-".into()),
    );
    let dir = match &o.out {
        Some(d) => d.clone(),
        None => checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let csv = format!(
        "split,clouds,loss,accuracy,miou_cat,miou_inst\n{split},{},{:.6},{:.6},{},{}\n",
        data.len(),
        ev.loss,
        ev.accuracy,
        opt(ev.miou_cat),
        opt(ev.miou_inst)
    );
    write(&dir.join(format!("eval_{split}.csv")), &csv)?;
    Ok(0)
}

pub fn infer(checkpoint: &Path, cloud: &Path, o: &Overrides) -> Result<u8> {
    let (ck, mut cfg) = open_checkpoint(checkpoint)?;
    cfg.apply(o);
    init_threads(cfg.runtime.threads);
    let model = restore(&cfg, &ck)?;
    let schema = match &cfg.data {
        crate::config::DataConfig::Manifest { schema, .. } => schema.clone(),
        _ => None,
    };
    let lc = dataset::read_cloud(cloud, ck.points, schema.as_deref(), cfg.runtime.seed)?;
    let coords = lc.cloud.coords();
    let mut feats = Vec::new();
    cfg.train
        .features
        .extend_rows(coords, lc.cloud.features().values(), &mut feats)?;
    let feats = Tensor::new(vec![coords.len(), ck.in_channels], feats)
        .context("cloud channels do not match the checkpoint")?;
    let logits = model.infer(&model.prepare(&[coords])?, feats)?;
    let p = softmax_rows(logits.values(), ck.classes);
    let argmax = |row: &[Float]| {
        row.iter()
            .enumerate()
            .fold(
                (0, Float::NEG_INFINITY),
                |b, (i, &v)| if v > b.1 { (i, v) } else { b },
            )
            .0
    };
    let text = match cfg.task {
        Task::Classification => {
            let probs: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
            format!("class,probabilities\n{},{}\n", argmax(&p), probs.join(" "))
        }
        Task::Segmentation => {
            let mut s = String::from("x,y,z,label\n");
            for (c, row) in coords.iter().zip(p.chunks(ck.classes)) {
                s.push_str(&format!("{},{},{},{}\n", c[0], c[1], c[2], argmax(row)));
            }
            s
        }
    };
    match &o.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            write(&dir.join("predictions.csv"), &text)?;
        }
        None => print!("{text}"),
    }
    Ok(0)
}

pub fn verify(
    filter: Option<String>,
    list: bool,
    mutant: Option<&str>,
    o: &Overrides,
) -> Result<u8> {
    if list {
        for c in checks() {
            println!("{:<40} {}", c.name, c.about);
        }
        return Ok(0);
    }
    init_threads(o.threads.unwrap_or(0));
    let mutation = match mutant {
        Some("off-by-one") => Mutation::DenominatorOffByOne,
        Some("untruncated") => Mutation::UntruncatedGaussian,
        _ => Mutation::None,
    };
    let opts = SuiteOptions {
        base_seed: o.seed.unwrap_or(0),
        mutation,
        filter,
    };
    let reports = run_invariant_suite(&opts);
    if reports.is_empty() {
        bail!("no check matches `{}`", opts.filter.unwrap_or_default());
    }
    for r in &reports {
        println!(
            "{} {:<40} {:>10.3e} (tol {:.0e}) seed {:<6} {:>7.2}s",
            r.status.as_str(),
            r.name,
            r.measured,
            r.tolerance,
            r.seed,
            r.seconds
        );
        if r.status == Status::Fail {
            println!("     {}", r.diff);
        }
    }
    let failed = reports.iter().filter(|r| r.status == Status::Fail).count();
    println!(
        "{} of {} checks passed",
        reports.len() - failed,
        reports.len()
    );
    if let Some(dir) = &o.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write(&dir.join("verify.csv"), &report_csv(&reports))?;
    }
    Ok(if failed == 0 { 0 } else { 1 })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn bench_clouds(rng: &mut ChaCha8Rng, batch: usize, points: usize) -> Vec<Vec<Point3>> {
    (0..batch)
        .map(|_| {
            (0..points)
                .map(|_| [0.0; 3].map(|_: f64| rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect()
}

pub fn bench(config: Option<&Path>, o: &Overrides) -> Result<u8> {
    let (classifier, bench, seed, threads) = match config {
        Some(p) => {
            let mut cfg = RunConfig::load(p)?;
            cfg.apply(o);
            ensure!(
                cfg.task == Task::Classification,
                "bench times the classifier; set task = \"classification\""
            );
            (
                cfg.classifier,
                cfg.bench,
                cfg.runtime.seed,
                cfg.runtime.threads,
            )
        }
        None => (
            Default::default(),
            BenchConfig::default(),
            o.seed.unwrap_or(1),
            o.threads.unwrap_or(0),
        ),
    };
    init_threads(threads);
    ensure!(
        bench.repetitions > 0 && bench.batch > 0,
        "bench needs positive repetitions and batch"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("points,batch,pass,mean_ms,std_ms,repetitions\n");
    let mut counted = None;
    for &n in &bench.points {
        let model = Model::new(
            build_classifier(&classifier, 3, n, bench.classes)?,
            Default::default(),
            seed,
        )?;
        counted.get_or_insert(model.param_count());
        let clouds = bench_clouds(&mut rng, bench.batch, n);
        let refs: Vec<&[Point3]> = clouds.iter().map(Vec::as_slice).collect();
        let feats: Vec<Float> = clouds
            .iter()
            .flatten()
            .flat_map(|p| p.map(|v| v as Float))
            .collect();
        let feats = Tensor::new(vec![bench.batch * n, 3], feats)?;
        let labels: Vec<usize> = (0..bench.batch).map(|i| i % bench.classes).collect();
        let mut times: [Vec<f64>; 3] = Default::default();
        for rep in 0..bench.warmup + bench.repetitions {
            let t = Instant::now();
            let geo = model.prepare(&refs)?;
            let prepare = t.elapsed().as_secs_f64();
            let t = Instant::now();
            model.infer(&geo, feats.clone())?;
            let forward = t.elapsed().as_secs_f64();
            let mut step = 0.0;
            if bench.backward {
                let t = Instant::now();
                let mut tape = Tape::new();
                let pass = model.forward(
                    &mut tape,
                    &geo,
                    feats.clone(),
                    &Mode::Train {
                        dropout_seed: rep as u64,
                    },
                )?;
                let loss = interpcnn::train::cross_entropy(&mut tape, pass.output, &labels)?;
                tape.backward(loss)?;
                step = t.elapsed().as_secs_f64();
            }
            if rep >= bench.warmup {
                times[0].push(prepare * 1e3);
                times[1].push(forward * 1e3);
                times[2].push(step * 1e3);
            }
        }
        for (name, t) in ["prepare", "forward", "train_step"].iter().zip(&times) {
            if *name == "train_step" && !bench.backward {
                continue;
            }
            let (mean, std) = mean_std(t);
            csv.push_str(&format!(
                "{n},{},{name},{mean:.3},{std:.3},{}\n",
                bench.batch, bench.repetitions
            ));
        }
    }
    if let Some(count) = counted {
        println!(
            "parameters: {count} (analytic {})",
            classifier.analytic_param_count(3, bench.classes)
        );
    }
    print!("{csv}");
    if let Some(dir) = &o.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write(&dir.join("bench.csv"), &csv)?;
    }
    Ok(0)
}
