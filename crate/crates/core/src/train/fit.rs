//! Epoch loop and evaluation.

use std::borrow::Cow;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_coords, AugmentSpec};
use super::checkpoint::Checkpoint;
use super::loss::{cross_entropy, softmax_rows};
use super::metrics::{accuracy, segmentation_scores};
use super::optim::{adam_step, AdamConfig, OptimState};
use super::FeatureMode;
use crate::data::{Dataset, Label};
use crate::error::{bail, Error, Result};
use crate::geometry::Point3;
use crate::nn::{Geometry, Mode, Model, Task};
use crate::tensor::{Float, Tape, Tensor};

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,miou_cat,miou_inst,lr,seconds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub features: FeatureMode,
    pub optimizer: AdamConfig,
    pub augment: AugmentSpec,
    /// Recompute batch-norm running statistics from the training set
    /// (unaugmented, dropout off) after every epoch instead of relying on
    /// the moving averages alone.
    #[serde(default)]
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            features: FeatureMode::Xyz,
            optimizer: AdamConfig::default(),
            augment: AugmentSpec::default(),
            recalibrate_bn: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(Config, "epochs and batch size must be positive");
        }
        self.optimizer.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub miou_cat: Option<f64>,
    pub miou_inst: Option<f64>,
    /// Predicted class per cloud, or per point concatenated over clouds.
    pub predictions: Vec<usize>,
}

impl EvalResult {
    /// Instance mIoU for segmentation, accuracy otherwise.
    pub fn score(&self) -> f64 {
        self.miou_inst.unwrap_or(self.accuracy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub miou_cat: Option<f64>,
    pub miou_inst: Option<f64>,
    pub lr: f64,
    pub seconds: Option<f64>,
}

impl EpochRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{},{},{:.6e},{}",
            self.epoch,
            self.split,
            self.loss,
            self.accuracy,
            opt(self.miou_cat),
            opt(self.miou_inst),
            self.lr,
            self.seconds.map(|s| format!("{s:.3}")).unwrap_or_default(),
        )
    }
}

pub struct FitOutput {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best: EvalResult,
    pub last: EvalResult,
    pub optim: OptimState,
}

struct Batch {
    coords: Vec<Vec<Point3>>,
    features: Tensor,
    labels: Vec<usize>,
}

fn assemble(
    data: &Dataset,
    idx: &[usize],
    mode: FeatureMode,
    coords: Vec<Vec<Point3>>,
    task: Task,
) -> Result<Batch> {
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (&i, c) in idx.iter().zip(&coords) {
        let lc = &data.clouds[i];
        mode.extend_rows(c, lc.cloud.features().values(), &mut feats)?;
        match (&lc.label, task) {
            (Label::Class(y), Task::Classification) => labels.push(*y),
            (Label::Parts(p), Task::Segmentation) => labels.extend_from_slice(p),
            _ => bail!(Input, "cloud {i} label does not fit a {task:?} network"),
        }
    }
    let rows: usize = coords.iter().map(Vec::len).sum();
    let c = feats.len().checked_div(rows).unwrap_or(0);
    Ok(Batch {
        coords,
        features: Tensor::new(vec![rows, c], feats)?,
        labels,
    })
}

fn mean_cross_entropy(logits: &[Float], k: usize, labels: &[usize]) -> f64 {
    let p = softmax_rows(logits, k);
    let total: f64 = p
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| -(row[y].max(Float::MIN_POSITIVE) as f64).ln())
        .sum();
    total / labels.len().max(1) as f64
}

fn argmax(row: &[Float], allowed: Option<&[usize]>) -> usize {
    let mut best = usize::MAX;
    for j in 0..row.len() {
        if allowed.is_some_and(|a| !a.contains(&j)) {
            continue;
        }
        if best == usize::MAX || row[j] > row[best] {
            best = j;
        }
    }
    best
}

/// Evaluation-mode metrics over a dataset. Segmentation predictions are
/// restricted to the part labels of each shape's category.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    mode: FeatureMode,
    batch_size: usize,
) -> Result<EvalResult> {
    evaluate_cached(model, data, mode, batch_size, &mut GeometryCache::new(0))
}

fn evaluate_cached(
    model: &Model,
    data: &Dataset,
    mode: FeatureMode,
    batch_size: usize,
    cache: &mut GeometryCache,
) -> Result<EvalResult> {
    if data.is_empty() {
        bail!(Input, "evaluation on an empty dataset");
    }
    let task = model.spec().task();
    let k = model.spec().classes();
    if data.classes != k {
        bail!(Input, "dataset has {} labels, network {k}", data.classes);
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut rows) = (0.0, 0usize);
    let mut predictions = Vec::new();
    let mut truth = Vec::new();
    for (b, idx) in order.chunks(batch_size.max(1)).enumerate() {
        let coords: Vec<Vec<Point3>> = idx
            .iter()
            .map(|&i| data.clouds[i].cloud.coords().to_vec())
            .collect();
        let batch = assemble(data, idx, mode, coords, task)?;
        let refs: Vec<&[Point3]> = batch.coords.iter().map(Vec::as_slice).collect();
        let geo = cache.get(b, model, &refs)?;
        let out = model.infer(&geo, batch.features)?;
        loss_sum += mean_cross_entropy(out.values(), k, &batch.labels) * batch.labels.len() as f64;
        rows += batch.labels.len();
        let mut r = 0;
        for (&i, c) in idx.iter().zip(&batch.coords) {
            let n = if task == Task::Classification {
                1
            } else {
                c.len()
            };
            let allowed = data
                .category_parts
                .get(data.clouds[i].category)
                .map(Vec::as_slice);
            for _ in 0..n {
                let a = if task == Task::Segmentation {
                    allowed
                } else {
                    None
                };
                predictions.push(argmax(out.row(r), a));
                r += 1;
            }
        }
        truth.extend(batch.labels);
    }
    let loss = loss_sum / rows as f64;
    if task == Task::Classification {
        return Ok(EvalResult {
            loss,
            accuracy: accuracy(&predictions, &truth),
            miou_cat: None,
            miou_inst: None,
            predictions,
        });
    }
    let mut preds = Vec::with_capacity(data.len());
    let mut truths = Vec::with_capacity(data.len());
    let mut at = 0;
    for c in &data.clouds {
        let n = c.cloud.len();
        preds.push(predictions[at..at + n].to_vec());
        truths.push(truth[at..at + n].to_vec());
        at += n;
    }
    let cats: Vec<usize> = data.clouds.iter().map(|c| c.category).collect();
    let s = segmentation_scores(&preds, &truths, &cats, &data.category_parts)?;
    Ok(EvalResult {
        loss,
        accuracy: s.accuracy,
        miou_cat: Some(s.miou_cat),
        miou_inst: Some(s.miou_inst),
        predictions,
    })
}

fn checkpoint_of(model: &Model, config: &str, epoch: usize, optim: &OptimState) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    tensors.extend(model.running_stats());
    Checkpoint {
        in_channels: model.spec().in_channels(),
        points: model.spec().points(),
        classes: model.spec().classes(),
        epoch,
        config: config.to_string(),
        tensors,
        optim: Some(optim.clone()),
    }
}

/// Training-mode statistics of every batch-norm node over the whole
/// dataset, written back as the running statistics.
pub fn recalibrate(
    model: &mut Model,
    data: &Dataset,
    mode: FeatureMode,
    batch_size: usize,
) -> Result<()> {
    recalibrate_cached(model, data, mode, batch_size, &mut GeometryCache::new(0))
}

fn recalibrate_cached(
    model: &mut Model,
    data: &Dataset,
    mode: FeatureMode,
    batch_size: usize,
    cache: &mut GeometryCache,
) -> Result<()> {
    let task = model.spec().task();
    let order: Vec<usize> = (0..data.len()).collect();
    let mut batches = Vec::new();
    for (b, idx) in order.chunks(batch_size.max(1)).enumerate() {
        let coords: Vec<Vec<Point3>> = idx
            .iter()
            .map(|&i| data.clouds[i].cloud.coords().to_vec())
            .collect();
        let batch = assemble(data, idx, mode, coords, task)?;
        let refs: Vec<&[Point3]> = batch.coords.iter().map(Vec::as_slice).collect();
        let geo = cache.get(b, model, &refs)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &geo, batch.features, &Mode::Statistics)?;
        batches.push((pass.stats, idx.len()));
    }
    model.set_running_from(&batches);
    Ok(())
}

/// Total bytes of batch geometry `fit` keeps for its unaugmented passes.
const GEOMETRY_CACHE_BYTES: usize = 256 << 20;

/// Geometry of fixed-coordinate batches, indexed by batch number and kept
/// while it fits the byte budget. Geometry depends only on coordinates and
/// the sampling settings, never on parameters.
struct GeometryCache {
    slots: Vec<Option<Geometry>>,
    left: usize,
}

impl GeometryCache {
    fn new(budget: usize) -> Self {
        Self {
            slots: Vec::new(),
            left: budget,
        }
    }

    fn get(&mut self, b: usize, model: &Model, coords: &[&[Point3]]) -> Result<Cow<'_, Geometry>> {
        if self.slots.len() <= b {
            self.slots.resize_with(b + 1, || None);
        }
        if self.slots[b].is_none() {
            let geo = model.prepare(coords)?;
            let bytes = geo.heap_bytes();
            if bytes > self.left {
                return Ok(Cow::Owned(geo));
            }
            self.left -= bytes;
            self.slots[b] = Some(geo);
        }
        Ok(Cow::Borrowed(
            self.slots[b].as_ref().expect("slot filled above"),
        ))
    }
}

/// Writes the parameters from the start of the failing epoch as
/// `last_good.icnn`, then reports the divergence.
fn diverged(
    model: &Model,
    snapshot: &[Tensor],
    out: Option<&Path>,
    config_text: &str,
    epoch: usize,
    what: String,
) -> Result<FitOutput> {
    if let Some(dir) = out {
        let mut restored = checkpoint_of(
            model,
            config_text,
            epoch - 1,
            &OptimState::new(model.params()),
        );
        restored.optim = None;
        for ((_, t), s) in restored.tensors.iter_mut().zip(snapshot) {
            *t = s.clone();
        }
        restored.save(&dir.join("last_good.icnn"))?;
    }
    bail!(Divergence, "epoch {epoch}: {what}")
}

fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Trains `model` in place. Each epoch shuffles, augments, steps Adam per
/// batch and evaluates on `val`. With `out` set, writes `metrics.csv` and
/// keeps the best-validation checkpoint as `best.icnn` (plus
/// `last_good.icnn` if training diverges). `timing` controls whether the
/// `seconds` column is filled; leave it off for byte-reproducible logs.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
    config_text: &str,
    timing: bool,
) -> Result<FitOutput> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(Input, "empty training set");
    }
    let task = model.spec().task();
    let k = model.spec().classes();
    let mut optim = OptimState::new(model.params());
    let mut log = match out {
        Some(dir) => {
            let path = dir.join("metrics.csv");
            let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut best: Option<(usize, EvalResult)> = None;
    let mut last = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut val_cache = GeometryCache::new(GEOMETRY_CACHE_BYTES / 2);
    let mut train_cache = GeometryCache::new(GEOMETRY_CACHE_BYTES / 2);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.optimizer.lr_at(epoch - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let snapshot: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let coords: Vec<Vec<Point3>> = idx
                .iter()
                .map(|&i| {
                    let mut r =
                        ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch as u64, 1 + i as u64));
                    augment_coords(train.clouds[i].cloud.coords(), &cfg.augment, &mut r)
                })
                .collect();
            let batch = assemble(train, idx, cfg.features, coords, task)?;
            let refs: Vec<&[Point3]> = batch.coords.iter().map(Vec::as_slice).collect();
            let geo = model.prepare(&refs)?;
            let mut tape = Tape::new();
            let dropout_seed = stream_seed(seed, epoch as u64, 1 << 40 | b as u64);
            let pass = model.forward(
                &mut tape,
                &geo,
                batch.features,
                &Mode::Train { dropout_seed },
            )?;
            let loss = cross_entropy(&mut tape, pass.output, &batch.labels)?;
            let lv = tape.value(loss).item().unwrap_or(Float::NAN) as f64;
            if !lv.is_finite() {
                return diverged(
                    model,
                    &snapshot,
                    out,
                    config_text,
                    epoch,
                    format!("loss is {lv}"),
                );
            }
            let logits = tape.value(pass.output).clone();
            tape.backward(loss)?;
            let grads: Vec<Vec<Float>> = pass
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| {
                    tape.grad(v)
                        .map(<[Float]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; p.value.numel()])
                })
                .collect();
            drop(tape);
            if let Err(e) = adam_step(model.params_mut(), &grads, &mut optim, &cfg.optimizer, lr) {
                return match e {
                    Error::Divergence(msg) => {
                        diverged(model, &snapshot, out, config_text, epoch, msg)
                    }
                    e => Err(e),
                };
            }
            model.update_running(&pass.stats);
            loss_sum += lv * batch.labels.len() as f64;
            seen += batch.labels.len();
            hits += logits
                .values()
                .chunks(k)
                .zip(&batch.labels)
                .filter(|(row, &y)| argmax(row, None) == y)
                .count();
        }
        if cfg.recalibrate_bn {
            recalibrate_cached(model, train, cfg.features, cfg.batch_size, &mut train_cache)?;
        }
        let train_secs = started.elapsed().as_secs_f64();
        let train_row = EpochRow {
            epoch,
            split: "train",
            loss: loss_sum / seen as f64,
            accuracy: hits as f64 / seen as f64,
            miou_cat: None,
            miou_inst: None,
            lr,
            seconds: timing.then_some(train_secs),
        };
        let eval_started = Instant::now();
        let ev = evaluate_cached(model, val, cfg.features, cfg.batch_size, &mut val_cache)?;
        let val_row = EpochRow {
            epoch,
            split: "val",
            loss: ev.loss,
            accuracy: ev.accuracy,
            miou_cat: ev.miou_cat,
            miou_inst: ev.miou_inst,
            lr,
            seconds: timing.then_some(eval_started.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3} | val loss {:.4} acc {:.3}{}",
            train_row.loss,
            train_row.accuracy,
            ev.loss,
            ev.accuracy,
            ev.miou_inst
                .map(|m| format!(" mIoU {m:.3}"))
                .unwrap_or_default()
        );
        if let Some((f, path)) = &mut log {
            writeln!(f, "{}\n{}", train_row.csv_line(), val_row.csv_line())
                .map_err(|e| Error::io(&*path, e))?;
        }
        rows.push(train_row);
        rows.push(val_row);
        if best.as_ref().is_none_or(|(_, b)| ev.score() > b.score()) {
            if let Some(dir) = out {
                checkpoint_of(model, config_text, epoch, &optim).save(&dir.join("best.icnn"))?;
            }
            best = Some((epoch, ev.clone()));
        }
        last = Some(ev);
    }
    let (best_epoch, best) = best.expect("at least one epoch");
    Ok(FitOutput {
        rows,
        best_epoch,
        best,
        last: last.expect("at least one epoch"),
        optim,
    })
}

/// Builds a checkpoint from a trained model.
pub fn snapshot(model: &Model, config: &str, epoch: usize, optim: &OptimState) -> Checkpoint {
    checkpoint_of(model, config, epoch, optim)
}
