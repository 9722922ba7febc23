//! Builds the train and validation splits a config describes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};

use interpcnn::data::{
    load_manifest, load_off, load_ply, load_xyz, synthetic_classification, synthetic_segmentation,
    Dataset, Label, LabeledCloud,
};
use interpcnn::geometry::{normalize_coords, random_sample, PointSet};
use interpcnn::nn::Task;

use crate::config::DataConfig;

pub fn load(data: &DataConfig, task: Task) -> Result<(Dataset, Dataset)> {
    match data {
        &DataConfig::Synthetic {
            train,
            test,
            points,
            noise,
            seed,
        } => Ok(match task {
            Task::Classification => synthetic_classification(train, test, points, noise, seed)?,
            Task::Segmentation => synthetic_segmentation(train + test, test, points, noise, seed)?,
        }),
        DataConfig::Manifest {
            manifest,
            points,
            schema,
        } => from_manifest(manifest, *points, schema.as_deref(), task),
    }
}

/// Reads one cloud file by extension, normalized into the unit ball and
/// capped at `points` points.
pub fn read_cloud(
    path: &Path,
    points: usize,
    schema: Option<&str>,
    seed: u64,
) -> Result<LabeledCloud> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let lc = match ext.as_str() {
        "off" => LabeledCloud::new(load_off(path, points, seed)?, Label::Class(0), 0)?,
        "ply" => LabeledCloud::new(load_ply(path)?, Label::Class(0), 0)?,
        _ => load_xyz(path, schema)?,
    };
    cap(normalized(lc)?, points, seed)
}

fn normalized(mut lc: LabeledCloud) -> Result<LabeledCloud> {
    let (coords, feats) = lc.cloud.into_parts();
    lc.cloud = PointSet::new(normalize_coords(&coords), feats)?;
    Ok(lc)
}

fn cap(mut lc: LabeledCloud, points: usize, seed: u64) -> Result<LabeledCloud> {
    if lc.cloud.len() <= points {
        return Ok(lc);
    }
    let keep = random_sample(lc.cloud.len(), points, seed)?;
    lc.cloud = lc.cloud.select(&keep);
    if let Label::Parts(p) = &lc.label {
        lc.label = Label::Parts(keep.iter().map(|&i| p[i]).collect());
    }
    Ok(lc)
}

fn from_manifest(
    path: &Path,
    points: usize,
    schema: Option<&str>,
    task: Task,
) -> Result<(Dataset, Dataset)> {
    let entries = load_manifest(path)?;
    if entries.is_empty() {
        bail!("{}: manifest lists no clouds", path.display());
    }
    let names: BTreeSet<&str> = entries.iter().map(|e| e.label.as_str()).collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let mut lc = read_cloud(&e.path, points, schema, i as u64)
            .with_context(|| format!("{}: entry `{}`", path.display(), e.name))?;
        let id = index[e.label.as_str()];
        match task {
            Task::Classification => lc.label = Label::Class(id),
            Task::Segmentation => {
                if !matches!(lc.label, Label::Parts(_)) {
                    bail!(
                        "{}: entry `{}` has no per-point labels",
                        path.display(),
                        e.name
                    );
                }
                lc.category = id;
            }
        }
        match e.split.as_str() {
            "train" => train.push(lc),
            "test" | "val" => val.push(lc),
            other => bail!(
                "{}: entry `{}` has unknown split `{other}`",
                path.display(),
                e.name
            ),
        }
    }
    if train.is_empty() || val.is_empty() {
        bail!("{}: need both train and test entries", path.display());
    }
    let (classes, parts) = match task {
        Task::Classification => (names.len(), Vec::new()),
        Task::Segmentation => {
            let mut parts = vec![BTreeSet::new(); names.len()];
            for lc in train.iter().chain(&val) {
                if let Label::Parts(p) = &lc.label {
                    parts[lc.category].extend(p.iter().copied());
                }
            }
            let k = parts
                .iter()
                .filter_map(|s| s.last())
                .max()
                .map_or(0, |m| m + 1);
            (
                k,
                parts.into_iter().map(|s| s.into_iter().collect()).collect(),
            )
        }
    };
    Ok((
        Dataset::new(train, classes, parts.clone())?,
        Dataset::new(val, classes, parts)?,
    ))
}
