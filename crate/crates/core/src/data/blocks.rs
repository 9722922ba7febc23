//! Tiling of room scans into vertical columns.

use super::{Label, LabeledCloud};
use crate::error::{bail, Result};
use crate::geometry::PointSet;
use crate::tensor::{Float, Tensor};

/// Minimum points for a block to be kept.
pub const MIN_BLOCK_POINTS: usize = 32;

fn tiles(extent: f64, block: f64, stride: f64) -> usize {
    if extent <= block {
        1
    } else {
        ((extent - block) / stride).ceil() as usize + 1
    }
}

/// Splits a scene into `block × block` XY columns spaced `stride` apart
/// (full height). Each kept point gains three channels with its position
/// relative to the scene's bounding box, `(p − min) / extent` per axis.
/// Block ranges are half-open except at the far edge of the last tile.
/// Blocks under [`MIN_BLOCK_POINTS`] points are dropped.
pub fn split_blocks(scene: &LabeledCloud, block: f64, stride: f64) -> Result<Vec<LabeledCloud>> {
    let pts = scene.cloud.coords();
    if pts.is_empty() {
        bail!(Input, "cannot split an empty scene");
    }
    if !(block > 0.0) || !(stride > 0.0) {
        bail!(Input, "block {block} and stride {stride} must be positive");
    }
    let mut lo = pts[0];
    let mut hi = pts[0];
    for p in pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let extent: Vec<f64> = (0..3).map(|k| hi[k] - lo[k]).collect();
    let (nx, ny) = (
        tiles(extent[0], block, stride),
        tiles(extent[1], block, stride),
    );
    let c = scene.cloud.channels();
    let mut out = Vec::new();
    for ix in 0..nx {
        for iy in 0..ny {
            let x0 = lo[0] + ix as f64 * stride;
            let y0 = lo[1] + iy as f64 * stride;
            let inside = |v: f64, start: f64, last: bool| {
                v >= start && (v < start + block || (last && v <= start + block))
            };
            let members: Vec<usize> = (0..pts.len())
                .filter(|&i| {
                    inside(pts[i][0], x0, ix + 1 == nx) && inside(pts[i][1], y0, iy + 1 == ny)
                })
                .collect();
            if members.len() < MIN_BLOCK_POINTS {
                continue;
            }
            let mut feats = Vec::with_capacity(members.len() * (c + 3));
            for &i in &members {
                feats.extend_from_slice(scene.cloud.feature_row(i));
                for k in 0..3 {
                    let e = if extent[k] > 0.0 { extent[k] } else { 1.0 };
                    feats.push(((pts[i][k] - lo[k]) / e) as Float);
                }
            }
            let coords = members.iter().map(|&i| pts[i]).collect();
            let cloud = PointSet::new(coords, Tensor::new(vec![members.len(), c + 3], feats)?)?;
            let label = match &scene.label {
                Label::Parts(p) => Label::Parts(members.iter().map(|&i| p[i]).collect()),
                other => other.clone(),
            };
            out.push(LabeledCloud::new(cloud, label, scene.category)?);
        }
    }
    Ok(out)
}
