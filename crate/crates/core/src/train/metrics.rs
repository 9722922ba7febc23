//! Accuracy and part-segmentation IoU.

use crate::error::{bail, Result};

/// Fraction of equal entries.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// IoU of one shape averaged over the parts of its category. A part absent
/// from both prediction and truth counts as IoU 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], parts: &[usize]) -> f64 {
    if parts.is_empty() {
        return 1.0;
    }
    let total: f64 = parts
        .iter()
        .map(|&p| {
            let mut inter = 0usize;
            let mut union = 0usize;
            for (&a, &b) in pred.iter().zip(truth) {
                let (ia, ib) = (a == p, b == p);
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    total / parts.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationScores {
    /// Over all points of all shapes.
    pub accuracy: f64,
    /// Mean over categories of the mean shape IoU within the category.
    pub miou_cat: f64,
    /// Mean shape IoU over all shapes.
    pub miou_inst: f64,
    /// Mean shape IoU per category (`None` for categories with no shapes).
    pub per_category: Vec<Option<f64>>,
}

/// ShapeNet-style scores: each shape's IoU is the mean over the part labels
/// of its category; instance mIoU averages shapes, category mIoU averages
/// the per-category means.
pub fn segmentation_scores(
    preds: &[Vec<usize>],
    truths: &[Vec<usize>],
    categories: &[usize],
    category_parts: &[Vec<usize>],
) -> Result<SegmentationScores> {
    if preds.len() != truths.len() || truths.len() != categories.len() {
        bail!(
            Dimension,
            "mismatched prediction, label and category counts"
        );
    }
    let mut sums = vec![(0.0, 0usize); category_parts.len()];
    let (mut hits, mut points, mut inst) = (0usize, 0usize, 0.0);
    for ((p, t), &c) in preds.iter().zip(truths).zip(categories) {
        if p.len() != t.len() {
            bail!(
                Dimension,
                "prediction of {} points for {} labels",
                p.len(),
                t.len()
            );
        }
        let Some(parts) = category_parts.get(c) else {
            bail!(Input, "unknown category {c}");
        };
        let iou = shape_iou(p, t, parts);
        inst += iou;
        sums[c].0 += iou;
        sums[c].1 += 1;
        hits += p.iter().zip(t).filter(|(a, b)| a == b).count();
        points += t.len();
    }
    let per_category: Vec<Option<f64>> = sums
        .iter()
        .map(|&(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    let present: Vec<f64> = per_category.iter().flatten().copied().collect();
    Ok(SegmentationScores {
        accuracy: if points == 0 {
            0.0
        } else {
            hits as f64 / points as f64
        },
        miou_cat: if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
        miou_inst: if preds.is_empty() {
            0.0
        } else {
            inst / preds.len() as f64
        },
        per_category,
    })
}
