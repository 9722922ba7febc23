//! Softmax cross-entropy.

use crate::error::{bail, Result};
use crate::tensor::{BackwardRule, Float, Tape, Tensor, Var};

struct CrossEntropyRule {
    softmax: Vec<Float>,
    labels: Vec<usize>,
    k: usize,
}

impl BackwardRule for CrossEntropyRule {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        g: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let scale = g[0] / self.labels.len() as Float;
        vec![needs[0].then(|| {
            let mut d = self.softmax.clone();
            for (row, &y) in d.chunks_mut(self.k).zip(&self.labels) {
                row[y] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            d
        })]
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &[Float], k: usize) -> Vec<Float> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Mean over rows of `−log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let t = tape.value(logits);
    if t.rank() != 2 || t.rows() != labels.len() || t.rows() == 0 {
        bail!(
            Dimension,
            "logits {:?} do not match {} labels",
            t.shape(),
            labels.len()
        );
    }
    let k = t.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        bail!(Input, "label {bad} outside {k} classes");
    }
    let mut loss = 0.0;
    for (row, &y) in t.values().chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<Float>().ln();
        loss += lse - row[y];
    }
    loss /= labels.len() as Float;
    let softmax = softmax_rows(t.values(), k);
    Ok(tape.push_op(
        Tensor::scalar(loss),
        &[logits],
        Box::new(CrossEntropyRule {
            softmax,
            labels: labels.to_vec(),
            k,
        }),
    ))
}
