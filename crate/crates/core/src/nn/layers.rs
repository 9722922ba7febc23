//! Tape operations used by the networks: pointwise linear maps, batch
//! normalization, dropout masks and feature propagation weights.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::geometry::{dist2, Point3};
use crate::tensor::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{BackwardRule, Float, SparseRows, Tape, Tensor, Var};

pub const BN_EPS: Float = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: Float = 0.9;

fn column_sums(x: &[Float], c: usize) -> Vec<Float> {
    let mut s = vec![0.0; c];
    for row in x.chunks(c) {
        s.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    s
}

struct LinearRule {
    rows: usize,
    c_in: usize,
    c_out: usize,
}

impl BackwardRule for LinearRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (r, ci, co) = (self.rows, self.c_in, self.c_out);
        let mut out = vec![
            needs[0].then(|| gemm_nn(g, inputs[1].values(), r, co, ci)),
            needs[1].then(|| gemm_tn(g, inputs[0].values(), co, r, ci)),
        ];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| column_sums(g, co)));
        }
        out
    }
}

/// `x · Wᵀ + b` row by row. `W` holds `c_out · c_in` values in `[c_out, c_in]`
/// order under any shape, so a 1³ InterpConv weight `[c_out, 1, c_in]` works
/// unchanged.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (tx, tw) = (tape.value(x), tape.value(w));
    if tx.rank() != 2 {
        bail!(Dimension, "linear expects a matrix, got {:?}", tx.shape());
    }
    let (rows, c_in) = (tx.rows(), tx.shape()[1]);
    let c_out = tw.shape()[0];
    if tw.numel() != c_out * c_in {
        bail!(
            Dimension,
            "weight {:?} does not map {c_in} channels",
            tw.shape()
        );
    }
    let mut y = gemm_nt(tx.values(), tw.values(), rows, c_in, c_out);
    if let Some(b) = b {
        let tb = tape.value(b);
        if tb.numel() != c_out {
            bail!(
                Dimension,
                "bias has {} values for {c_out} outputs",
                tb.numel()
            );
        }
        for row in y.chunks_mut(c_out) {
            row.iter_mut().zip(tb.values()).for_each(|(y, b)| *y += b);
        }
    }
    let out = Tensor::new(vec![rows, c_out], y)?;
    let mut ins = vec![x, w];
    ins.extend(b);
    Ok(tape.push_op(out, &ins, Box::new(LinearRule { rows, c_in, c_out })))
}

/// Per-channel statistics of one batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
}

struct BatchNormRule {
    xhat: Vec<Float>,
    inv_std: Vec<Float>,
    c: usize,
    train: bool,
}

impl BackwardRule for BatchNormRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let c = self.c;
        let rows = g.len() / c;
        let gamma = inputs[1].values();
        let sum_g = column_sums(g, c);
        let mut sum_gx = vec![0.0; c];
        for (gr, xr) in g.chunks(c).zip(self.xhat.chunks(c)) {
            for j in 0..c {
                sum_gx[j] += gr[j] * xr[j];
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.len()];
            let n = rows as Float;
            for ((d, gr), xr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(self.xhat.chunks(c)) {
                for j in 0..c {
                    let k = gamma[j] * self.inv_std[j];
                    d[j] = if self.train {
                        k * (gr[j] - sum_g[j] / n - xr[j] * sum_gx[j] / n)
                    } else {
                        k * gr[j]
                    };
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(sum_gx), needs[2].then_some(sum_g)]
    }
}

/// Per-channel normalization over all rows of `x [R, c]`, then `γ·x̂ + β`.
/// In training mode the batch statistics are used and returned; otherwise
/// `running` supplies them.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: Option<&BatchStats>,
) -> Result<(Var, Option<BatchStats>)> {
    let tx = tape.value(x);
    if tx.rank() != 2 {
        bail!(
            Dimension,
            "batch norm expects a matrix, got {:?}",
            tx.shape()
        );
    }
    let (rows, c) = (tx.rows(), tx.shape()[1]);
    let (tg, tb) = (tape.value(gamma), tape.value(beta));
    if tg.numel() != c || tb.numel() != c {
        bail!(
            Dimension,
            "batch norm over {c} channels given {} scales and {} shifts",
            tg.numel(),
            tb.numel()
        );
    }
    if let Some(r) = running {
        if r.mean.len() != c || r.var.len() != c {
            bail!(
                Dimension,
                "running statistics have {} channels, input {c}",
                r.mean.len()
            );
        }
    }
    let stats = match running {
        Some(r) => r.clone(),
        None => {
            if rows == 0 {
                bail!(Dimension, "batch norm over zero rows");
            }
            let n = rows as Float;
            let mean: Vec<Float> = column_sums(tx.values(), c).iter().map(|s| s / n).collect();
            let mut var = vec![0.0; c];
            for row in tx.values().chunks(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            BatchStats { mean, var }
        }
    };
    let inv_std: Vec<Float> = stats
        .var
        .iter()
        .map(|v| 1.0 / (v + BN_EPS).sqrt())
        .collect();
    let mut xhat = tx.values().to_vec();
    let mut y = vec![0.0; xhat.len()];
    for (xr, yr) in xhat.chunks_mut(c).zip(y.chunks_mut(c)) {
        for j in 0..c {
            xr[j] = (xr[j] - stats.mean[j]) * inv_std[j];
            yr[j] = tg.values()[j] * xr[j] + tb.values()[j];
        }
    }
    let out = Tensor::new(vec![rows, c], y)?;
    let train = running.is_none();
    let v = tape.push_op(
        out,
        &[x, gamma, beta],
        Box::new(BatchNormRule {
            xhat,
            inv_std,
            c,
            train,
        }),
    );
    Ok((v, train.then_some(stats)))
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else
/// `1 / (1 − p)`.
pub fn dropout_mask(shape: &[usize], p: Float, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| if rng.random::<Float>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), v).expect("shape matches count")
}

/// Interpolation weights from coarse to fine points: the 3 nearest coarse
/// points (fewer if the coarse set is smaller) weighted by `1/d²` and
/// normalized. A fine point that coincides with a coarse point copies it.
/// Distance ties resolve to the lower coarse index.
pub fn propagation_weights(coarse: &[Point3], fine: &[Point3]) -> Result<Vec<Vec<(usize, Float)>>> {
    if coarse.is_empty() {
        bail!(Contract, "feature propagation from an empty point set");
    }
    let k = coarse.len().min(3);
    Ok(fine
        .iter()
        .map(|&f| {
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (j, &c) in coarse.iter().enumerate() {
                let d = dist2(f, c);
                if best.len() == k && d >= best[k - 1].0 {
                    continue;
                }
                let at = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(at, (d, j));
                best.truncate(k);
            }
            if best[0].0 == 0.0 {
                return vec![(best[0].1, 1.0)];
            }
            let total: f64 = best.iter().map(|(d, _)| 1.0 / d).sum();
            best.iter()
                .map(|&(d, j)| (j, (1.0 / d / total) as Float))
                .collect()
        })
        .collect())
}

/// Stacks per-cloud weight lists into one mixing matrix, offsetting row
/// indices by each cloud's start in the stacked coarse rows.
pub fn stack_mixes(
    parts: &[(Vec<Vec<(usize, Float)>>, usize)],
    input_rows: usize,
) -> Arc<SparseRows> {
    let mut mix = SparseRows {
        offsets: vec![0],
        entries: Vec::new(),
        input_rows,
    };
    for (rows, offset) in parts {
        for row in rows {
            mix.entries
                .extend(row.iter().map(|&(j, w)| (j + offset, w)));
            mix.offsets.push(mix.entries.len());
        }
    }
    Arc::new(mix)
}

/// Interpolates `coarse` features onto `fine` points and appends the
/// `skip` features, without the learned layer that follows in a network.
pub fn feature_propagation(
    coarse: &crate::geometry::PointSet,
    fine: &[Point3],
    skip: &Tensor,
) -> Result<Tensor> {
    if skip.rank() != 2 || skip.rows() != fine.len() {
        bail!(
            Dimension,
            "skip features {:?} do not match {} fine points",
            skip.shape(),
            fine.len()
        );
    }
    if fine.len() < coarse.len() {
        bail!(
            Contract,
            "propagating {} points onto {} is not an upsampling",
            coarse.len(),
            fine.len()
        );
    }
    let weights = propagation_weights(coarse.coords(), fine)?;
    let c = coarse.channels();
    let sc = skip.shape()[1];
    let mut out = Vec::with_capacity(fine.len() * (c + sc));
    for (i, row) in weights.iter().enumerate() {
        let mut acc = vec![0.0; c];
        for &(j, w) in row {
            acc.iter_mut()
                .zip(coarse.feature_row(j))
                .for_each(|(a, f)| *a += w * f);
        }
        out.extend(acc);
        out.extend_from_slice(skip.row(i));
    }
    Tensor::new(vec![fine.len(), c + sc], out)
}
