use std::sync::Arc;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::{Float, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
///
/// Receives the operation's inputs, its output and the gradient flowing into
/// the output. Returns one entry per input; entries for inputs whose `needs`
/// flag is false may be `None`.
pub trait BackwardRule: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>>;
}

struct Node {
    tensor: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn BackwardRule>>,
}

/// Ordered record of operations. Inputs always precede the operations that
/// consume them, so a reverse sweep sees every gradient fully summed before
/// it is propagated further.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Max,
    Mean,
}

/// Broadcast pattern of a binary elementwise op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is a `[c]` / `[1, c]` row repeated over the left's rows.
    RightRow,
    /// Left operand is the repeated row.
    LeftRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// Sparse row-mixing matrix in CSR form: `out[i] = Σ w · in[j]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    pub offsets: Vec<usize>,
    pub entries: Vec<(usize, Float)>,
    pub input_rows: usize,
}

impl SparseRows {
    pub fn output_rows(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn row(&self, i: usize) -> &[(usize, Float)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it collects
    /// gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            tensor,
            inputs: Vec::new(),
            rule: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[Float]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn tensor_mut(&mut self, v: Var) -> &mut Tensor {
        &mut self.nodes[v.0].tensor
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    /// Records an operation with a caller-supplied backward rule. The output
    /// tracks gradient iff any input does; otherwise the rule is dropped.
    pub fn push_op(&mut self, output: Tensor, inputs: &[Var], rule: Box<dyn BackwardRule>) -> Var {
        let tracked = inputs.iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            tensor: output.with_requires_grad(tracked),
            inputs: inputs.to_vec(),
            rule: tracked.then_some(rule),
        });
        Var(self.nodes.len() - 1)
    }

    /// Clears accumulated gradient on every tensor.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    /// Reverse sweep from a one-element `loss`. Gradients are added to what
    /// is already stored, so calling twice without [`Tape::zero_grad`]
    /// accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 || lt.rank() > 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            );
        }
        if !lt.requires_grad() {
            return Ok(());
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<Float>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..end).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(rule) = &node.rule {
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].tensor.requires_grad())
                    .collect();
                let inputs: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|v| &self.nodes[v.0].tensor)
                    .collect();
                let input_grads = rule.backward(&inputs, &node.tensor, &g, &needs);
                for ((v, ig), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                    let (Some(ig), true) = (ig, *need) else {
                        continue;
                    };
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                node.tensor.accumulate_grad_owned(g);
            }
        }
        Ok(())
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            bail!(
                Dimension,
                "matmul shapes {:?} and {:?} do not agree",
                ta.shape(),
                tb.shape()
            );
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], gemm_nn(ta.values(), tb.values(), m, k, n))?;
        Ok(self.push_op(out, &[a, b], Box::new(MatMulRule { m, k, n })))
    }

    // ---- elementwise --------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = broadcast_kind(ta, tb)?;
        let (big, row_len) = match bc {
            Broadcast::Same | Broadcast::RightRow => (ta, tb.numel()),
            Broadcast::LeftRow => (tb, ta.numel()),
        };
        let shape = big.shape().to_vec();
        let n = big.numel();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = match bc {
                Broadcast::Same => (ta.values()[i], tb.values()[i]),
                Broadcast::RightRow => (ta.values()[i], tb.values()[i % row_len]),
                Broadcast::LeftRow => (ta.values()[i % row_len], tb.values()[i]),
            };
            out.push(match op {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            });
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push_op(out, &[a, b], Box::new(BinaryRule { op, bc })))
    }

    pub fn scale(&mut self, a: Var, factor: Float) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.values().iter().map(|v| v * factor).collect(),
        )
        .expect("same shape");
        self.push_op(out, &[a], Box::new(ScaleRule(factor)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.values()
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
        )
        .expect("same shape");
        self.push_op(out, &[a], Box::new(ReluRule))
    }

    // ---- reductions ---------------------------------------------------------

    /// Reduces along `axis`, removing it from the shape. Max routes gradient
    /// to the first maximal element.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            bail!(
                Dimension,
                "reduce axis {axis} out of range for shape {:?}",
                ta.shape()
            );
        }
        let shape = ta.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if len == 0 && kind != ReduceKind::Sum {
            bail!(Dimension, "cannot take {kind:?} over an empty axis");
        }
        let v = ta.values();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0usize; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| v[(o * len + j) * inner + i];
                let slot = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: Float = (0..len).map(at).sum();
                        out[slot] = if kind == ReduceKind::Mean {
                            s / len as Float
                        } else {
                            s
                        };
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        out[slot] = at(best);
                        argmax[slot] = best;
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push_op(
            out,
            &[a],
            Box::new(ReduceRule {
                kind,
                outer,
                len,
                inner,
                argmax,
            }),
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        self.reduce(ReduceKind::Sum, flat, 0)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self
            .value(a)
            .clone()
            .with_requires_grad(false)
            .reshape(shape)?;
        Ok(self.push_op(out, &[a], Box::new(IdentityRule)))
    }

    /// Per-segment max over rows of a `[R, c]` matrix, giving `[segments, c]`.
    /// Used as the global pooling of one cloud within a stacked batch.
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            bail!(
                Dimension,
                "segment_max expects a matrix, got {:?}",
                ta.shape()
            );
        }
        let c = ta.shape()[1];
        let mut out = vec![0.0; segments.len() * c];
        let mut argmax = vec![0usize; segments.len() * c];
        for (s, &(start, end)) in segments.iter().enumerate() {
            if start >= end || end > ta.rows() {
                bail!(
                    Dimension,
                    "segment {start}..{end} invalid for {} rows",
                    ta.rows()
                );
            }
            for ch in 0..c {
                let mut best = start;
                for r in start + 1..end {
                    if ta.values()[r * c + ch] > ta.values()[best * c + ch] {
                        best = r;
                    }
                }
                out[s * c + ch] = ta.values()[best * c + ch];
                argmax[s * c + ch] = best;
            }
        }
        let out = Tensor::new(vec![segments.len(), c], out)?;
        Ok(self.push_op(out, &[a], Box::new(ScatterRule { argmax, c })))
    }

    // ---- structural ---------------------------------------------------------

    /// Channel-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            bail!(Dimension, "concat of zero tensors");
        };
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 2 || t.rows() != rows {
                bail!(
                    Dimension,
                    "concat expects matrices with {rows} rows, got {:?}",
                    t.shape()
                );
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        Ok(self.push_op(out, parts, Box::new(ConcatRule { widths })))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let w = ta.row_len();
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= ta.rows() {
                bail!(Dimension, "row {r} out of range for {:?}", ta.shape());
            }
            out.extend_from_slice(ta.row(r));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] = rows.len();
        let n_in = ta.rows();
        let out = Tensor::new(shape, out)?;
        let mix = SparseRows {
            offsets: (0..=rows.len()).collect(),
            entries: rows.iter().map(|&r| (r, 1.0)).collect(),
            input_rows: n_in,
        };
        Ok(self.push_op(
            out,
            &[a],
            Box::new(RowMixRule {
                mix: Arc::new(mix),
                w,
            }),
        ))
    }

    /// `out[i] = Σ_j w_ij · a[j]` for a fixed sparse mixing matrix.
    pub fn row_mix(&mut self, a: Var, mix: Arc<SparseRows>) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.rows() != mix.input_rows {
            bail!(
                Dimension,
                "row_mix over {} rows applied to {:?}",
                mix.input_rows,
                ta.shape()
            );
        }
        let w = ta.shape()[1];
        let mut out = vec![0.0; mix.output_rows() * w];
        for i in 0..mix.output_rows() {
            let dst = &mut out[i * w..(i + 1) * w];
            for &(j, wt) in mix.row(i) {
                dst.iter_mut()
                    .zip(ta.row(j))
                    .for_each(|(d, s)| *d += wt * s);
            }
        }
        let out = Tensor::new(vec![mix.output_rows(), w], out)?;
        Ok(self.push_op(out, &[a], Box::new(RowMixRule { mix, w })))
    }
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    let is_row_of = |row: &Tensor, full: &Tensor| {
        full.rank() == 2
            && row.numel() == full.shape()[1]
            && (row.rank() == 1 || (row.rank() == 2 && row.shape()[0] == 1))
    };
    if is_row_of(b, a) {
        Ok(Broadcast::RightRow)
    } else if is_row_of(a, b) {
        Ok(Broadcast::LeftRow)
    } else {
        Err(Error::Dimension(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn fold_rows(g: &[Float], row_len: usize) -> Vec<Float> {
    let mut out = vec![0.0; row_len];
    for chunk in g.chunks(row_len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

// ---- backward rules ----------------------------------------------------------

struct MatMulRule {
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardRule for MatMulRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        // dA = dC · Bᵀ, dB = Aᵀ · dC
        let da = needs[0].then(|| gemm_nt(g, inputs[1].values(), m, n, k));
        let db = needs[1].then(|| gemm_tn(inputs[0].values(), g, k, m, n));
        vec![da, db]
    }
}

struct BinaryRule {
    op: Binary,
    bc: Broadcast,
}

impl BackwardRule for BinaryRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (a, b) = (inputs[0], inputs[1]);
        // Gradient w.r.t. each operand at full (broadcast) size.
        let full = |other: &Tensor, other_is_row: bool, sign: Float| -> Vec<Float> {
            match self.op {
                Binary::Add => g.to_vec(),
                Binary::Sub => g.iter().map(|v| v * sign).collect(),
                Binary::Mul => {
                    let w = other.numel();
                    g.iter()
                        .enumerate()
                        .map(|(i, gv)| {
                            gv * if other_is_row {
                                other.values()[i % w]
                            } else {
                                other.values()[i]
                            }
                        })
                        .collect()
                }
            }
        };
        let b_row = self.bc == Broadcast::RightRow;
        let a_row = self.bc == Broadcast::LeftRow;
        let ga = needs[0].then(|| {
            let f = full(b, b_row, 1.0);
            if a_row {
                fold_rows(&f, a.numel())
            } else {
                f
            }
        });
        let gb = needs[1].then(|| {
            let f = full(a, a_row, -1.0);
            if b_row {
                fold_rows(&f, b.numel())
            } else {
                f
            }
        });
        vec![ga, gb]
    }
}

struct ScaleRule(Float);

impl BackwardRule for ScaleRule {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[Float],
        _: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct ReluRule;

impl BackwardRule for ReluRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[Float],
        _: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let x = inputs[0].values();
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                .collect(),
        )]
    }
}

struct IdentityRule;

impl BackwardRule for IdentityRule {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[Float],
        _: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        vec![Some(g.to_vec())]
    }
}

struct ReduceRule {
    kind: ReduceKind,
    outer: usize,
    len: usize,
    inner: usize,
    argmax: Vec<usize>,
}

impl BackwardRule for ReduceRule {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[Float],
        _: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let (outer, len, inner) = (self.outer, self.len, self.inner);
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for i in 0..inner {
                let gv = g[o * inner + i];
                match self.kind {
                    ReduceKind::Sum => (0..len).for_each(|j| out[(o * len + j) * inner + i] = gv),
                    ReduceKind::Mean => {
                        let s = gv / len as Float;
                        (0..len).for_each(|j| out[(o * len + j) * inner + i] = s)
                    }
                    ReduceKind::Max => {
                        let j = self.argmax[o * inner + i];
                        out[(o * len + j) * inner + i] = gv;
                    }
                }
            }
        }
        vec![Some(out)]
    }
}

/// Routes each output element's gradient to one flat input row.
struct ScatterRule {
    argmax: Vec<usize>,
    c: usize,
}

impl BackwardRule for ScatterRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[Float],
        _: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let mut out = vec![0.0; inputs[0].numel()];
        for (slot, &row) in self.argmax.iter().enumerate() {
            let ch = slot % self.c;
            out[row * self.c + ch] += g[slot];
        }
        vec![Some(out)]
    }
}

struct ConcatRule {
    widths: Vec<usize>,
}

impl BackwardRule for ConcatRule {
    fn backward(
        &self,
        _: &[&Tensor],
        out: &Tensor,
        g: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let rows = out.rows();
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(self.widths.len());
        for (&w, &need) in self.widths.iter().zip(needs) {
            if need {
                let mut part = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                }
                grads.push(Some(part));
            } else {
                grads.push(None);
            }
            offset += w;
        }
        grads
    }
}

struct RowMixRule {
    mix: Arc<SparseRows>,
    w: usize,
}

impl BackwardRule for RowMixRule {
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[Float],
        _: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let w = self.w;
        let mut out = vec![0.0; self.mix.input_rows * w];
        for i in 0..self.mix.output_rows() {
            let src = &g[i * w..(i + 1) * w];
            for &(j, wt) in self.mix.row(i) {
                out[j * w..(j + 1) * w]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += wt * s);
            }
        }
        vec![Some(out)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::gradcheck::{central_difference, max_relative_error, STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[Float]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(
            shape,
            &(0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    }

    /// Checks d(build(x))/dx against central differences, where `build`
    /// records a scalar-valued graph on a fresh tape.
    fn check<F>(x: &Tensor, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone().with_requires_grad(true));
        let loss = build(&mut tape, v);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(v).unwrap().to_vec();
        let numeric = central_difference(
            |vals| {
                let mut tape = Tape::new();
                let v = tape.constant(t(x.shape(), vals));
                let loss = build(&mut tape, v);
                tape.value(loss).item().unwrap()
            },
            x.values(),
            STEP,
        );
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < tol, "relative error {err}");
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[3.0, 4.0]);
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[11.0]);
        let err = tape.matmul(b, b).unwrap_err().to_string();
        assert!(err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[3, 2]);
        check(
            &a,
            |tape, v| {
                let bv = tape.constant(b.clone());
                let c = tape.matmul(v, bv).unwrap();
                tape.sum_all(c).unwrap()
            },
            1e-5,
        );
        check(
            &b,
            |tape, v| {
                let av = tape.constant(a.clone());
                let c = tape.matmul(av, v).unwrap();
                let c = tape.mul(c, c).unwrap();
                tape.sum_all(c).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]).with_requires_grad(true));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).values(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum_all(r).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).values(), &[4.0, 6.0]);
        let s = tape.sub(a, b).unwrap();
        assert_eq!(tape.value(s).values(), &[-2.0, -2.0]);
        let bad = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn row_broadcast_both_sides() {
        let mut tape = Tape::new();
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.constant(t(&[2], &[10.0, 20.0]));
        let y = tape.add(m, r).unwrap();
        assert_eq!(tape.value(y).values(), &[11.0, 22.0, 13.0, 24.0]);
        let y = tape.sub(r, m).unwrap();
        assert_eq!(tape.value(y).values(), &[9.0, 18.0, 7.0, 16.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = random(&mut rng, &[1, 3]);
        let mat = random(&mut rng, &[4, 3]);
        check(
            &row,
            |tape, v| {
                let m = tape.constant(mat.clone());
                let y = tape.mul(m, v).unwrap();
                let y = tape.mul(y, y).unwrap();
                tape.sum_all(y).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 5.0, 3.0, 2.0]).with_requires_grad(true));
        let m = tape.reduce(ReduceKind::Max, x, 0).unwrap();
        assert_eq!(tape.value(m).values(), &[3.0, 5.0]);
        let y = tape.constant(t(&[1, 2], &[2.0, 4.0]));
        let mean = tape.reduce(ReduceKind::Mean, y, 1).unwrap();
        assert_eq!(tape.value(mean).values(), &[3.0]);
        assert!(tape.reduce(ReduceKind::Sum, y, 2).is_err());

        let loss = tape.sum_all(m).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]).with_requires_grad(true));
        let s = tape.reduce(ReduceKind::Sum, x, 1).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn max_ties_pick_first_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 1], &[2.0, 2.0, 1.0]).with_requires_grad(true));
        let m = tape.reduce(ReduceKind::Max, x, 0).unwrap();
        let loss = tape.sum_all(m).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 1], &[2.0, 2.0, 1.0]).with_requires_grad(true));
        let m = tape.segment_max(x, &[(0, 3)]).unwrap();
        let loss = tape.sum_all(m).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, 1.0, -2.0]).with_requires_grad(true));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
        assert!(tape.backward(sq).is_err());
    }

    #[test]
    fn two_layer_composition_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[5, 4]);
        let w1 = random(&mut rng, &[4, 6]);
        let b1 = random(&mut rng, &[6]);
        let w2 = random(&mut rng, &[6, 2]);
        let net = |tape: &mut Tape, w: Var| {
            let xv = tape.constant(x.clone());
            let bv = tape.constant(b1.clone());
            let w2v = tape.constant(w2.clone());
            let h = tape.matmul(xv, w).unwrap();
            let h = tape.add(h, bv).unwrap();
            let h = tape.relu(h);
            let y = tape.matmul(h, w2v).unwrap();
            let y = tape.mul(y, y).unwrap();
            tape.sum_all(y).unwrap()
        };
        check(&w1, net, 1e-5);
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, &[6, 3]);
        let probe = random(&mut rng, &[4, 9]);
        check(
            &x,
            |tape, v| {
                let g = tape.gather_rows(v, &[5, 0, 0, 2]).unwrap();
                let s = tape.scale(v, 0.5);
                let s = tape.reshape(s, vec![6, 3]).unwrap();
                let pooled = tape.segment_max(s, &[(0, 2), (2, 6)]).unwrap();
                let mixed = tape
                    .row_mix(
                        v,
                        Arc::new(SparseRows {
                            offsets: vec![0, 2, 3],
                            entries: vec![(1, 0.25), (4, -1.5), (3, 2.0)],
                            input_rows: 6,
                        }),
                    )
                    .unwrap();
                let cat = tape.concat_cols(&[g, g]).unwrap();
                let top = tape.concat_cols(&[pooled, mixed]).unwrap();
                let top = tape.reshape(top, vec![4, 3]).unwrap();
                let all = tape.concat_cols(&[cat, top]).unwrap();
                let p = tape.constant(probe.clone());
                let y = tape.mul(all, p).unwrap();
                let y = tape.mul(y, y).unwrap();
                let m = tape.reduce(ReduceKind::Mean, y, 0).unwrap();
                tape.sum_all(m).unwrap()
            },
            1e-5,
        );
    }

    #[test]
    fn constants_collect_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]).with_requires_grad(true));
        let y = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0]);
    }
}
