//! The interpolated convolution operator.
//!
//! For every output point `p̂` and kernel-weight site `p′`, input points
//! near `p̂ + p′` are interpolated onto the site, normalized per site, and
//! the resulting `n³ × c` feature block is dotted with each kernel:
//!
//! ```text
//! out[m][k] = Σ_{p′} (1/N_{p′}) Σ_δ T(p_δ, p′) · f(p̂ + p_δ) · W_k(p′) + b_k
//! ```
//!
//! Neighbor search, weights and denominators are computed once into a
//! [`NeighborPlan`] that forward and backward share. Weights and
//! denominators depend only on coordinates, which are not learnable, so the
//! backward pass treats them as constants.

use std::sync::Arc;

use crate::error::{bail, Result};
use crate::geometry::{add, sub, Point3, PointSet, SpatialIndex};
use crate::kernel::KernelLayout;
use crate::par;
use crate::tensor::linalg::{axpy, dot};
use crate::tensor::{BackwardRule, Float, Tape, Tensor, Var};

/// Learnable state of one layer: `weights` is `[c′, n³, c]`.
#[derive(Clone, Debug)]
pub struct InterpConvParams {
    pub layout: KernelLayout,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl InterpConvParams {
    pub fn new(layout: KernelLayout, weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        check_weight_shapes(&layout, &weights, bias.as_ref())?;
        if !weights.all_finite() || bias.as_ref().is_some_and(|b| !b.all_finite()) {
            bail!(Input, "interpconv parameters contain non-finite values");
        }
        Ok(InterpConvParams {
            layout,
            weights,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn forward(
        &self,
        inputs: &PointSet,
        plan: &NeighborPlan,
    ) -> Result<(Tensor, SavedForward)> {
        let c = inputs.channels();
        if c != self.in_channels() {
            bail!(
                Dimension,
                "layer expects {} input channels, cloud has {c}",
                self.in_channels()
            );
        }
        plan.check_inputs(inputs.len())?;
        let bias = self.bias.as_ref().map(|b| b.values());
        let (out, agg) = forward_kernel(
            inputs.features().values(),
            c,
            self.weights.values(),
            self.out_channels(),
            bias,
            plan,
        );
        let out = Tensor::new(vec![plan.outputs(), self.out_channels()], out)?;
        let saved = SavedForward {
            plan: Some(Arc::new(plan.clone())),
            agg,
            in_channels: c,
        };
        Ok((out, saved))
    }

    pub fn backward(&self, grad_out: &Tensor, saved: Option<&SavedForward>) -> Result<Gradients> {
        let Some(saved) = saved else {
            bail!(
                Contract,
                "interpconv backward called without a saved forward pass"
            );
        };
        let Some(plan) = saved.plan.as_deref() else {
            bail!(Contract, "saved forward pass has no neighbor plan");
        };
        let cout = self.out_channels();
        if grad_out.shape() != [plan.outputs(), cout] {
            bail!(
                Dimension,
                "grad_out shape {:?}, expected [{}, {cout}]",
                grad_out.shape(),
                plan.outputs()
            );
        }
        let g = grad_out.values();
        let c = saved.in_channels;
        let s = plan.sites();
        let grad_weights = weight_grad(g, &saved.agg, plan, cout, c);
        let grad_features = feature_grad(g, self.weights.values(), plan, cout, c);
        let grad_bias = self.bias.as_ref().map(|_| bias_grad(g, cout));
        Ok(Gradients {
            grad_features: Tensor::new(vec![plan.inputs(), c], grad_features)?,
            grad_weights: Tensor::new(vec![cout, s, c], grad_weights)?,
            grad_bias: grad_bias.map(Tensor::from_vec),
        })
    }
}

/// Values kept from a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct SavedForward {
    pub plan: Option<Arc<NeighborPlan>>,
    /// Normalized per-site aggregates, `[M, n³, c]`.
    pub agg: Vec<Float>,
    pub in_channels: usize,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub grad_features: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Option<Tensor>,
}

fn check_weight_shapes(
    layout: &KernelLayout,
    weights: &Tensor,
    bias: Option<&Tensor>,
) -> Result<()> {
    let ws = weights.shape();
    if ws.len() != 3 || ws[1] != layout.sites() {
        bail!(
            Dimension,
            "weights must be [c', {}, c], got {:?}",
            layout.sites(),
            ws
        );
    }
    if let Some(b) = bias {
        if b.numel() != ws[0] {
            bail!(
                Dimension,
                "bias has {} values for {} kernels",
                b.numel(),
                ws[0]
            );
        }
    }
    Ok(())
}

/// Interpolation entries for every (output point, site) pair, in CSR form,
/// plus the reverse map from input points back to pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborPlan {
    outputs: usize,
    sites: usize,
    inputs: usize,
    /// `offsets[m * sites + s]..offsets[m * sites + s + 1]` indexes `entries`.
    offsets: Vec<u32>,
    /// (input index, interpolation weight), ascending by input index per pair.
    entries: Vec<(u32, f64)>,
    denominators: Vec<f64>,
    rev_offsets: Vec<u32>,
    /// (pair index, weight / denominator), ascending by pair per input.
    rev_entries: Vec<(u32, Float)>,
}

impl NeighborPlan {
    /// Plans one cloud. `index` must be built over `inputs` with a cell size
    /// of at least `layout.reach()`.
    pub fn build(
        inputs: &[Point3],
        outputs: &[Point3],
        layout: &KernelLayout,
        index: &SpatialIndex,
    ) -> Result<Self> {
        let reach = layout.reach();
        if index.cell_size() < reach {
            bail!(
                Contract,
                "index cell size {} is below the kernel reach {reach}",
                index.cell_size()
            );
        }
        if index.len() != inputs.len() {
            bail!(
                Contract,
                "index covers {} points, inputs have {}",
                index.len(),
                inputs.len()
            );
        }
        let sites = layout.sites();
        // Per output point: (site, input, weight) sorted by site, inputs ascending.
        let per_output: Vec<Result<Vec<(u32, u32, f64)>>> = par::map_indices(outputs.len(), |m| {
            let centre = outputs[m];
            let mut neigh = Vec::new();
            index.radius_query_into(centre, reach, &mut neigh)?;
            let mut found = Vec::new();
            for &(i, _) in &neigh {
                let p_delta = sub(inputs[i], centre);
                layout.for_each_weight(p_delta, |s, w| found.push((s as u32, i as u32, w)));
            }
            found.sort_by_key(|e| e.0);
            Ok(found)
        });
        let mut offsets = Vec::with_capacity(outputs.len() * sites + 1);
        let mut entries = Vec::new();
        let mut denominators = Vec::with_capacity(outputs.len() * sites);
        offsets.push(0u32);
        let mut weights_buf = Vec::new();
        for found in per_output {
            let found = found?;
            let mut cursor = 0;
            for s in 0..sites as u32 {
                weights_buf.clear();
                while cursor < found.len() && found[cursor].0 == s {
                    let (_, i, w) = found[cursor];
                    entries.push((i, w));
                    weights_buf.push(w);
                    cursor += 1;
                }
                denominators.push(layout.denominator(&weights_buf));
                offsets.push(entries.len() as u32);
            }
        }
        Ok(Self::finish(
            outputs.len(),
            sites,
            inputs.len(),
            offsets,
            entries,
            denominators,
        ))
    }

    /// Same plan as [`Self::build`], found with one query per site over the
    /// site's own support ball. `index` must have a cell size of at least
    /// [`Self::site_query_radius`]. Cheaper when the supports are small
    /// next to the lattice spacing.
    pub fn build_by_site(
        inputs: &[Point3],
        outputs: &[Point3],
        layout: &KernelLayout,
        index: &SpatialIndex,
    ) -> Result<Self> {
        let radius = Self::site_query_radius(layout);
        if index.cell_size() < radius {
            bail!(
                Contract,
                "index cell size {} is below the site query radius {radius}",
                index.cell_size()
            );
        }
        if index.len() != inputs.len() {
            bail!(
                Contract,
                "index covers {} points, inputs have {}",
                index.len(),
                inputs.len()
            );
        }
        let sites = layout.sites();
        let coords = layout.coords();
        // Per output point: entries over all sites in order, plus the
        // (end offset, denominator) of every site.
        type Found = (Vec<(u32, f64)>, Vec<(u32, f64)>);
        let per_output: Vec<Result<Found>> = par::map_indices(outputs.len(), |m| {
            let centre = outputs[m];
            let mut neigh = Vec::new();
            let mut found = Vec::new();
            let mut ends = Vec::with_capacity(sites);
            let mut weights = Vec::new();
            for &q in coords {
                index.radius_query_into(add(centre, q), radius, &mut neigh)?;
                weights.clear();
                for &(i, _) in &neigh {
                    let w = layout.weight(sub(inputs[i], centre), q);
                    if w > 0.0 {
                        found.push((i as u32, w));
                        weights.push(w);
                    }
                }
                ends.push((found.len() as u32, layout.denominator(&weights)));
            }
            Ok((found, ends))
        });
        let mut offsets = Vec::with_capacity(outputs.len() * sites + 1);
        let mut entries = Vec::new();
        let mut denominators = Vec::with_capacity(outputs.len() * sites);
        offsets.push(0u32);
        for r in per_output {
            let (found, ends) = r?;
            let base = entries.len() as u32;
            entries.extend_from_slice(&found);
            for (end, den) in ends {
                offsets.push(base + end);
                denominators.push(den);
            }
        }
        Ok(Self::finish(
            outputs.len(),
            sites,
            inputs.len(),
            offsets,
            entries,
            denominators,
        ))
    }

    /// Query radius around each site used by [`Self::build_by_site`]: the
    /// site reach padded so rounding in the shifted centre cannot drop a
    /// point the weight function would keep.
    pub fn site_query_radius(layout: &KernelLayout) -> f64 {
        layout.site_reach() * (1.0 + 1e-9) + 1e-12
    }

    /// Builds the spatial index itself and picks the cheaper of the two
    /// search strategies. Both give the same plan up to rounding.
    pub fn for_cloud(inputs: &[Point3], outputs: &[Point3], layout: &KernelLayout) -> Result<Self> {
        if inputs.is_empty() {
            return Ok(Self::empty(outputs.len(), layout.sites()));
        }
        let site_r = Self::site_query_radius(layout);
        if 16.0 * (layout.sites() as f64) * site_r.powi(3) < layout.reach().powi(3) {
            let index = SpatialIndex::from_coords(inputs, site_r)?;
            Self::build_by_site(inputs, outputs, layout, &index)
        } else {
            let index = SpatialIndex::from_coords(inputs, layout.reach())?;
            Self::build(inputs, outputs, layout, &index)
        }
    }

    fn empty(outputs: usize, sites: usize) -> Self {
        Self::finish(
            outputs,
            sites,
            0,
            vec![0; outputs * sites + 1],
            Vec::new(),
            vec![0.0; outputs * sites],
        )
    }

    fn finish(
        outputs: usize,
        sites: usize,
        inputs: usize,
        offsets: Vec<u32>,
        entries: Vec<(u32, f64)>,
        denominators: Vec<f64>,
    ) -> Self {
        let mut counts = vec![0u32; inputs + 1];
        for &(i, _) in &entries {
            counts[i as usize + 1] += 1;
        }
        for i in 0..inputs {
            counts[i + 1] += counts[i];
        }
        let rev_offsets = counts.clone();
        let mut fill = counts;
        let mut rev_entries = vec![(0u32, 0.0 as Float); entries.len()];
        for pair in 0..outputs * sites {
            let inv = if denominators[pair] > 0.0 {
                1.0 / denominators[pair]
            } else {
                0.0
            };
            for &(i, w) in &entries[offsets[pair] as usize..offsets[pair + 1] as usize] {
                let slot = &mut fill[i as usize];
                rev_entries[*slot as usize] = (pair as u32, (w * inv) as Float);
                *slot += 1;
            }
        }
        NeighborPlan {
            outputs,
            sites,
            inputs,
            offsets,
            entries,
            denominators,
            rev_offsets,
            rev_entries,
        }
    }

    /// Stacks per-cloud plans into one batch plan over concatenated inputs
    /// and outputs. No neighbors cross cloud boundaries.
    pub fn concat(plans: &[NeighborPlan]) -> Result<Self> {
        let Some(first) = plans.first() else {
            return Ok(Self::default());
        };
        let sites = first.sites;
        let mut offsets = vec![0u32];
        let mut entries = Vec::new();
        let mut denominators = Vec::new();
        let (mut outputs, mut inputs) = (0, 0);
        for p in plans {
            if p.sites != sites {
                bail!(
                    Contract,
                    "cannot stack plans with {} and {sites} sites",
                    p.sites
                );
            }
            let base = entries.len() as u32;
            entries.extend(p.entries.iter().map(|&(i, w)| (i + inputs as u32, w)));
            offsets.extend(p.offsets[1..].iter().map(|o| o + base));
            denominators.extend_from_slice(&p.denominators);
            outputs += p.outputs;
            inputs += p.inputs;
        }
        Ok(Self::finish(
            outputs,
            sites,
            inputs,
            offsets,
            entries,
            denominators,
        ))
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    /// Entries of one (output, site) pair.
    pub fn pair(&self, m: usize, s: usize) -> &[(u32, f64)] {
        let p = m * self.sites + s;
        &self.entries[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }

    pub fn denominator(&self, m: usize, s: usize) -> f64 {
        self.denominators[m * self.sites + s]
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Approximate heap footprint in bytes.
    pub fn heap_bytes(&self) -> usize {
        use std::mem::size_of_val;
        size_of_val(&self.offsets[..])
            + size_of_val(&self.entries[..])
            + size_of_val(&self.denominators[..])
            + size_of_val(&self.rev_offsets[..])
            + size_of_val(&self.rev_entries[..])
    }

    /// Pairs with at least one entry.
    pub fn nonempty_pairs(&self) -> usize {
        self.offsets.windows(2).filter(|w| w[1] > w[0]).count()
    }

    fn check_inputs(&self, n: usize) -> Result<()> {
        if n != self.inputs {
            bail!(Contract, "plan built for {} inputs, got {n}", self.inputs);
        }
        Ok(())
    }
}

// ---- kernels -------------------------------------------------------------------

fn forward_kernel(
    features: &[Float],
    c: usize,
    weights: &[Float],
    cout: usize,
    bias: Option<&[Float]>,
    plan: &NeighborPlan,
) -> (Vec<Float>, Vec<Float>) {
    let (m_count, s_count) = (plan.outputs, plan.sites);
    let mut out = vec![0.0; m_count * cout];
    let mut agg = vec![0.0; m_count * s_count * c];
    if c == 0 {
        if let Some(b) = bias {
            out.chunks_mut(cout).for_each(|r| r.copy_from_slice(b));
        }
        return (out, agg);
    }
    par::for_each_row(&mut agg, s_count * c, |m, agg_row| {
        for s in 0..s_count {
            let pair = m * s_count + s;
            let (lo, hi) = (plan.offsets[pair] as usize, plan.offsets[pair + 1] as usize);
            if lo == hi {
                continue;
            }
            let dst = &mut agg_row[s * c..(s + 1) * c];
            for &(i, w) in &plan.entries[lo..hi] {
                let i = i as usize;
                axpy(w as Float, &features[i * c..(i + 1) * c], dst);
            }
            let inv = (1.0 / plan.denominators[pair]) as Float;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
    });
    par::for_each_row(&mut out, cout, |m, out_row| {
        if let Some(b) = bias {
            out_row.copy_from_slice(b);
        }
        for s in 0..s_count {
            let pair = m * s_count + s;
            if plan.offsets[pair] == plan.offsets[pair + 1] {
                continue;
            }
            let a = &agg[pair * c..(pair + 1) * c];
            for (k, o) in out_row.iter_mut().enumerate() {
                let w = &weights[(k * s_count + s) * c..(k * s_count + s + 1) * c];
                *o += dot(a, w);
            }
        }
    });
    (out, agg)
}

fn weight_grad(
    g: &[Float],
    agg: &[Float],
    plan: &NeighborPlan,
    cout: usize,
    c: usize,
) -> Vec<Float> {
    let s_count = plan.sites;
    let mut gw = vec![0.0; cout * s_count * c];
    if c == 0 {
        return gw;
    }
    par::for_each_row(&mut gw, s_count * c, |k, row| {
        for m in 0..plan.outputs {
            let gk = g[m * cout + k];
            if gk == 0.0 {
                continue;
            }
            for s in 0..s_count {
                let pair = m * s_count + s;
                if plan.offsets[pair] == plan.offsets[pair + 1] {
                    continue;
                }
                axpy(
                    gk,
                    &agg[pair * c..(pair + 1) * c],
                    &mut row[s * c..(s + 1) * c],
                );
            }
        }
    });
    gw
}

fn feature_grad(
    g: &[Float],
    weights: &[Float],
    plan: &NeighborPlan,
    cout: usize,
    c: usize,
) -> Vec<Float> {
    let s_count = plan.sites;
    // Gradient w.r.t. each nonempty normalized aggregate.
    let mut gagg = vec![0.0; plan.outputs * s_count * c];
    if c == 0 {
        return Vec::new();
    }
    par::for_each_row(&mut gagg, s_count * c, |m, row| {
        for s in 0..s_count {
            let pair = m * s_count + s;
            if plan.offsets[pair] == plan.offsets[pair + 1] {
                continue;
            }
            let dst = &mut row[s * c..(s + 1) * c];
            for k in 0..cout {
                let gk = g[m * cout + k];
                if gk != 0.0 {
                    axpy(
                        gk,
                        &weights[(k * s_count + s) * c..(k * s_count + s + 1) * c],
                        dst,
                    );
                }
            }
        }
    });
    let mut gf = vec![0.0; plan.inputs * c];
    par::for_each_row(&mut gf, c, |i, row| {
        let (lo, hi) = (
            plan.rev_offsets[i] as usize,
            plan.rev_offsets[i + 1] as usize,
        );
        for &(pair, coeff) in &plan.rev_entries[lo..hi] {
            let pair = pair as usize;
            axpy(coeff, &gagg[pair * c..(pair + 1) * c], row);
        }
    });
    gf
}

fn bias_grad(g: &[Float], cout: usize) -> Vec<Float> {
    let mut gb = vec![0.0; cout];
    for row in g.chunks(cout) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    gb
}

// ---- tape integration ------------------------------------------------------------

struct InterpConvRule {
    plan: Arc<NeighborPlan>,
    agg: Vec<Float>,
    c: usize,
    cout: usize,
}

impl BackwardRule for InterpConvRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[Float],
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>> {
        let mut grads = vec![
            needs[0].then(|| feature_grad(g, inputs[1].values(), &self.plan, self.cout, self.c)),
            needs[1].then(|| weight_grad(g, &self.agg, &self.plan, self.cout, self.c)),
        ];
        if inputs.len() == 3 {
            grads.push(needs[2].then(|| bias_grad(g, self.cout)));
        }
        grads
    }
}

/// Records an interpolated convolution on the tape. `features` is `[N, c]`,
/// `weights` `[c′, n³, c]`, `bias` `[c′]`.
pub fn interp_conv(
    tape: &mut Tape,
    features: Var,
    weights: Var,
    bias: Option<Var>,
    plan: Arc<NeighborPlan>,
) -> Result<Var> {
    let (tf, tw) = (tape.value(features), tape.value(weights));
    let ws = tw.shape();
    if ws.len() != 3 || ws[1] != plan.sites {
        bail!(
            Dimension,
            "weights {:?} do not match {} sites",
            ws,
            plan.sites
        );
    }
    let (cout, c) = (ws[0], ws[2]);
    if tf.rank() != 2 || tf.shape()[1] != c || tf.rows() != plan.inputs {
        bail!(
            Dimension,
            "features {:?} do not match plan inputs {} with {c} channels",
            tf.shape(),
            plan.inputs
        );
    }
    let tb = bias.map(|b| tape.value(b));
    if let Some(tb) = tb {
        if tb.numel() != cout {
            bail!(
                Dimension,
                "bias has {} values for {cout} kernels",
                tb.numel()
            );
        }
    }
    let (out, agg) = forward_kernel(
        tf.values(),
        c,
        tw.values(),
        cout,
        tb.map(|b| b.values()),
        &plan,
    );
    let out = Tensor::new(vec![plan.outputs, cout], out)?;
    let mut inputs = vec![features, weights];
    inputs.extend(bias);
    Ok(tape.push_op(
        out,
        &inputs,
        Box::new(InterpConvRule { plan, agg, c, cout }),
    ))
}

// ---- dense reference -------------------------------------------------------------

/// Standard zero-padded 3D convolution over a `[D, D, D, c]` volume with
/// `[c′, n³, c]` weights laid out like the kernel lattice:
/// `out(p̂) = Σ_{p′} F(p̂ + p′) · W(p′)`.
pub fn dense_grid_conv_oracle(grid: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let gs = grid.shape();
    let ws = weights.shape();
    if gs.len() != 4 || gs[0] != gs[1] || gs[1] != gs[2] {
        bail!(Dimension, "grid must be [D, D, D, c], got {gs:?}");
    }
    let (d, c) = (gs[0], gs[3]);
    let n = (ws.get(1).copied().unwrap_or(0) as f64).cbrt().round() as usize;
    if ws.len() != 3 || n * n * n != ws[1] || ws[2] != c || n.is_multiple_of(2) {
        bail!(Dimension, "weights {ws:?} incompatible with grid {gs:?}");
    }
    if n > d {
        bail!(Dimension, "kernel size {n} exceeds grid size {d}");
    }
    let cout = ws[0];
    let h = (n as i64 - 1) / 2;
    let g = grid.values();
    let w = weights.values();
    let mut out = vec![0.0; d * d * d * cout];
    let vox = |x: i64, y: i64, z: i64| ((x as usize * d + y as usize) * d + z as usize) * c;
    for x in 0..d as i64 {
        for y in 0..d as i64 {
            for z in 0..d as i64 {
                let o = ((x as usize * d + y as usize) * d + z as usize) * cout;
                let mut site = 0;
                for kx in -h..=h {
                    for ky in -h..=h {
                        for kz in -h..=h {
                            let (px, py, pz) = (x + kx, y + ky, z + kz);
                            let inside = (0..d as i64).contains(&px)
                                && (0..d as i64).contains(&py)
                                && (0..d as i64).contains(&pz);
                            if inside {
                                let f = &g[vox(px, py, pz)..vox(px, py, pz) + c];
                                for k in 0..cout {
                                    let wk = &w[(k * n * n * n + site) * c..][..c];
                                    out[o + k] += dot(f, wk);
                                }
                            }
                            site += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d, d, d, cout], out)
}

#[cfg(test)]
mod tests;
