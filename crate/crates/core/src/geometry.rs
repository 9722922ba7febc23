//! Point sets, a uniform-grid spatial index and farthest-point sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Float, Tensor};

/// Position in model units. Always 64-bit.
pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Coordinates plus one feature row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    coords: Vec<Point3>,
    features: Tensor,
}

impl PointSet {
    pub fn new(coords: Vec<Point3>, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.rows() != coords.len() {
            bail!(
                Dimension,
                "{} points but features have shape {:?}",
                coords.len(),
                features.shape()
            );
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            bail!(
                Input,
                "point {i} has a non-finite coordinate {:?}",
                coords[i]
            );
        }
        Ok(PointSet { coords, features })
    }

    /// Points without feature channels.
    pub fn from_coords(coords: Vec<Point3>) -> Result<Self> {
        let n = coords.len();
        Self::new(coords, Tensor::zeros(&[n, 0]))
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_row(&self, i: usize) -> &[Float] {
        self.features.row(i)
    }

    pub fn into_parts(self) -> (Vec<Point3>, Tensor) {
        (self.coords, self.features)
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> PointSet {
        let c = self.channels();
        let mut feats = Vec::with_capacity(indices.len() * c);
        let coords = indices
            .iter()
            .map(|&i| {
                feats.extend_from_slice(self.feature_row(i));
                self.coords[i]
            })
            .collect();
        PointSet {
            coords,
            features: Tensor::new(vec![indices.len(), c], feats).expect("consistent"),
        }
    }
}

/// Centres the cloud on its centroid and scales so the farthest point sits
/// at radius 1. Coincident points are only centred.
pub fn normalize_cloud(points: &PointSet) -> Result<PointSet> {
    if points.is_empty() {
        bail!(Input, "cannot normalize an empty cloud");
    }
    let coords = normalize_coords(points.coords());
    PointSet::new(coords, points.features().clone())
}

pub fn normalize_coords(coords: &[Point3]) -> Vec<Point3> {
    let n = coords.len() as f64;
    let mut c = [0.0; 3];
    for p in coords {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.iter_mut().for_each(|v| *v /= n);
    let centred: Vec<Point3> = coords.iter().map(|&p| sub(p, c)).collect();
    let r = centred.iter().map(|&p| norm(p)).fold(0.0, f64::max);
    if r > 0.0 {
        centred
            .into_iter()
            .map(|p| [p[0] / r, p[1] / r, p[2] / r])
            .collect()
    } else {
        centred
    }
}

/// Integer cell coordinate of the grid.
pub type CellKey = [i64; 3];

/// Uniform-grid hash over a fixed set of points for fixed-radius queries.
///
/// Buckets are kept as a key-sorted table. When the occupied bounding box
/// spans few enough cells, a dense table over it makes lookups O(1);
/// otherwise they are a binary search.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    cell_size: f64,
    coords: Vec<Point3>,
    cells: Vec<(CellKey, u32, u32)>,
    order: Vec<u32>,
    dense: Option<DenseCells>,
}

/// Bucket bounds for every cell of a box: cell `c` covers
/// `order[starts[c]..starts[c + 1]]`.
#[derive(Clone, Debug)]
struct DenseCells {
    origin: CellKey,
    dims: [i64; 3],
    starts: Vec<u32>,
}

impl DenseCells {
    fn new(cells: &[(CellKey, u32, u32)], points: usize) -> Option<Self> {
        let (first, _, _) = *cells.first()?;
        let (mut lo, mut hi) = (first, first);
        for &(k, _, _) in cells {
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
        }
        let dims = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let total = dims.iter().try_fold(1i64, |acc, &d| acc.checked_mul(d))?;
        if total > 64 * points as i64 + 4096 {
            return None;
        }
        let mut grid = DenseCells {
            origin: lo,
            dims,
            starts: vec![0; total as usize + 1],
        };
        for &(k, s, e) in cells {
            let c = grid.slot(k).expect("cell inside its own bounding box");
            grid.starts[c] = s;
            grid.starts[c + 1] = e;
        }
        // Empty cells inherit the end of the previous occupied one.
        for c in 1..grid.starts.len() {
            grid.starts[c] = grid.starts[c].max(grid.starts[c - 1]);
        }
        Some(grid)
    }

    #[inline]
    fn slot(&self, k: CellKey) -> Option<usize> {
        let mut c = 0i64;
        for ((&k, &o), &d) in k.iter().zip(&self.origin).zip(&self.dims) {
            let r = k - o;
            if r < 0 || r >= d {
                return None;
            }
            c = c * d + r;
        }
        Some(c as usize)
    }
}

impl SpatialIndex {
    pub fn build(points: &PointSet, cell_size: f64) -> Result<Self> {
        Self::from_coords(points.coords(), cell_size)
    }

    pub fn from_coords(coords: &[Point3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            bail!(Input, "cell size must be positive, got {cell_size}");
        }
        if coords.is_empty() {
            bail!(Input, "cannot index an empty point set");
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            bail!(
                Input,
                "point {i} has a non-finite coordinate {:?}",
                coords[i]
            );
        }
        let mut keyed: Vec<(CellKey, u32)> = coords
            .iter()
            .enumerate()
            .map(|(i, &p)| (cell_of(p, cell_size), i as u32))
            .collect();
        keyed.sort_unstable();
        let mut cells = Vec::new();
        let mut start = 0;
        for i in 1..=keyed.len() {
            if i == keyed.len() || keyed[i].0 != keyed[start].0 {
                cells.push((keyed[start].0, start as u32, i as u32));
                start = i;
            }
        }
        let dense = DenseCells::new(&cells, coords.len());
        Ok(SpatialIndex {
            cell_size,
            coords: coords.to_vec(),
            cells,
            order: keyed.into_iter().map(|(_, i)| i).collect(),
            dense,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn bucket_count(&self) -> usize {
        self.cells.len()
    }

    /// Every bucket as (key, point indices).
    pub fn buckets(&self) -> impl Iterator<Item = (CellKey, &[u32])> {
        self.cells
            .iter()
            .map(|&(k, s, e)| (k, &self.order[s as usize..e as usize]))
    }

    pub fn bucket(&self, key: CellKey) -> &[u32] {
        if let Some(d) = &self.dense {
            return match d.slot(key) {
                Some(c) => &self.order[d.starts[c] as usize..d.starts[c + 1] as usize],
                None => &[],
            };
        }
        match self.cells.binary_search_by(|c| c.0.cmp(&key)) {
            Ok(pos) => {
                let (_, s, e) = self.cells[pos];
                &self.order[s as usize..e as usize]
            }
            Err(_) => &[],
        }
    }

    /// Points within `radius` of `center` (inclusive), ascending by index,
    /// each with `offset = point - center`.
    pub fn radius_query(&self, center: Point3, radius: f64) -> Result<Vec<(usize, Point3)>> {
        let mut out = Vec::new();
        self.radius_query_into(center, radius, &mut out)?;
        Ok(out)
    }

    pub fn radius_query_into(
        &self,
        center: Point3,
        radius: f64,
        out: &mut Vec<(usize, Point3)>,
    ) -> Result<()> {
        if !(radius > 0.0) {
            bail!(Contract, "query radius must be positive, got {radius}");
        }
        if radius > self.cell_size {
            bail!(
                Contract,
                "query radius {radius} exceeds index cell size {}",
                self.cell_size
            );
        }
        out.clear();
        let r2 = radius * radius;
        // With radius <= cell size the ball overlaps at most two cells per axis.
        let lo = cell_of(sub(center, [radius; 3]), self.cell_size);
        let hi = cell_of(add(center, [radius; 3]), self.cell_size);
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    for &i in self.bucket([x, y, z]) {
                        let p = self.coords[i as usize];
                        let off = sub(p, center);
                        if off[0] * off[0] + off[1] * off[1] + off[2] * off[2] <= r2 {
                            out.push((i as usize, off));
                        }
                    }
                }
            }
        }
        out.sort_unstable_by_key(|e| e.0);
        Ok(())
    }
}

#[inline]
fn cell_of(p: Point3, cell: f64) -> CellKey {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

/// How the first farthest-point pick is made.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpsStart {
    /// Uniformly drawn index.
    SeededIndex,
    /// Point extremal along a seeded random direction. Unlike an index draw
    /// this does not depend on input order.
    SeededDirection,
}

/// Greedy farthest-point sampling with a seeded-index first pick.
pub fn farthest_point_sample(points: &PointSet, m: usize, seed: u64) -> Result<Vec<usize>> {
    fps(points.coords(), m, seed, FpsStart::SeededIndex)
}

pub fn fps(coords: &[Point3], m: usize, seed: u64, start: FpsStart) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        bail!(Input, "cannot sample {m} of {n} points");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = match start {
        FpsStart::SeededIndex => rng.random_range(0..n),
        FpsStart::SeededDirection => {
            let u = random_unit(&mut rng);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, p) in coords.iter().enumerate() {
                let v = p[0] * u[0] + p[1] * u[1] + p[2] * u[2];
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        }
    };
    Ok(fps_from(coords, m, first))
}

/// Greedy max-min selection from a given first index. Ties go to the lowest
/// index; already chosen points are never re-picked.
pub fn fps_from(coords: &[Point3], m: usize, first: usize) -> Vec<usize> {
    let n = coords.len();
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = Vec::with_capacity(m);
    let mut cur = first;
    for _ in 0..m {
        chosen.push(cur);
        min_d[cur] = f64::NEG_INFINITY;
        let c = coords[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if min_d[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = dist2(coords[i], c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        cur = best;
    }
    chosen
}

/// Uniform random subset of size `m`, in ascending index order.
pub fn random_sample(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        bail!(Input, "cannot sample {m} of {n} points");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

fn random_unit(rng: &mut impl Rng) -> Point3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let r = norm(v);
        if r > 1e-3 && r <= 1.0 {
            return [v[0] / r, v[1] / r, v[2] / r];
        }
    }
}
