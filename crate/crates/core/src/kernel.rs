//! Kernel-weight lattice, interpolation weights and per-site normalization.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::Point3;
use crate::tensor::Float;

/// Gaussian bandwidth used by the classification recipe: `3σ = 0.1`.
pub const DEFAULT_SIGMA: f64 = 0.1 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpKind {
    Trilinear,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide the weighted sum by the number of points in the site's support.
    ByCount,
    /// Divide the weighted sum by the sum of interpolation weights.
    ByWeightSum,
}

/// Deliberately broken kernel variants used to prove the invariant checks
/// are not vacuous.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mutation {
    #[default]
    None,
    DenominatorOffByOne,
    UntruncatedGaussian,
}

/// Serializable kernel hyperparameters. Lattice coordinates are always
/// rebuilt from these, never stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub n: usize,
    pub l: f64,
    pub interpolation: InterpKind,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    pub normalization: Normalization,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

impl KernelSpec {
    pub fn gaussian(n: usize, l: f64, sigma: f64, normalization: Normalization) -> Self {
        KernelSpec {
            n,
            l,
            interpolation: InterpKind::Gaussian,
            sigma,
            normalization,
        }
    }

    pub fn trilinear(n: usize, l: f64, normalization: Normalization) -> Self {
        KernelSpec {
            n,
            l,
            interpolation: InterpKind::Trilinear,
            sigma: DEFAULT_SIGMA,
            normalization,
        }
    }
}

/// Cubic lattice of `n³` kernel-weight coordinates with spacing `l`,
/// ordered lexicographically with x slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelLayout {
    spec: KernelSpec,
    coords: Vec<Point3>,
    support_radius: f64,
    mutation: Mutation,
}

impl KernelLayout {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        let KernelSpec { n, l, sigma, .. } = spec;
        if n == 0 || n % 2 == 0 {
            bail!(Config, "kernel size must be odd and positive, got {n}");
        }
        if !(l > 0.0 && l.is_finite()) {
            bail!(Config, "kernel length must be positive, got {l}");
        }
        if spec.interpolation == InterpKind::Gaussian && !(sigma > 0.0 && sigma.is_finite()) {
            bail!(Config, "gaussian sigma must be positive, got {sigma}");
        }
        let h = (n as i64 - 1) / 2;
        let mut coords = Vec::with_capacity(n * n * n);
        for kx in -h..=h {
            for ky in -h..=h {
                for kz in -h..=h {
                    coords.push([kx as f64 * l, ky as f64 * l, kz as f64 * l]);
                }
            }
        }
        let support_radius = match spec.interpolation {
            InterpKind::Trilinear => l,
            InterpKind::Gaussian => 3.0 * sigma,
        };
        Ok(KernelLayout {
            spec,
            coords,
            support_radius,
            mutation: Mutation::None,
        })
    }

    #[doc(hidden)]
    pub fn with_mutation(mut self, mutation: Mutation) -> Self {
        self.mutation = mutation;
        self
    }

    #[doc(hidden)]
    pub fn mutation(&self) -> Mutation {
        self.mutation
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.spec.n
    }

    pub fn l(&self) -> f64 {
        self.spec.l
    }

    pub fn interpolation(&self) -> InterpKind {
        self.spec.interpolation
    }

    pub fn sigma(&self) -> f64 {
        self.spec.sigma
    }

    pub fn normalization(&self) -> Normalization {
        self.spec.normalization
    }

    pub fn coords(&self) -> &[Point3] {
        &self.coords
    }

    pub fn sites(&self) -> usize {
        self.coords.len()
    }

    /// Trilinear: per-axis half-width `l` of a site's support cube.
    /// Gaussian: the `3σ` cutoff.
    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// Radius of the smallest ball around a site that contains its whole
    /// support. For trilinear the support is a cube, so this is `l·√3`.
    pub fn site_reach(&self) -> f64 {
        match self.spec.interpolation {
            InterpKind::Trilinear => self.spec.l * 3f64.sqrt(),
            InterpKind::Gaussian => self.support_radius,
        }
    }

    /// Ball radius around the kernel centre holding every point that can
    /// receive a nonzero weight from any site.
    pub fn reach(&self) -> f64 {
        let h = (self.spec.n - 1) as f64 / 2.0;
        h * self.spec.l * 3f64.sqrt() + self.site_reach()
    }

    /// Interpolation weight of an input at relative position `p_delta`
    /// towards the site at `p_prime`.
    #[inline]
    pub fn weight(&self, p_delta: Point3, p_prime: Point3) -> f64 {
        match self.spec.interpolation {
            InterpKind::Trilinear => trilinear_weight(p_delta, p_prime, self.spec.l),
            InterpKind::Gaussian if self.mutation == Mutation::UntruncatedGaussian => {
                let d2 = crate::geometry::dist2(p_delta, p_prime);
                (-d2 / (2.0 * self.spec.sigma * self.spec.sigma)).exp()
            }
            InterpKind::Gaussian => gaussian_weight(p_delta, p_prime, self.spec.sigma),
        }
    }

    /// Calls `f(site, weight)` for every site giving `p_delta` a nonzero
    /// weight, in ascending site order. Same values as [`Self::weight`], but
    /// built from per-axis factors so each exponential is evaluated once per
    /// axis and lattice offset.
    pub fn for_each_weight(&self, p_delta: Point3, mut f: impl FnMut(usize, f64)) {
        let [rx, ry, rz] = self.candidate_sites(p_delta);
        if rx.0 > rx.1 || ry.0 > ry.1 || rz.0 > rz.1 {
            return;
        }
        let l = self.spec.l;
        let n = self.spec.n;
        let h = (n as i64 - 1) / 2;
        if n > MAX_FACTORED_N {
            for kx in rx.0..=rx.1 {
                for ky in ry.0..=ry.1 {
                    for kz in rz.0..=rz.1 {
                        let s = self.site_index([kx, ky, kz]);
                        let w = self.weight(p_delta, self.coords[s]);
                        if w > 0.0 {
                            f(s, w);
                        }
                    }
                }
            }
            return;
        }
        let sigma = self.spec.sigma;
        let axis = |x: f64, (lo, hi): (i64, i64)| {
            let mut out = AxisFactors::default();
            for k in lo..=hi {
                let d = x - k as f64 * l;
                let factor = match self.spec.interpolation {
                    InterpKind::Trilinear => 1.0 - d.abs() / l,
                    InterpKind::Gaussian => (-d * d / (2.0 * sigma * sigma)).exp(),
                };
                if factor > 0.0 {
                    out.items[out.len] = (k, d * d, factor);
                    out.len += 1;
                }
            }
            out
        };
        let (ax, ay, az) = (
            axis(p_delta[0], rx),
            axis(p_delta[1], ry),
            axis(p_delta[2], rz),
        );
        let cut2 = match (self.spec.interpolation, self.mutation) {
            (InterpKind::Gaussian, Mutation::UntruncatedGaussian) | (InterpKind::Trilinear, _) => {
                f64::INFINITY
            }
            (InterpKind::Gaussian, _) => self.support_radius * self.support_radius,
        };
        let n = n as i64;
        for &(kx, dx, fx) in ax.as_slice() {
            for &(ky, dy, fy) in ay.as_slice() {
                for &(kz, dz, fz) in az.as_slice() {
                    if dx + dy + dz > cut2 {
                        continue;
                    }
                    let w = fx * fy * fz;
                    if w > 0.0 {
                        f((((kx + h) * n + (ky + h)) * n + (kz + h)) as usize, w);
                    }
                }
            }
        }
    }

    /// Normalization denominator for one site given its nonzero weights.
    /// Zero when the site is empty.
    pub fn denominator(&self, weights: &[f64]) -> f64 {
        if weights.is_empty() {
            return 0.0;
        }
        let base = match self.spec.normalization {
            Normalization::ByCount => weights.len() as f64,
            Normalization::ByWeightSum => weights.iter().sum(),
        };
        match self.mutation {
            Mutation::DenominatorOffByOne => base + 1.0,
            _ => base,
        }
    }

    /// Lattice index of the site with integer offsets `k` in `-h..=h`.
    #[inline]
    pub fn site_index(&self, k: [i64; 3]) -> usize {
        let n = self.spec.n as i64;
        let h = (n - 1) / 2;
        (((k[0] + h) * n + (k[1] + h)) * n + (k[2] + h)) as usize
    }

    /// Inclusive per-axis lattice ranges containing every site that may give
    /// `p_delta` a nonzero weight. Empty when a range is inverted.
    pub fn candidate_sites(&self, p_delta: Point3) -> [(i64, i64); 3] {
        let h = (self.spec.n as i64 - 1) / 2;
        let l = self.spec.l;
        let r = self.support_radius;
        p_delta.map(|x| {
            let lo = ((x - r) / l).floor() as i64;
            let hi = ((x + r) / l).ceil() as i64;
            (lo.max(-h), hi.min(h))
        })
    }
}

const MAX_FACTORED_N: usize = 9;

/// Per-axis (lattice offset, squared distance, factor) triples.
#[derive(Default)]
struct AxisFactors {
    items: [(i64, f64, f64); MAX_FACTORED_N],
    len: usize,
}

impl AxisFactors {
    fn as_slice(&self) -> &[(i64, f64, f64)] {
        &self.items[..self.len]
    }
}

/// `∏ max(0, 1 − |Δ|/l)` over the three axes.
#[inline]
pub fn trilinear_weight(p_delta: Point3, p_prime: Point3, l: f64) -> f64 {
    let mut w = 1.0;
    for a in 0..3 {
        let t = 1.0 - (p_delta[a] - p_prime[a]).abs() / l;
        if t <= 0.0 {
            return 0.0;
        }
        w *= t;
    }
    w
}

/// `exp(−d²/2σ²)`, exactly zero beyond `3σ`.
#[inline]
pub fn gaussian_weight(p_delta: Point3, p_prime: Point3, sigma: f64) -> f64 {
    let d2 = crate::geometry::dist2(p_delta, p_prime);
    let cut = 3.0 * sigma;
    if d2 > cut * cut {
        return 0.0;
    }
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Normalized weighted sum of feature rows assigned to one site. An empty
/// site, or one whose weights sum to zero, yields the zero vector.
pub fn aggregate_normalized(
    weights: &[Float],
    features: &[&[Float]],
    normalization: Normalization,
) -> Result<Vec<Float>> {
    if weights.len() != features.len() {
        bail!(
            Contract,
            "{} weights for {} feature rows",
            weights.len(),
            features.len()
        );
    }
    let Some(first) = features.first() else {
        return Ok(Vec::new());
    };
    let c = first.len();
    let mut acc = vec![0.0; c];
    for (&t, f) in weights.iter().zip(features) {
        if f.len() != c {
            bail!(Contract, "feature rows of width {} and {c}", f.len());
        }
        acc.iter_mut().zip(f.iter()).for_each(|(a, &x)| *a += t * x);
    }
    let denom: Float = match normalization {
        Normalization::ByCount => weights.len() as Float,
        Normalization::ByWeightSum => weights.iter().sum(),
    };
    if denom == 0.0 {
        acc.iter_mut().for_each(|a| *a = 0.0);
    } else {
        acc.iter_mut().for_each(|a| *a /= denom);
    }
    Ok(acc)
}
