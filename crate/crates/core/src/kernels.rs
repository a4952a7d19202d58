//! Kernel functions, Gram assembly and bandwidth heuristics.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{sample_pixels_with, PixelMatrix};

/// Row count above which pairwise-distance heuristics use a random subset.
pub const HEURISTIC_MAX_ROWS: usize = 2000;
const HEURISTIC_SEED: u64 = 0x5eed_d157;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
    Sam,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Linear => "linear",
            KernelKind::Rbf => "rbf",
            KernelKind::Sam => "sam",
        }
    }

    /// The distance whose scale `sigma` is measured in.
    pub fn metric(self) -> DistanceMetric {
        match self {
            KernelKind::Sam => DistanceMetric::Angle,
            _ => DistanceMetric::Euclidean,
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "rbf" => Ok(KernelKind::Rbf),
            "sam" => Ok(KernelKind::Sam),
            other => Err(Error::invalid(format!("unknown kernel '{other}'"))),
        }
    }
}

/// A kernel and its lengthscale. `sigma` is ignored by the linear kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub sigma: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, sigma: f64) -> Result<Self> {
        if kind != KernelKind::Linear && !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "{} kernel needs a positive finite sigma, got {sigma}",
                kind.name()
            )));
        }
        Ok(Self { kind, sigma })
    }

    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            sigma: 1.0,
        }
    }

    pub fn rbf(sigma: f64) -> Result<Self> {
        Self::new(KernelKind::Rbf, sigma)
    }

    pub fn sam(sigma: f64) -> Result<Self> {
        Self::new(KernelKind::Sam, sigma)
    }

    pub fn with_sigma(self, sigma: f64) -> Result<Self> {
        Self::new(self.kind, sigma)
    }

    /// `k(a, b)`. Panics if the lengths differ.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len(), "kernel arguments differ in length");
        match self.kind {
            KernelKind::Linear => dot(a, b),
            KernelKind::Rbf => {
                let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                gaussian(sq / (2.0 * self.sigma * self.sigma))
            }
            KernelKind::Sam => {
                let angle = spectral_angle(a, b);
                gaussian(angle * angle / (2.0 * self.sigma * self.sigma))
            }
        }
    }

    fn unit_diagonal(&self) -> bool {
        self.kind != KernelKind::Linear
    }
}

/// Below this a Gaussian kernel value is stored as zero. Such values are
/// negligible next to the unit diagonal, and keeping them lets products of
/// two of them fall into the subnormal range, which is very slow on common
/// hardware.
const KERNEL_FLOOR: f64 = 1e-150;

/// `exp(−e)` for `e ≥ 0`, flushed to zero below [`KERNEL_FLOOR`].
fn gaussian(e: f64) -> f64 {
    let v = (-e).exp();
    if v < KERNEL_FLOOR {
        0.0
    } else {
        v
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Angle between two spectra, in radians.
///
/// Two zero vectors are treated as collinear; a single zero vector as
/// orthogonal to everything.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let cos = match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => dot(a, b) / (na * nb),
    };
    cos.clamp(-1.0, 1.0).acos()
}

pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(spec.eval(a, b))
}

/// `K[i][j] = k(row_i, row_j)`.
pub fn gram(rows: &PixelMatrix, spec: &KernelSpec) -> DMatrix<f64> {
    let n = rows.n();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        let ri = rows.row(i);
        k[(i, i)] = if spec.unit_diagonal() {
            1.0
        } else {
            spec.eval(ri, ri)
        };
        for j in 0..i {
            let v = spec.eval(ri, rows.row(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Kernel values between every training row and `v`.
pub fn cross_row(train: &PixelMatrix, v: &[f64], spec: &KernelSpec) -> Result<Vec<f64>> {
    if v.len() != train.d() {
        return Err(Error::DimensionMismatch {
            expected: train.d(),
            got: v.len(),
        });
    }
    Ok(train.rows().map(|r| spec.eval(r, v)).collect())
}

/// `n_train x m` matrix whose column `j` is `cross_row(train, query_j)`.
pub fn cross_gram(
    train: &PixelMatrix,
    queries: &PixelMatrix,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    if queries.d() != train.d() {
        return Err(Error::DimensionMismatch {
            expected: train.d(),
            got: queries.d(),
        });
    }
    let mut k = DMatrix::zeros(train.n(), queries.n());
    for (j, q) in queries.rows().enumerate() {
        for (i, r) in train.rows().enumerate() {
            k[(i, j)] = spec.eval(r, q);
        }
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeuristicMethod {
    Mean,
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    Euclidean,
    /// Spectral angle in radians.
    Angle,
}

impl DistanceMetric {
    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            DistanceMetric::Angle => spectral_angle(a, b),
        }
    }
}

/// All `i < j` pairwise distances, on at most [`HEURISTIC_MAX_ROWS`] rows.
pub fn pairwise_distances(rows: &PixelMatrix, metric: DistanceMetric) -> Result<Vec<f64>> {
    if rows.n() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: rows.n(),
        });
    }
    let subset;
    let rows = if rows.n() > HEURISTIC_MAX_ROWS {
        let mut rng = ChaCha8Rng::seed_from_u64(HEURISTIC_SEED);
        let mut idx = sample_pixels_with(&mut rng, rows.n(), HEURISTIC_MAX_ROWS)?;
        idx.sort_unstable();
        subset = rows.select_rows(&idx);
        &subset
    } else {
        rows
    };
    let n = rows.n();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(metric.distance(rows.row(i), rows.row(j)));
        }
    }
    if out.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroDispersion);
    }
    Ok(out)
}

/// Mean or median pairwise Euclidean distance.
pub fn sigma_heuristic(rows: &PixelMatrix, method: HeuristicMethod) -> Result<f64> {
    sigma_heuristic_with(rows, method, DistanceMetric::Euclidean)
}

pub fn sigma_heuristic_with(
    rows: &PixelMatrix,
    method: HeuristicMethod,
    metric: DistanceMetric,
) -> Result<f64> {
    let mut dist = pairwise_distances(rows, metric)?;
    Ok(match method {
        HeuristicMethod::Mean => dist.iter().sum::<f64>() / dist.len() as f64,
        HeuristicMethod::Median => {
            dist.sort_unstable_by(f64::total_cmp);
            let m = dist.len();
            if m % 2 == 1 {
                dist[m / 2]
            } else {
                0.5 * (dist[m / 2 - 1] + dist[m / 2])
            }
        }
    })
}

/// `count` bandwidths at percentiles evenly spaced over `[lo, hi]` of the
/// pairwise distances. Zero and repeated values are dropped.
pub fn percentile_sigma_grid(
    rows: &PixelMatrix,
    metric: DistanceMetric,
    lo: f64,
    hi: f64,
    count: usize,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) || count == 0 {
        return Err(Error::invalid(
            "percentile range must satisfy 0 <= lo <= hi <= 1",
        ));
    }
    let mut dist = pairwise_distances(rows, metric)?;
    dist.sort_unstable_by(f64::total_cmp);
    let last = (dist.len() - 1) as f64;
    let mut grid: Vec<f64> = (0..count)
        .map(|i| {
            let p = if count == 1 {
                lo
            } else {
                lo + (hi - lo) * i as f64 / (count - 1) as f64
            };
            let pos = p * last;
            let below = pos.floor() as usize;
            let above = pos.ceil() as usize;
            let t = pos - below as f64;
            dist[below] * (1.0 - t) + dist[above] * t
        })
        .filter(|v| *v > 0.0)
        .collect();
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::ZeroDispersion);
    }
    Ok(grid)
}
