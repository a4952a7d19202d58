//! The anomalous change detector family.
//!
//! A detector scores a co-registered pixel pair `(x, y)` by comparing how
//! anomalous the stacked pixel `z = [x, y]` is against how anomalous each
//! marginal is on its own:
//!
//! * Gaussian: `ξ(z) − βx ξ(x) − βy ξ(y)`
//! * Elliptically contoured (Student-t with shape `ν`):
//!   `(dx+dy+ν) ln(1+ξ(z)/ν) − βx (dx+ν) ln(1+ξ(x)/ν) − βy (dy+ν) ln(1+ξ(y)/ν)`
//!
//! where `ξ` is a squared Mahalanobis distance (linear mode) or its kernel
//! counterpart `k (KK + λI)⁻¹ kᵀ` (kernel mode). The `(βx, βy)` flags pick
//! the member: RX `(0,0)`, chronochrome y|x `(0,1)`, chronochrome x|y `(1,0)`
//! and hyperbolic ACD `(1,1)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cross_gram, gram, KernelSpec};
use crate::linalg::{covariance, spd_factorize, SpdFactor, DEFAULT_RIDGE_SCALE};
use crate::raster::{stack_pair, BandStats, PixelMatrix};

/// Pixels per scoring block. Fixed so results never depend on thread count.
const SCORE_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "rx")]
    Rx,
    /// Chronochrome y|x, `(βx, βy) = (0, 1)`.
    #[serde(rename = "yx")]
    ChronochromeYx,
    /// Chronochrome x|y, `(βx, βy) = (1, 0)`.
    #[serde(rename = "xy")]
    ChronochromeXy,
    #[serde(rename = "hacd")]
    Hacd,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [
        DetectorKind::Rx,
        DetectorKind::ChronochromeYx,
        DetectorKind::ChronochromeXy,
        DetectorKind::Hacd,
    ];

    /// `(βx, βy)`.
    pub fn betas(self) -> (bool, bool) {
        match self {
            DetectorKind::Rx => (false, false),
            DetectorKind::ChronochromeYx => (false, true),
            DetectorKind::ChronochromeXy => (true, false),
            DetectorKind::Hacd => (true, true),
        }
    }

    pub fn from_betas(beta_x: bool, beta_y: bool) -> Self {
        match (beta_x, beta_y) {
            (false, false) => DetectorKind::Rx,
            (false, true) => DetectorKind::ChronochromeYx,
            (true, false) => DetectorKind::ChronochromeXy,
            (true, true) => DetectorKind::Hacd,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Rx => "rx",
            DetectorKind::ChronochromeYx => "yx",
            DetectorKind::ChronochromeXy => "xy",
            DetectorKind::Hacd => "hacd",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown detector '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Distribution {
    Gaussian,
    /// Multivariate Student-t with shape `nu`.
    Ec {
        nu: f64,
    },
}

/// Kernel ridge `λ`. `Auto` resolves to `1e-5 / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lambda {
    Auto,
    Value(f64),
}

impl Lambda {
    pub fn resolve(self, n: usize) -> f64 {
        match self {
            Lambda::Auto => 1e-5 / n as f64,
            Lambda::Value(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Mode {
    Linear,
    Kernel { kernel: KernelSpec, lambda: Lambda },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub detector: DetectorKind,
    pub distribution: Distribution,
    pub mode: Mode,
}

impl DetectorConfig {
    pub fn new(detector: DetectorKind, distribution: Distribution, mode: Mode) -> Self {
        Self {
            detector,
            distribution,
            mode,
        }
    }

    pub fn linear(detector: DetectorKind, distribution: Distribution) -> Self {
        Self::new(detector, distribution, Mode::Linear)
    }

    pub fn kernel(
        detector: DetectorKind,
        distribution: Distribution,
        kernel: KernelSpec,
        lambda: Lambda,
    ) -> Self {
        Self::new(detector, distribution, Mode::Kernel { kernel, lambda })
    }

    pub fn is_kernel(&self) -> bool {
        matches!(self.mode, Mode::Kernel { .. })
    }

    pub fn is_ec(&self) -> bool {
        matches!(self.distribution, Distribution::Ec { .. })
    }

    /// Short human-readable name, e.g. `K-EC-hacd`.
    pub fn label(&self) -> String {
        format!(
            "{}{}{}",
            if self.is_kernel() { "K-" } else { "" },
            if self.is_ec() { "EC-" } else { "" },
            self.detector
        )
    }

    pub fn validate(&self) -> Result<()> {
        if let Distribution::Ec { nu } = self.distribution {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::invalid(format!("nu must be positive, got {nu}")));
            }
        }
        if let Mode::Kernel { kernel, lambda } = self.mode {
            KernelSpec::new(kernel.kind, kernel.sigma)?;
            if let Lambda::Value(v) = lambda {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!("lambda must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn with_nu(mut self, nu: f64) -> Self {
        if let Distribution::Ec { nu: n } = &mut self.distribution {
            *n = nu;
        }
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        if let Mode::Kernel { kernel, .. } = &mut self.mode {
            kernel.sigma = sigma;
        }
        self
    }

    pub fn with_lambda(mut self, value: f64) -> Self {
        if let Mode::Kernel { lambda, .. } = &mut self.mode {
            *lambda = Lambda::Value(value);
        }
        self
    }
}

/// Mean and covariance factor of one term.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTerm {
    mean: Vec<f64>,
    factor: SpdFactor,
}

impl LinearTerm {
    pub fn fit(train: &PixelMatrix, ridge_scale: f64) -> Result<Self> {
        let mean = train.column_means();
        let c = covariance(train, &mean)?;
        let factor = spd_factorize(&c, ridge_scale)?;
        Ok(Self { mean, factor })
    }

    pub fn from_parts(mean: Vec<f64>, factor: SpdFactor) -> Result<Self> {
        if mean.len() != factor.dim() {
            return Err(Error::DimensionMismatch {
                expected: factor.dim(),
                got: mean.len(),
            });
        }
        Ok(Self { mean, factor })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn xi(&self, v: &[f64]) -> Result<f64> {
        crate::linalg::mahalanobis(&self.factor, &self.mean, v)
    }

    fn xi_block(&self, rows: &PixelMatrix) -> Vec<f64> {
        let mut b = DMatrix::from_fn(self.dim(), rows.n(), |i, j| rows.row(j)[i] - self.mean[i]);
        self.factor.quad_form_columns(&mut b)
    }
}

/// Training samples and the factor of `KK + λI` for one term.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTerm {
    train: PixelMatrix,
    spec: KernelSpec,
    lambda: f64,
    solve_factor: SpdFactor,
    /// `L⁻¹` of `solve_factor`, derived on construction.
    inverse: DMatrix<f64>,
}

impl KernelTerm {
    pub fn fit(train: PixelMatrix, spec: KernelSpec, lambda: f64) -> Result<Self> {
        let k = gram(&train, &spec);
        Self::from_gram(train, spec, &k, lambda)
    }

    /// Fit from a precomputed Gram matrix of `train`.
    pub fn from_gram(
        train: PixelMatrix,
        spec: KernelSpec,
        k: &DMatrix<f64>,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be nonnegative, got {lambda}"
            )));
        }
        if k.nrows() != train.n() || k.ncols() != train.n() {
            return Err(Error::DimensionMismatch {
                expected: train.n(),
                got: k.nrows(),
            });
        }
        let mut kk = k * k;
        crate::linalg::symmetrize(&mut kk);
        for i in 0..kk.nrows() {
            kk[(i, i)] += lambda;
        }
        let solve_factor = spd_factorize(&kk, 0.0)?;
        Self::from_parts(train, spec, lambda, solve_factor)
    }

    pub fn from_parts(
        train: PixelMatrix,
        spec: KernelSpec,
        lambda: f64,
        solve_factor: SpdFactor,
    ) -> Result<Self> {
        if solve_factor.dim() != train.n() {
            return Err(Error::DimensionMismatch {
                expected: train.n(),
                got: solve_factor.dim(),
            });
        }
        let inverse = solve_factor.inverse_l();
        Ok(Self {
            train,
            spec,
            lambda,
            solve_factor,
            inverse,
        })
    }

    pub fn train(&self) -> &PixelMatrix {
        &self.train
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn solve_factor(&self) -> &SpdFactor {
        &self.solve_factor
    }

    pub fn dim(&self) -> usize {
        self.train.d()
    }

    /// `k (KK + λI)⁻¹ kᵀ` with `k` the kernel row of `v` against the training set.
    pub fn xi(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(self.xi_block(&PixelMatrix::new(1, v.len(), v.to_vec())?)[0])
    }

    /// `‖L⁻¹k‖²` per row, with one matrix product for the whole block.
    fn xi_block(&self, rows: &PixelMatrix) -> Vec<f64> {
        let kc = cross_gram(&self.train, rows, &self.spec).expect("dimension checked");
        (&self.inverse * kc)
            .column_iter()
            .map(|c| c.norm_squared().max(0.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Linear(LinearTerm),
    Kernel(KernelTerm),
}

impl Term {
    pub fn dim(&self) -> usize {
        match self {
            Term::Linear(t) => t.dim(),
            Term::Kernel(t) => t.dim(),
        }
    }

    pub fn xi(&self, v: &[f64]) -> Result<f64> {
        match self {
            Term::Linear(t) => t.xi(v),
            Term::Kernel(t) => t.xi(v),
        }
    }

    /// `ξ` for every row, evaluated in fixed-size blocks in parallel.
    pub fn xi_batch(&self, rows: &PixelMatrix) -> Result<Vec<f64>> {
        if rows.d() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: rows.d(),
            });
        }
        let starts: Vec<usize> = (0..rows.n()).step_by(SCORE_BLOCK).collect();
        let blocks: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let block = rows.row_block(s, (s + SCORE_BLOCK).min(rows.n()));
                match self {
                    Term::Linear(t) => t.xi_block(&block),
                    Term::Kernel(t) => t.xi_block(&block),
                }
            })
            .collect();
        Ok(blocks.concat())
    }
}

/// Per-pixel `ξ` values of the joint and marginal terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Xi {
    pub z: f64,
    pub x: f64,
    pub y: f64,
}

/// `ξz − βx ξx − βy ξy`.
pub fn score_gaussian(xi: Xi, beta_x: bool, beta_y: bool) -> f64 {
    let mut s = xi.z;
    if beta_x {
        s -= xi.x;
    }
    if beta_y {
        s -= xi.y;
    }
    s
}

/// Student-t log-density ratio with per-term degrees of freedom `dx + dy`,
/// `dx` and `dy`.
pub fn score_ec(xi: Xi, beta_x: bool, beta_y: bool, nu: f64, d_x: usize, d_y: usize) -> f64 {
    let term = |dim: usize, v: f64| (dim as f64 + nu) * (v / nu).ln_1p();
    let mut s = term(d_x + d_y, xi.z);
    if beta_x {
        s -= term(d_x, xi.x);
    }
    if beta_y {
        s -= term(d_y, xi.y);
    }
    s
}

/// Combine `ξ` triples into scores for one detector/distribution choice.
pub fn combine(
    xis: &[Xi],
    detector: DetectorKind,
    distribution: Distribution,
    d_x: usize,
    d_y: usize,
) -> Vec<f64> {
    let (bx, by) = detector.betas();
    match distribution {
        Distribution::Gaussian => xis.iter().map(|&xi| score_gaussian(xi, bx, by)).collect(),
        Distribution::Ec { nu } => xis
            .iter()
            .map(|&xi| score_ec(xi, bx, by, nu, d_x, d_y))
            .collect(),
    }
}

/// Knobs that are not part of the detector configuration proper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Relative ridge for linear-mode covariance factors.
    pub ridge_scale: f64,
    /// Per-term kernel bandwidths `[x, y, z]`, overriding the shared sigma.
    pub term_sigmas: Option<[f64; 3]>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            ridge_scale: DEFAULT_RIDGE_SCALE,
            term_sigmas: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedDetector {
    config: DetectorConfig,
    band_stats_x: BandStats,
    band_stats_y: BandStats,
    x: Term,
    y: Term,
    z: Term,
}

impl FittedDetector {
    pub fn from_parts(
        config: DetectorConfig,
        band_stats_x: BandStats,
        band_stats_y: BandStats,
        x: Term,
        y: Term,
        z: Term,
    ) -> Result<Self> {
        config.validate()?;
        let (dx, dy) = (band_stats_x.dim(), band_stats_y.dim());
        for (term, expected) in [(&x, dx), (&y, dy), (&z, dx + dy)] {
            if term.dim() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: term.dim(),
                });
            }
            if matches!(term, Term::Kernel(_)) != config.is_kernel() {
                return Err(Error::invalid("term kind does not match detector mode"));
            }
        }
        Ok(Self {
            config,
            band_stats_x,
            band_stats_y,
            x,
            y,
            z,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn band_stats_x(&self) -> &BandStats {
        &self.band_stats_x
    }

    pub fn band_stats_y(&self) -> &BandStats {
        &self.band_stats_y
    }

    pub fn d_x(&self) -> usize {
        self.band_stats_x.dim()
    }

    pub fn d_y(&self) -> usize {
        self.band_stats_y.dim()
    }

    /// Terms in `(x, y, z)` order.
    pub fn terms(&self) -> [&Term; 3] {
        [&self.x, &self.y, &self.z]
    }

    /// Same fitted terms under a different detector/distribution choice.
    pub fn with_scoring(&self, detector: DetectorKind, distribution: Distribution) -> Self {
        let mut out = self.clone();
        out.config.detector = detector;
        out.config.distribution = distribution;
        out
    }

    /// Standardize a pair of pixel sets and evaluate the three `ξ` terms.
    pub fn xi_values(&self, x: &PixelMatrix, y: &PixelMatrix) -> Result<Vec<Xi>> {
        if x.n() != y.n() {
            return Err(Error::UnalignedPair {
                left: x.n(),
                right: y.n(),
            });
        }
        let xs = self.band_stats_x.apply(x)?;
        let ys = self.band_stats_y.apply(y)?;
        let zs = stack_pair(&xs, &ys)?;
        let (bx, by) = self.config.detector.betas();
        // Marginal terms that carry a zero weight are not evaluated.
        let xi_x = if bx {
            self.x.xi_batch(&xs)?
        } else {
            vec![0.0; x.n()]
        };
        let xi_y = if by {
            self.y.xi_batch(&ys)?
        } else {
            vec![0.0; x.n()]
        };
        let xi_z = self.z.xi_batch(&zs)?;
        Ok(xi_z
            .into_iter()
            .zip(xi_x)
            .zip(xi_y)
            .map(|((z, x), y)| Xi { z, x, y })
            .collect())
    }

    /// Like [`xi_values`](Self::xi_values) but always evaluates every term.
    pub fn xi_values_all(&self, x: &PixelMatrix, y: &PixelMatrix) -> Result<Vec<Xi>> {
        let full = self.with_scoring(DetectorKind::Hacd, self.config.distribution);
        full.xi_values(x, y)
    }

    pub fn combine(&self, xis: &[Xi]) -> Vec<f64> {
        combine(
            xis,
            self.config.detector,
            self.config.distribution,
            self.d_x(),
            self.d_y(),
        )
    }

    /// Per-pixel anomalousness; larger is more anomalous.
    pub fn score_pixels(&self, x: &PixelMatrix, y: &PixelMatrix) -> Result<Vec<f64>> {
        Ok(self.combine(&self.xi_values(x, y)?))
    }
}

pub fn fit(
    x_train: &PixelMatrix,
    y_train: &PixelMatrix,
    config: &DetectorConfig,
) -> Result<FittedDetector> {
    fit_with(x_train, y_train, config, &FitOptions::default())
}

pub fn fit_with(
    x_train: &PixelMatrix,
    y_train: &PixelMatrix,
    config: &DetectorConfig,
    options: &FitOptions,
) -> Result<FittedDetector> {
    config.validate()?;
    if x_train.n() != y_train.n() {
        return Err(Error::UnalignedPair {
            left: x_train.n(),
            right: y_train.n(),
        });
    }
    let n = x_train.n();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let band_stats_x = BandStats::fit(x_train)?;
    let band_stats_y = BandStats::fit(y_train)?;
    let xs = band_stats_x.apply(x_train)?;
    let ys = band_stats_y.apply(y_train)?;
    let zs = stack_pair(&xs, &ys)?;

    let (x, y, z) = match config.mode {
        Mode::Linear => (
            Term::Linear(LinearTerm::fit(&xs, options.ridge_scale)?),
            Term::Linear(LinearTerm::fit(&ys, options.ridge_scale)?),
            Term::Linear(LinearTerm::fit(&zs, options.ridge_scale)?),
        ),
        Mode::Kernel { kernel, lambda } => {
            let lambda = lambda.resolve(n);
            let sigmas = options
                .term_sigmas
                .unwrap_or([kernel.sigma, kernel.sigma, kernel.sigma]);
            let spec = |s: f64| kernel.with_sigma(s);
            (
                Term::Kernel(KernelTerm::fit(xs, spec(sigmas[0])?, lambda)?),
                Term::Kernel(KernelTerm::fit(ys, spec(sigmas[1])?, lambda)?),
                Term::Kernel(KernelTerm::fit(zs, spec(sigmas[2])?, lambda)?),
            )
        }
    };
    FittedDetector::from_parts(*config, band_stats_x, band_stats_y, x, y, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution as _, StandardNormal};

    fn random_rows(n: usize, d: usize, seed: u64) -> PixelMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        PixelMatrix::new(n, d, data).unwrap()
    }

    /// `y = x + small noise`, the typical pervasive-change pair.
    fn pair(n: usize, d: usize, seed: u64) -> (PixelMatrix, PixelMatrix) {
        let x = random_rows(n, d, seed);
        let noise = random_rows(n, d, seed + 1000);
        let y: Vec<f64> = x
            .as_slice()
            .iter()
            .zip(noise.as_slice())
            .map(|(a, e)| 0.8 * a + 0.3 * e)
            .collect();
        (x, PixelMatrix::new(n, d, y).unwrap())
    }

    #[test]
    fn detector_names_and_betas() {
        assert_eq!(DetectorKind::Rx.betas(), (false, false));
        assert_eq!("yx".parse::<DetectorKind>().unwrap().betas(), (false, true));
        assert_eq!("xy".parse::<DetectorKind>().unwrap().betas(), (true, false));
        assert_eq!(
            "hacd".parse::<DetectorKind>().unwrap().betas(),
            (true, true)
        );
        assert!("foo".parse::<DetectorKind>().is_err());
        for k in DetectorKind::ALL {
            let (bx, by) = k.betas();
            assert_eq!(DetectorKind::from_betas(bx, by), k);
        }
    }

    #[test]
    fn gaussian_score_arithmetic() {
        let xi = Xi {
            z: 5.0,
            x: 2.0,
            y: 1.0,
        };
        assert_eq!(score_gaussian(xi, false, false), 5.0);
        assert_eq!(score_gaussian(xi, true, true), 2.0);
        let xi = Xi {
            z: 3.0,
            x: 0.0,
            y: 3.0,
        };
        assert_eq!(score_gaussian(xi, false, true), 0.0);
    }

    #[test]
    fn ec_score_zero_and_monotone() {
        let zero = Xi {
            z: 0.0,
            x: 0.0,
            y: 0.0,
        };
        assert_eq!(score_ec(zero, true, true, 3.0, 4, 4), 0.0);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..100 {
            let xi = Xi {
                z: i as f64 * 0.37,
                x: 9.0,
                y: 9.0,
            };
            let s = score_ec(xi, false, false, 2.5, 3, 3);
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn ec_approaches_gaussian_for_large_nu() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let xi = Xi {
                z: 20.0 * rand::Rng::random::<f64>(&mut rng),
                x: 5.0 * rand::Rng::random::<f64>(&mut rng),
                y: 5.0 * rand::Rng::random::<f64>(&mut rng),
            };
            for (bx, by) in [(false, false), (true, false), (false, true), (true, true)] {
                let g = score_gaussian(xi, bx, by);
                let ec = score_ec(xi, bx, by, 1e10, 4, 4);
                // ln(1+t) series: (d+ν)(t − t²/2) with t = ξ/ν differs from ξ
                // by O((d+ξ)ξ/ν), far below 1e-4 of any score here.
                let bound = 1e-4 * g.abs().max(1e-3);
                assert!((g - ec).abs() <= bound, "{g} vs {ec}");
            }
        }
    }

    #[test]
    fn linear_fit_dimensions() {
        let (x, y) = pair(100, 2, 1);
        let det = fit(
            &x,
            &y,
            &DetectorConfig::linear(DetectorKind::Rx, Distribution::Gaussian),
        )
        .unwrap();
        let [tx, ty, tz] = det.terms();
        assert_eq!((tx.dim(), ty.dim(), tz.dim()), (2, 2, 4));
    }

    #[test]
    fn kernel_fit_dimensions() {
        let (x, y) = pair(50, 3, 2);
        let cfg = DetectorConfig::kernel(
            DetectorKind::Hacd,
            Distribution::Gaussian,
            KernelSpec::rbf(1.0).unwrap(),
            Lambda::Auto,
        );
        let det = fit(&x, &y, &cfg).unwrap();
        for t in det.terms() {
            match t {
                Term::Kernel(k) => {
                    assert_eq!(k.solve_factor().dim(), 50);
                    assert_eq!(k.lambda(), 1e-5 / 50.0);
                }
                Term::Linear(_) => panic!("expected kernel term"),
            }
        }
    }

    #[test]
    fn fit_rejects_unaligned_and_bad_config() {
        let x = random_rows(20, 2, 3);
        let y = random_rows(19, 2, 4);
        let cfg = DetectorConfig::linear(DetectorKind::Rx, Distribution::Gaussian);
        assert!(matches!(
            fit(&x, &y, &cfg),
            Err(Error::UnalignedPair { .. })
        ));
        let bad = DetectorConfig::linear(DetectorKind::Rx, Distribution::Ec { nu: 0.0 });
        assert!(fit(&x, &x, &bad).is_err());
    }

    #[test]
    fn linear_fit_recovers_covariance() {
        let n = 5000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // x ~ N(0, diag(4, 1)) so standardization is a known rescaling
        let mut xd = Vec::with_capacity(n * 2);
        let mut yd = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            xd.extend_from_slice(&[2.0 * a, b]);
            yd.extend_from_slice(&[a + 0.5 * e, b]);
        }
        let x = PixelMatrix::new(n, 2, xd).unwrap();
        let y = PixelMatrix::new(n, 2, yd).unwrap();
        let det = fit(
            &x,
            &y,
            &DetectorConfig::linear(DetectorKind::Hacd, Distribution::Gaussian),
        )
        .unwrap();
        let Term::Linear(z) = det.terms()[2] else {
            panic!()
        };
        let c = z.factor().reconstruct();
        // standardized truth: corr(x0, y0) = 1/sqrt(1.25), corr(x1, y1) = 1
        let r = 1.0 / 1.25f64.sqrt();
        let truth = [
            [1.0, 0.0, r, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [r, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((c[(i, j)] - truth[i][j]).abs() < 0.1);
            }
        }
    }

    #[test]
    fn linear_xi_cases() {
        let m =
            PixelMatrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]).unwrap();
        let t = LinearTerm::fit(&m, 0.0).unwrap();
        // covariance is diag(0.5, 0.5)
        assert_eq!(t.xi(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((t.xi(&[1.0, 1.0]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(t.xi(t.mean()).unwrap(), 0.0);
    }

    #[test]
    fn linear_xi_matches_explicit_inverse() {
        let m = random_rows(200, 4, 6);
        let t = LinearTerm::fit(&m, 0.0).unwrap();
        let mean = m.column_means();
        let c = covariance(&m, &mean).unwrap();
        let inv = c.try_inverse().unwrap();
        for v in random_rows(30, 4, 7).rows() {
            let diff = nalgebra::DVector::from_iterator(4, v.iter().zip(&mean).map(|(a, b)| a - b));
            let oracle = (diff.transpose() * &inv * &diff)[(0, 0)];
            let xi = t.xi(v).unwrap();
            assert!((xi - oracle).abs() <= 1e-9 * oracle.max(1e-12));
        }
    }

    #[test]
    fn kernel_xi_reduces_to_linear_form() {
        // raw, uncentered data with the linear kernel: ξ^H = vᵀ(XᵀX)⁻¹v
        let x = random_rows(200, 5, 8);
        let t = KernelTerm::fit(x.clone(), KernelSpec::linear(), 1e-10).unwrap();
        let xm = DMatrix::from_row_slice(200, 5, x.as_slice());
        let inv = (xm.transpose() * &xm).try_inverse().unwrap();
        for v in random_rows(20, 5, 9).rows() {
            let vv = nalgebra::DVector::from_column_slice(v);
            let oracle = (vv.transpose() * &inv * &vv)[(0, 0)];
            let xi = t.xi(v).unwrap();
            assert!((xi - oracle).abs() / oracle < 1e-4, "{xi} vs {oracle}");
        }
    }

    #[test]
    fn kernel_xi_on_training_rows_matches_dense_oracle() {
        let x = random_rows(40, 3, 10);
        let spec = KernelSpec::rbf(1.2).unwrap();
        for lambda in [1e-6, 1e-2, 1.0] {
            let t = KernelTerm::fit(x.clone(), spec, lambda).unwrap();
            let k = gram(&x, &spec);
            let m = (&k * &k + DMatrix::identity(40, 40) * lambda)
                .try_inverse()
                .unwrap();
            let dense = &k * m * &k;
            for i in 0..40 {
                let xi = t.xi(x.row(i)).unwrap();
                assert!((xi - dense[(i, i)]).abs() < 1e-6 * dense[(i, i)].max(1.0));
                assert!(xi <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn xi_nonnegative_on_random_inputs() {
        let (x, y) = pair(60, 3, 11);
        for kind in [KernelKind::Linear, KernelKind::Rbf, KernelKind::Sam] {
            let cfg = DetectorConfig::kernel(
                DetectorKind::Hacd,
                Distribution::Gaussian,
                KernelSpec::new(kind, 0.7).unwrap(),
                Lambda::Value(1e-8),
            );
            let det = fit(&x, &y, &cfg).unwrap();
            let (qx, qy) = pair(100, 3, 12);
            for xi in det.xi_values(&qx, &qy).unwrap() {
                assert!(xi.x >= 0.0 && xi.y >= 0.0 && xi.z >= 0.0);
            }
        }
    }

    #[test]
    fn batch_matches_single_evaluation() {
        let (x, y) = pair(80, 3, 13);
        let cfg = DetectorConfig::kernel(
            DetectorKind::Hacd,
            Distribution::Gaussian,
            KernelSpec::rbf(1.5).unwrap(),
            Lambda::Auto,
        );
        let det = fit(&x, &y, &cfg).unwrap();
        let (qx, qy) = pair(300, 3, 14);
        let xis = det.xi_values(&qx, &qy).unwrap();
        let xs = det.band_stats_x().apply(&qx).unwrap();
        let ys = det.band_stats_y().apply(&qy).unwrap();
        let zs = stack_pair(&xs, &ys).unwrap();
        let [tx, ty, tz] = det.terms();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        for (i, xi) in xis.iter().enumerate() {
            assert!(close(xi.x, tx.xi(xs.row(i)).unwrap()));
            assert!(close(xi.y, ty.xi(ys.row(i)).unwrap()));
            assert!(close(xi.z, tz.xi(zs.row(i)).unwrap()));
        }
    }

    #[test]
    fn training_rx_mean_is_dimension() {
        let (x, y) = pair(500, 3, 15);
        let det = fit(
            &x,
            &y,
            &DetectorConfig::linear(DetectorKind::Rx, Distribution::Gaussian),
        )
        .unwrap();
        let s = det.score_pixels(&x, &y).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        // with 1/n covariance the training average is exactly trace(I) = 6
        assert!((mean - 6.0).abs() < 1e-6, "{mean}");
    }

    #[test]
    fn scoring_is_pointwise() {
        let (x, y) = pair(120, 2, 16);
        let cfg = DetectorConfig::kernel(
            DetectorKind::ChronochromeXy,
            Distribution::Ec { nu: 3.0 },
            KernelSpec::sam(0.5).unwrap(),
            Lambda::Auto,
        );
        let det = fit(&x, &y, &cfg).unwrap();
        let (qx, qy) = pair(600, 2, 17);
        let base = det.score_pixels(&qx, &qy).unwrap();
        let again = det.score_pixels(&qx, &qy).unwrap();
        assert_eq!(base, again);
        let perm: Vec<usize> = (0..600).rev().collect();
        let permuted = det
            .score_pixels(&qx.select_rows(&perm), &qy.select_rows(&perm))
            .unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(permuted[i].to_bits(), base[p].to_bits());
        }
    }

    #[test]
    fn scoring_checks_band_counts() {
        let (x, y) = pair(50, 2, 18);
        let det = fit(
            &x,
            &y,
            &DetectorConfig::linear(DetectorKind::Hacd, Distribution::Gaussian),
        )
        .unwrap();
        let wrong = random_rows(10, 3, 19);
        let ok = random_rows(10, 2, 20);
        assert!(det.score_pixels(&wrong, &ok).is_err());
        assert!(det.score_pixels(&ok, &wrong).is_err());
    }

    #[test]
    fn unequal_band_counts_are_supported() {
        let x = random_rows(200, 3, 21);
        let y = random_rows(200, 5, 22);
        let cfg = DetectorConfig::linear(DetectorKind::Hacd, Distribution::Ec { nu: 2.0 });
        let det = fit(&x, &y, &cfg).unwrap();
        assert_eq!((det.d_x(), det.d_y()), (3, 5));
        assert_eq!(det.terms()[2].dim(), 8);
        assert_eq!(det.score_pixels(&x, &y).unwrap().len(), 200);
    }

    #[test]
    fn joint_scaling_keeps_rankings() {
        let (x, y) = pair(300, 3, 23);
        let cfg = DetectorConfig::linear(DetectorKind::Hacd, Distribution::Gaussian);
        let base = fit(&x, &y, &cfg).unwrap().score_pixels(&x, &y).unwrap();
        let (xs, ys) = (x.scale(40.0), y.scale(40.0));
        let scaled = fit(&xs, &ys, &cfg).unwrap().score_pixels(&xs, &ys).unwrap();
        let order = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
            idx
        };
        assert_eq!(order(&base), order(&scaled));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = DetectorConfig::kernel(
            DetectorKind::ChronochromeYx,
            Distribution::Ec { nu: 0.1 + 0.2 },
            KernelSpec::sam(0.123456789).unwrap(),
            Lambda::Value(1e-7),
        );
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<DetectorConfig>(&text).unwrap(), cfg);
        let auto = DetectorConfig::kernel(
            DetectorKind::Rx,
            Distribution::Gaussian,
            KernelSpec::rbf(1.0).unwrap(),
            Lambda::Auto,
        );
        assert!(serde_json::to_string(&auto).unwrap().contains("\"auto\""));
    }
}
