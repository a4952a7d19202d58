//! Grid-search tuning of `ν`, `σ` and `λ` by validation AUC.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detectors::{combine, fit, DetectorConfig, Distribution, Mode, Xi};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::kernels::{
    cross_gram, gram, percentile_sigma_grid, sigma_heuristic_with, DistanceMetric, HeuristicMethod,
    KernelKind, KernelSpec,
};
use crate::raster::{sample_from_pool, stack_pair, BandStats, PixelMatrix};

/// Candidate values per hyperparameter. An empty list leaves the value from
/// the detector configuration untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneGrid {
    pub nu_grid: Vec<f64>,
    /// Multipliers applied to `sigma_anchor`.
    pub sigma_multipliers: Vec<f64>,
    pub sigma_anchor: f64,
    pub lambda_grid: Vec<f64>,
}

impl TuneGrid {
    pub fn empty() -> Self {
        Self {
            nu_grid: Vec::new(),
            sigma_multipliers: Vec::new(),
            sigma_anchor: 1.0,
            lambda_grid: Vec::new(),
        }
    }

    /// Use absolute bandwidths instead of multipliers of a heuristic.
    pub fn with_sigmas(mut self, sigmas: Vec<f64>) -> Self {
        self.sigma_anchor = 1.0;
        self.sigma_multipliers = sigmas;
        self
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.sigma_multipliers
            .iter()
            .map(|m| m * self.sigma_anchor)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nu_grid.len().max(1)
            * self.sigma_multipliers.len().max(1)
            * self.lambda_grid.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.nu_grid.is_empty() && self.sigma_multipliers.is_empty() && self.lambda_grid.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("nu", &self.nu_grid),
            ("sigma", &self.sigma_multipliers),
            ("lambda", &self.lambda_grid),
        ] {
            if g.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::invalid(format!(
                    "{name} grid must be strictly positive"
                )));
            }
            if g.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!(
                    "{name} grid must be sorted ascending"
                )));
            }
        }
        if !(self.sigma_anchor > 0.0 && self.sigma_anchor.is_finite()) {
            return Err(Error::invalid("sigma anchor must be positive"));
        }
        Ok(())
    }
}

fn pow10(e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() < 300.0 {
        10f64.powi(e as i32)
    } else {
        10f64.powf(e)
    }
}

/// `count` points spaced evenly in log10 between `10^lo` and `10^hi`.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![pow10(lo)],
        _ => (0..count)
            .map(|i| {
                if i == count - 1 {
                    pow10(hi)
                } else {
                    pow10(lo + (hi - lo) * i as f64 / (count - 1) as f64)
                }
            })
            .collect(),
    }
}

/// ν: 100 points over `[1e-5, 1e10]`; σ: 60 multipliers over `[1e-3, 1e3]`;
/// λ: 30 points over `[1e-10, 10^2.5]`. Dimensions the configuration does
/// not use are left empty.
pub fn default_grid(config: &DetectorConfig, heuristic_sigma: f64) -> Result<TuneGrid> {
    let mut grid = TuneGrid::empty();
    if config.is_ec() {
        grid.nu_grid = logspace(-5.0, 10.0, 100);
    }
    if config.is_kernel() {
        if !(heuristic_sigma > 0.0 && heuristic_sigma.is_finite()) {
            return Err(Error::invalid(
                "kernel tuning needs a positive heuristic sigma",
            ));
        }
        grid.sigma_anchor = heuristic_sigma;
        grid.sigma_multipliers = logspace(-3.0, 3.0, 60);
        grid.lambda_grid = logspace(-10.0, 2.5, 30);
    }
    Ok(grid)
}

/// Standardized, stacked training rows: the space the joint kernel sees.
fn joint_rows(x_train: &PixelMatrix, y_train: &PixelMatrix) -> Result<PixelMatrix> {
    let xs = BandStats::fit(x_train)?.apply(x_train)?;
    let ys = BandStats::fit(y_train)?.apply(y_train)?;
    stack_pair(&xs, &ys)
}

/// Bandwidth heuristic on the standardized, stacked training rows, using the
/// distance that matches the kernel (Euclidean, or angle for SAM).
pub fn training_sigma(
    x_train: &PixelMatrix,
    y_train: &PixelMatrix,
    kind: KernelKind,
    method: HeuristicMethod,
) -> Result<f64> {
    sigma_heuristic_with(&joint_rows(x_train, y_train)?, method, kind.metric())
}

/// SAM bandwidths at `count` percentiles evenly spaced over `[0.05, 0.95]`
/// of the pairwise training angles.
pub fn sam_sigma_grid(
    x_train: &PixelMatrix,
    y_train: &PixelMatrix,
    count: usize,
) -> Result<Vec<f64>> {
    percentile_sigma_grid(
        &joint_rows(x_train, y_train)?,
        DistanceMetric::Angle,
        0.05,
        0.95,
        count,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneParams {
    pub nu: Option<f64>,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
}

impl TuneParams {
    /// The configuration with these values substituted in.
    pub fn apply(&self, config: &DetectorConfig) -> DetectorConfig {
        let mut out = *config;
        if let Some(nu) = self.nu {
            out = out.with_nu(nu);
        }
        if let Some(sigma) = self.sigma {
            out = out.with_sigma(sigma);
        }
        if let Some(lambda) = self.lambda {
            out = out.with_lambda(lambda);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: TuneParams,
    /// `NaN` when the fit failed at this grid point.
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub best_params: TuneParams,
    pub best_val_auc: f64,
    /// Every grid point in canonical order: ν-major, then σ, then λ.
    pub trace: Vec<Trial>,
}

/// Training and validation pixel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Draw `n_train` training pixels from the non-anomalous positions, then
/// `n_val` validation pixels from everything not used for training.
pub fn split_indices<R: Rng + ?Sized>(
    rng: &mut R,
    labels: &[bool],
    n_train: usize,
    n_val: usize,
) -> Result<Split> {
    if n_train + n_val > labels.len() {
        return Err(Error::SampleTooLarge {
            k: n_train + n_val,
            n: labels.len(),
        });
    }
    let background: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let mut train = sample_from_pool(rng, &background, n_train)?;
    train.sort_unstable();
    let mut used = vec![false; labels.len()];
    train.iter().for_each(|&i| used[i] = true);
    let rest: Vec<usize> = (0..labels.len()).filter(|&i| !used[i]).collect();
    let mut val = sample_from_pool(rng, &rest, n_val)?;
    val.sort_unstable();
    Ok(Split { train, val })
}

/// Split with a seeded generator, then evaluate every grid point.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    x: &PixelMatrix,
    y: &PixelMatrix,
    labels: &[bool],
    config: &DetectorConfig,
    grid: &TuneGrid,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<TuneResult> {
    if x.n() != y.n() {
        return Err(Error::UnalignedPair {
            left: x.n(),
            right: y.n(),
        });
    }
    if labels.len() != x.n() {
        return Err(Error::DimensionMismatch {
            expected: x.n(),
            got: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = split_indices(&mut rng, labels, n_train, n_val)?;
    let val_labels: Vec<bool> = split.val.iter().map(|&i| labels[i]).collect();
    evaluate_grid(
        &x.select_rows(&split.train),
        &y.select_rows(&split.train),
        &x.select_rows(&split.val),
        &y.select_rows(&split.val),
        &val_labels,
        config,
        grid,
    )
}

/// Fit on the training pixels at every grid point and score the validation
/// pixels. Ties go to the smallest `(ν, σ, λ)`.
pub fn evaluate_grid(
    x_train: &PixelMatrix,
    y_train: &PixelMatrix,
    x_val: &PixelMatrix,
    y_val: &PixelMatrix,
    val_labels: &[bool],
    config: &DetectorConfig,
    grid: &TuneGrid,
) -> Result<TuneResult> {
    config.validate()?;
    grid.validate()?;
    if val_labels.len() != x_val.n() {
        return Err(Error::DimensionMismatch {
            expected: x_val.n(),
            got: val_labels.len(),
        });
    }
    let pos = val_labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == val_labels.len() {
        return Err(Error::DegenerateLabels);
    }

    let nus: Vec<Option<f64>> = match config.distribution {
        Distribution::Ec { nu } if grid.nu_grid.is_empty() => vec![Some(nu)],
        Distribution::Ec { .. } => grid.nu_grid.iter().map(|&v| Some(v)).collect(),
        Distribution::Gaussian => vec![None],
    };
    let (sigmas, lambdas): (Vec<Option<f64>>, Vec<Option<f64>>) = match config.mode {
        Mode::Linear => (vec![None], vec![None]),
        Mode::Kernel { kernel, lambda } => {
            let s = if grid.sigma_multipliers.is_empty() {
                vec![Some(kernel.sigma)]
            } else {
                grid.sigmas().into_iter().map(Some).collect()
            };
            let l = if grid.lambda_grid.is_empty() {
                vec![Some(lambda.resolve(x_train.n()))]
            } else {
                grid.lambda_grid.iter().map(|&v| Some(v)).collect()
            };
            (s, l)
        }
    };

    // ξ triples for every (σ, λ), σ-major.
    let spectral = lambdas.len() > 1;
    let xis: Vec<Vec<Result<Vec<Xi>>>> = sigmas
        .par_iter()
        .map(|&sigma| {
            if spectral {
                spectral_xis(
                    x_train,
                    y_train,
                    x_val,
                    y_val,
                    config,
                    sigma.unwrap(),
                    &lambdas,
                )
            } else {
                lambdas
                    .iter()
                    .map(|&lambda| {
                        let cfg = TuneParams {
                            nu: None,
                            sigma,
                            lambda,
                        }
                        .apply(config);
                        fit(x_train, y_train, &cfg)?.xi_values(x_val, y_val)
                    })
                    .collect()
            }
        })
        .collect();

    let (d_x, d_y) = (x_train.d(), y_train.d());
    let mut trace = Vec::with_capacity(nus.len() * sigmas.len() * lambdas.len());
    let mut first_error = None;
    for &nu in &nus {
        let distribution = match nu {
            Some(nu) => Distribution::Ec { nu },
            None => Distribution::Gaussian,
        };
        for (si, &sigma) in sigmas.iter().enumerate() {
            for (li, &lambda) in lambdas.iter().enumerate() {
                let val_auc = match &xis[si][li] {
                    Ok(xi) => {
                        let scores = combine(xi, config.detector, distribution, d_x, d_y);
                        auc(&scores, val_labels)?
                    }
                    Err(Error::SingularCovariance) => {
                        first_error.get_or_insert(Error::SingularCovariance);
                        f64::NAN
                    }
                    Err(e) => return Err(Error::invalid(format!("grid point failed: {e}"))),
                };
                trace.push(Trial {
                    params: TuneParams { nu, sigma, lambda },
                    val_auc,
                });
            }
        }
    }

    let best = trace
        .iter()
        .filter(|t| !t.val_auc.is_nan())
        .fold(None::<&Trial>, |best, t| match best {
            Some(b) if b.val_auc >= t.val_auc => Some(b),
            _ => Some(t),
        });
    match best {
        Some(b) => Ok(TuneResult {
            best_params: b.params,
            best_val_auc: b.val_auc,
            trace,
        }),
        None => Err(first_error.unwrap_or(Error::SingularCovariance)),
    }
}

/// ξ for a fixed σ and a whole λ grid from one eigendecomposition per term:
/// with `K = U diag(s) Uᵀ`, `k (KK + λI)⁻¹ kᵀ = Σ (uᵢᵀk)² / (sᵢ² + λ)`.
fn spectral_xis(
    x_train: &PixelMatrix,
    y_train: &PixelMatrix,
    x_val: &PixelMatrix,
    y_val: &PixelMatrix,
    config: &DetectorConfig,
    sigma: f64,
    lambdas: &[Option<f64>],
) -> Vec<Result<Vec<Xi>>> {
    let run = || -> Result<Vec<Vec<Xi>>> {
        let Mode::Kernel { kernel, .. } = config.mode else {
            unreachable!("spectral path is kernel-only")
        };
        let spec = kernel.with_sigma(sigma)?;
        let sx = BandStats::fit(x_train)?;
        let sy = BandStats::fit(y_train)?;
        let (xt, yt) = (sx.apply(x_train)?, sy.apply(y_train)?);
        let (xv, yv) = (sx.apply(x_val)?, sy.apply(y_val)?);
        let zt = stack_pair(&xt, &yt)?;
        let zv = stack_pair(&xv, &yv)?;
        let (bx, by) = config.detector.betas();
        let lams: Vec<f64> = lambdas.iter().map(|l| l.unwrap()).collect();
        let m = x_val.n();
        let z = spectral_term(&zt, &zv, &spec, &lams)?;
        let x = if bx {
            spectral_term(&xt, &xv, &spec, &lams)?
        } else {
            vec![vec![0.0; m]; lams.len()]
        };
        let y = if by {
            spectral_term(&yt, &yv, &spec, &lams)?
        } else {
            vec![vec![0.0; m]; lams.len()]
        };
        Ok((0..lams.len())
            .map(|l| {
                (0..m)
                    .map(|j| Xi {
                        z: z[l][j],
                        x: x[l][j],
                        y: y[l][j],
                    })
                    .collect()
            })
            .collect())
    };
    match run() {
        Ok(per_lambda) => per_lambda.into_iter().map(Ok).collect(),
        Err(e) => {
            let msg = e.to_string();
            lambdas
                .iter()
                .map(|_| Err(Error::invalid(msg.clone())))
                .collect()
        }
    }
}

fn spectral_term(
    train: &PixelMatrix,
    queries: &PixelMatrix,
    spec: &KernelSpec,
    lambdas: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let eig = gram(train, spec).symmetric_eigen();
    let kc = cross_gram(train, queries, spec)?;
    let proj: DMatrix<f64> = eig.eigenvectors.tr_mul(&kc).map(|v| v * v);
    let s2: Vec<f64> = eig.eigenvalues.iter().map(|s| s * s).collect();
    Ok(lambdas
        .iter()
        .map(|&lam| {
            let w: Vec<f64> = s2.iter().map(|s| 1.0 / (s + lam)).collect();
            proj.column_iter()
                .map(|c| c.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>().max(0.0))
                .collect()
        })
        .collect())
}
