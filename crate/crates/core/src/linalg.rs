//! Covariance estimation, ridge-regularized Cholesky factors and Mahalanobis
//! quadratic forms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::raster::PixelMatrix;

/// Relative ridge applied to covariance matrices unless configured otherwise.
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-8;

const MAX_RIDGE_RETRIES: usize = 6;

/// Lower-triangular `L` with `L Lᵀ = C + ridge·I`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    l: DMatrix<f64>,
    ridge: f64,
}

impl SpdFactor {
    /// Wrap an existing lower-triangular factor (e.g. one read back from disk).
    pub fn from_parts(l: DMatrix<f64>, ridge: f64) -> Result<Self> {
        if !l.is_square() {
            return Err(Error::invalid("factor must be square"));
        }
        if l.diagonal().iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::invalid("factor diagonal must be strictly positive"));
        }
        Ok(Self { l, ridge })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// `vᵀ (L Lᵀ)⁻¹ v` via one forward substitution.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        let mut w = DVector::from_column_slice(v);
        self.l.solve_lower_triangular_mut(&mut w);
        Ok(w.norm_squared())
    }

    /// `L⁻¹`, for applying the inverse factor to many vectors with one
    /// matrix product.
    pub fn inverse_l(&self) -> DMatrix<f64> {
        lower_triangular_inverse(&self.l)
    }

    /// Quadratic form of every column of `b`. `b` is overwritten with `L⁻¹ b`.
    pub fn quad_form_columns(&self, b: &mut DMatrix<f64>) -> Vec<f64> {
        debug_assert_eq!(b.nrows(), self.dim());
        self.l.solve_lower_triangular_mut(b);
        b.column_iter().map(|c| c.norm_squared()).collect()
    }
}

/// Inverse of a nonsingular lower-triangular matrix by recursive 2×2
/// blocking: `[[A, 0], [B, C]]⁻¹ = [[A⁻¹, 0], [−C⁻¹ B A⁻¹, C⁻¹]]`, so most of
/// the work is matrix products.
fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    const BASE: usize = 64;
    let n = l.nrows();
    if n <= BASE {
        let mut w = DMatrix::identity(n, n);
        l.solve_lower_triangular_mut(&mut w);
        return w;
    }
    let h = n / 2;
    let a_inv = lower_triangular_inverse(&l.view((0, 0), (h, h)).into_owned());
    let c_inv = lower_triangular_inverse(&l.view((h, h), (n - h, n - h)).into_owned());
    let b = l.view((h, 0), (n - h, h));
    let off = -(&c_inv * (b * &a_inv));
    let mut w = DMatrix::zeros(n, n);
    w.view_mut((0, 0), (h, h)).copy_from(&a_inv);
    w.view_mut((h, h), (n - h, n - h)).copy_from(&c_inv);
    w.view_mut((h, 0), (n - h, h)).copy_from(&off);
    w
}

/// `(1/n) Σ (row − mean)(row − mean)ᵀ`, symmetrized.
pub fn covariance(m: &PixelMatrix, mean: &[f64]) -> Result<DMatrix<f64>> {
    if m.n() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: m.n(),
        });
    }
    if mean.len() != m.d() {
        return Err(Error::DimensionMismatch {
            expected: m.d(),
            got: mean.len(),
        });
    }
    let centered = DMatrix::from_fn(m.n(), m.d(), |i, j| m.row(i)[j] - mean[j]);
    let mut c = centered.tr_mul(&centered) / m.n() as f64;
    symmetrize(&mut c);
    Ok(c)
}

pub(crate) fn symmetrize(c: &mut DMatrix<f64>) {
    let d = c.nrows();
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = avg;
            c[(j, i)] = avg;
        }
    }
}

/// Cholesky factor of `C + εI` with `ε = ridge_scale · trace(C) / d`.
///
/// A failed factorization multiplies `ε` by ten and retries, up to six times.
/// With `ridge_scale = 0` the first retry starts from a machine-precision
/// jitter of the mean diagonal.
pub fn spd_factorize(c: &DMatrix<f64>, ridge_scale: f64) -> Result<SpdFactor> {
    if !c.is_square() || c.nrows() == 0 {
        return Err(Error::invalid(
            "covariance must be a non-empty square matrix",
        ));
    }
    if ridge_scale.is_nan() || ridge_scale < 0.0 {
        return Err(Error::invalid("ridge_scale must be nonnegative"));
    }
    let d = c.nrows();
    let mean_diag = c.trace() / d as f64;
    let scale = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    let mut ridge = ridge_scale * scale;
    for attempt in 0..=MAX_RIDGE_RETRIES {
        if attempt > 0 {
            ridge = if ridge > 0.0 {
                ridge * 10.0
            } else {
                f64::EPSILON * scale * 10.0
            };
        }
        let mut shifted = c.clone();
        if ridge > 0.0 {
            for i in 0..d {
                shifted[(i, i)] += ridge;
            }
        }
        if let Some(chol) = nalgebra::Cholesky::new(shifted) {
            let l = chol.unpack();
            if l.diagonal().iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Ok(SpdFactor { l, ridge });
            }
        }
    }
    Err(Error::SingularCovariance)
}

/// Squared Mahalanobis distance `(v − mean)ᵀ (L Lᵀ)⁻¹ (v − mean)`.
pub fn mahalanobis(f: &SpdFactor, mean: &[f64], v: &[f64]) -> Result<f64> {
    if mean.len() != f.dim() || v.len() != f.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            got: if mean.len() != f.dim() {
                mean.len()
            } else {
                v.len()
            },
        });
    }
    let diff: Vec<f64> = v.iter().zip(mean).map(|(a, b)| a - b).collect();
    f.quad_form(&diff)
}
