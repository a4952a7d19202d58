//! Raster data model.
//!
//! Cubes are stored band-interleaved-by-pixel (BIP) in row-major pixel order:
//! the value of band `b` at pixel `(row, col)` lives at
//! `(row * width + col) * bands + b`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `height x width x bands` raster of finite real values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl ImageCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidCube(format!(
                "dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if data.len() != expected {
            return Err(Error::InvalidCube(format!(
                "expected {expected} values for {height}x{width}x{bands}, got {}",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidCube(format!("non-finite value at index {k}")));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    /// Rebuild a cube from a pixel matrix with `height * width` rows.
    pub fn from_pixels(height: usize, width: usize, pixels: &PixelMatrix) -> Result<Self> {
        if pixels.n() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                got: pixels.n(),
            });
        }
        Self::new(height, width, pixels.d(), pixels.as_slice().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.bands..(index + 1) * self.bands]
    }

    /// One row per pixel, in row-major pixel order.
    pub fn flatten(&self) -> PixelMatrix {
        PixelMatrix {
            n: self.pixel_count(),
            d: self.bands,
            data: self.data.clone(),
        }
    }

    pub fn into_pixels(self) -> PixelMatrix {
        PixelMatrix {
            n: self.height * self.width,
            d: self.bands,
            data: self.data,
        }
    }
}

/// `n` spectra of length `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl PixelMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("pixel matrix needs at least one column"));
        }
        if data.len() != n * d {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pixel matrix contains non-finite values"));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), d, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.d)
    }

    /// Gather the listed rows, in the listed order.
    pub fn select_rows(&self, indices: &[usize]) -> PixelMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        PixelMatrix {
            n: indices.len(),
            d: self.d,
            data,
        }
    }

    /// Contiguous block of rows `[start, end)`.
    pub fn row_block(&self, start: usize, end: usize) -> PixelMatrix {
        PixelMatrix {
            n: end - start,
            d: self.d,
            data: self.data[start * self.d..end * self.d].to_vec(),
        }
    }

    /// Columns `[start, end)` of every row.
    pub fn columns(&self, start: usize, end: usize) -> PixelMatrix {
        assert!(start < end && end <= self.d, "column range out of bounds");
        let mut data = Vec::with_capacity(self.n * (end - start));
        for r in self.rows() {
            data.extend_from_slice(&r[start..end]);
        }
        PixelMatrix {
            n: self.n,
            d: end - start,
            data,
        }
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.d];
        for r in self.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.n as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    pub fn scale(&self, factor: f64) -> PixelMatrix {
        PixelMatrix {
            n: self.n,
            d: self.d,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Concatenate `x` and `y` row-wise: row `i` of the result is `[x_i, y_i]`.
pub fn stack_pair(x: &PixelMatrix, y: &PixelMatrix) -> Result<PixelMatrix> {
    if x.n != y.n {
        return Err(Error::UnalignedPair {
            left: x.n,
            right: y.n,
        });
    }
    let d = x.d + y.d;
    let mut data = Vec::with_capacity(x.n * d);
    for (a, b) in x.rows().zip(y.rows()) {
        data.extend_from_slice(a);
        data.extend_from_slice(b);
    }
    Ok(PixelMatrix { n: x.n, d, data })
}

/// Per-band z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Population mean and standard deviation per column. Constant columns get
    /// `std = 1`.
    pub fn fit(m: &PixelMatrix) -> Result<Self> {
        if m.n < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: m.n,
            });
        }
        let mean = m.column_means();
        let mut var = vec![0.0; m.d];
        for r in m.rows() {
            for ((acc, v), mu) in var.iter_mut().zip(r).zip(&mean) {
                let c = v - mu;
                *acc += c * c;
            }
        }
        let n = m.n as f64;
        let std = var
            .iter()
            .zip(&mean)
            .map(|(v, mu)| {
                let s = (v / n).sqrt();
                if s < 1e-12 * (mu.abs() + 1.0) {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, m: &PixelMatrix) -> Result<PixelMatrix> {
        self.check_dim(m)?;
        let mut data = m.data.clone();
        for r in data.chunks_exact_mut(m.d) {
            self.apply_row(r);
        }
        Ok(PixelMatrix {
            n: m.n,
            d: m.d,
            data,
        })
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, mu), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - mu) / s;
        }
    }

    /// Map standardized values back to band units.
    pub fn invert(&self, m: &PixelMatrix) -> Result<PixelMatrix> {
        self.check_dim(m)?;
        let mut data = m.data.clone();
        for r in data.chunks_exact_mut(m.d) {
            for ((v, mu), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + mu;
            }
        }
        Ok(PixelMatrix {
            n: m.n,
            d: m.d,
            data,
        })
    }

    fn check_dim(&self, m: &PixelMatrix) -> Result<()> {
        if m.d != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: m.d,
            });
        }
        Ok(())
    }
}

pub fn standardize_fit(m: &PixelMatrix) -> Result<BandStats> {
    BandStats::fit(m)
}

pub fn standardize_apply(m: &PixelMatrix, stats: &BandStats) -> Result<PixelMatrix> {
    stats.apply(m)
}

/// `k` distinct indices from `0..n_total`, uniform without replacement.
pub fn sample_pixels(n_total: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_pixels_with(&mut rng, n_total, k)
}

pub fn sample_pixels_with<R: Rng + ?Sized>(
    rng: &mut R,
    n_total: usize,
    k: usize,
) -> Result<Vec<usize>> {
    if k > n_total {
        return Err(Error::SampleTooLarge { k, n: n_total });
    }
    Ok(rand::seq::index::sample(rng, n_total, k).into_vec())
}

/// `k` distinct entries of `pool`, uniform without replacement.
pub fn sample_from_pool<R: Rng + ?Sized>(
    rng: &mut R,
    pool: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    Ok(sample_pixels_with(rng, pool.len(), k)?
        .into_iter()
        .map(|i| pool[i])
        .collect())
}
