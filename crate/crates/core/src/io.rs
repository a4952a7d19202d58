//! On-disk formats: raw rasters with JSON sidecars, PGM maps, CSV tables and
//! model directories.
//!
//! A raster at `path` is a little-endian `f32` payload in BIP order, described
//! by `<path>.json`:
//!
//! ```text
//! {"height":H,"width":W,"bands":D,"dtype":"f32","interleave":"bip"}
//! ```
//!
//! A model directory holds `manifest.json` plus one little-endian `f64` blob
//! per array, each referenced by relative path, element count and CRC32.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detectors::{DetectorConfig, FittedDetector, KernelTerm, LinearTerm, Term};
use crate::error::{Error, Result};
use crate::eval::RocCurve;
use crate::kernels::KernelSpec;
use crate::linalg::SpdFactor;
use crate::raster::{BandStats, ImageCube, PixelMatrix};
use crate::tune::TuneResult;

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: String,
    pub interleave: String,
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_raster(path: &Path, cube: &ImageCube) -> Result<()> {
    let mut payload = Vec::with_capacity(cube.data().len() * 4);
    for &v in cube.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, payload)?;
    let header = RasterHeader {
        height: cube.height(),
        width: cube.width(),
        bands: cube.bands(),
        dtype: "f32".into(),
        interleave: "bip".into(),
    };
    fs::write(sidecar_path(path), serde_json::to_string(&header)?)?;
    Ok(())
}

pub fn read_raster_header(path: &Path) -> Result<RasterHeader> {
    let side = sidecar_path(path);
    let header: RasterHeader =
        serde_json::from_slice(&fs::read(&side)?).map_err(|e| format_err(&side, e.to_string()))?;
    if header.dtype != "f32" {
        return Err(format_err(
            &side,
            format!("unsupported dtype '{}'", header.dtype),
        ));
    }
    if header.interleave != "bip" {
        return Err(format_err(
            &side,
            format!("unsupported interleave '{}'", header.interleave),
        ));
    }
    Ok(header)
}

pub fn read_raster(path: &Path) -> Result<ImageCube> {
    let header = read_raster_header(path)?;
    let bytes = fs::read(path)?;
    let expected = header.height * header.width * header.bands * 4;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} payload bytes, found {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ImageCube::new(header.height, header.width, header.bands, data)
        .map_err(|e| format_err(path, e.to_string()))
}

/// Single-band raster of 0/1 values.
pub fn write_labels(path: &Path, height: usize, width: usize, labels: &[bool]) -> Result<()> {
    let data = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    write_raster(path, &ImageCube::new(height, width, 1, data)?)
}

pub fn read_labels(path: &Path) -> Result<Vec<bool>> {
    let cube = read_raster(path)?;
    if cube.bands() != 1 {
        return Err(format_err(path, "label raster must have one band"));
    }
    cube.data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(format_err(path, format!("label value {v} is not 0 or 1")))
            }
        })
        .collect()
}

/// Single-band raster of per-pixel scores.
pub fn write_scores(path: &Path, height: usize, width: usize, scores: &[f64]) -> Result<()> {
    write_raster(path, &ImageCube::new(height, width, 1, scores.to_vec())?)
}

pub fn read_scores(path: &Path) -> Result<(RasterHeader, Vec<f64>)> {
    let cube = read_raster(path)?;
    if cube.bands() != 1 {
        return Err(format_err(path, "score raster must have one band"));
    }
    let header = read_raster_header(path)?;
    Ok((header, cube.data().to_vec()))
}

#[derive(Debug, Clone, Copy)]
pub enum PgmMap<'a> {
    /// `false -> 0`, `true -> 255`.
    Binary(&'a [bool]),
    /// Min-max scaled to `0..=255`; a constant map renders as all zeros.
    Scaled(&'a [f64]),
}

/// Binary (P5) PGM with maxval 255.
pub fn encode_pgm(height: usize, width: usize, map: PgmMap<'_>) -> Result<Vec<u8>> {
    let pixels: Vec<u8> = match map {
        PgmMap::Binary(v) => v.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        PgmMap::Scaled(v) => {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            v.iter()
                .map(|&s| {
                    if span > 0.0 && span.is_finite() {
                        ((s - lo) / span * 255.0).round() as u8
                    } else {
                        0
                    }
                })
                .collect()
        }
    };
    if pixels.len() != height * width {
        return Err(Error::DimensionMismatch {
            expected: height * width,
            got: pixels.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, height: usize, width: usize, map: PgmMap<'_>) -> Result<()> {
    fs::write(path, encode_pgm(height, width, map)?)?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// `fpr,tpr,threshold`, one row per vertex.
pub fn write_roc_csv(path: &Path, roc: &RocCurve) -> Result<()> {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in &roc.points {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_f64(p.fpr),
            fmt_f64(p.tpr),
            fmt_f64(p.threshold)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// `nu,sigma,lambda,val_auc`; unused parameters are left blank.
pub fn write_trace_csv(path: &Path, result: &TuneResult) -> Result<()> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut out = String::from("nu,sigma,lambda,val_auc\n");
    for t in &result.trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            opt(t.params.nu),
            opt(t.params.sigma),
            opt(t.params.lambda),
            fmt_f64(t.val_auc)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub path: String,
    pub len: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub d_x: usize,
    pub d_y: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRef {
    pub mean: BlobRef,
    pub std: BlobRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum TermManifest {
    Linear {
        dim: usize,
        ridge: f64,
        mean: BlobRef,
        factor: BlobRef,
    },
    Kernel {
        kernel: KernelSpec,
        lambda: f64,
        ridge: f64,
        n: usize,
        dim: usize,
        train: BlobRef,
        factor: BlobRef,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermsManifest {
    pub x: TermManifest,
    pub y: TermManifest,
    pub z: TermManifest,
}

/// Hyperparameters chosen by grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningInfo {
    pub nu: Option<f64>,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub val_auc: f64,
}

impl From<&TuneResult> for TuningInfo {
    fn from(r: &TuneResult) -> Self {
        Self {
            nu: r.best_params.nu,
            sigma: r.best_params.sigma,
            lambda: r.best_params.lambda,
            val_auc: r.best_val_auc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub config: DetectorConfig,
    pub dims: Dims,
    pub band_stats_x: StatsRef,
    pub band_stats_y: StatsRef,
    pub terms: TermsManifest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningInfo>,
    /// Free-form, not covered by determinism guarantees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

struct BlobWriter<'a> {
    dir: &'a Path,
}

impl BlobWriter<'_> {
    fn write(&self, name: &str, values: &[f64]) -> Result<BlobRef> {
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = format!("{name}.f64");
        fs::write(self.dir.join(&file), &bytes)?;
        Ok(BlobRef {
            path: file,
            len: values.len(),
            crc32: crc32fast::hash(&bytes),
        })
    }

    fn stats(&self, prefix: &str, s: &BandStats) -> Result<StatsRef> {
        Ok(StatsRef {
            mean: self.write(&format!("{prefix}_mean"), &s.mean)?,
            std: self.write(&format!("{prefix}_std"), &s.std)?,
        })
    }

    fn term(&self, prefix: &str, term: &Term) -> Result<TermManifest> {
        Ok(match term {
            Term::Linear(t) => TermManifest::Linear {
                dim: t.dim(),
                ridge: t.factor().ridge(),
                mean: self.write(&format!("{prefix}_mean"), t.mean())?,
                factor: self.write(&format!("{prefix}_factor"), &row_major(t.factor().l()))?,
            },
            Term::Kernel(t) => TermManifest::Kernel {
                kernel: *t.spec(),
                lambda: t.lambda(),
                ridge: t.solve_factor().ridge(),
                n: t.train().n(),
                dim: t.dim(),
                train: self.write(&format!("{prefix}_train"), t.train().as_slice())?,
                factor: self.write(
                    &format!("{prefix}_factor"),
                    &row_major(t.solve_factor().l()),
                )?,
            },
        })
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn save_model(det: &FittedDetector, dir: &Path) -> Result<()> {
    save_model_with(det, dir, None, None)
}

pub fn save_model_with(
    det: &FittedDetector,
    dir: &Path,
    tuning: Option<TuningInfo>,
    metadata: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let w = BlobWriter { dir };
    let [tx, ty, tz] = det.terms();
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        config: *det.config(),
        dims: Dims {
            d_x: det.d_x(),
            d_y: det.d_y(),
        },
        band_stats_x: w.stats("stats_x", det.band_stats_x())?,
        band_stats_y: w.stats("stats_y", det.band_stats_y())?,
        terms: TermsManifest {
            x: w.term("x", tx)?,
            y: w.term("y", ty)?,
            z: w.term("z", tz)?,
        },
        tuning,
        metadata,
    };
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<ModelManifest> {
    let path = dir.join(MANIFEST_FILE);
    let value: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)
        .map_err(|e| Error::CorruptModel(format!("{}: {e}", path.display())))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptModel("manifest lacks format_version".into()))?;
    if version != MODEL_FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion(
            version.min(u32::MAX as u64) as u32
        ));
    }
    serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))
}

fn read_blob(dir: &Path, blob: &BlobRef) -> Result<Vec<f64>> {
    let rel = Path::new(&blob.path);
    if rel.is_absolute()
        || rel
            .components()
            .any(|c| matches!(c, std::path::Component::ParentDir))
    {
        return Err(Error::CorruptModel(format!(
            "blob path '{}' escapes the model directory",
            blob.path
        )));
    }
    let bytes = fs::read(dir.join(rel))?;
    if bytes.len() != blob.len * 8 {
        return Err(Error::CorruptModel(format!(
            "{}: expected {} values, found {} bytes",
            blob.path,
            blob.len,
            bytes.len()
        )));
    }
    if crc32fast::hash(&bytes) != blob.crc32 {
        return Err(Error::CorruptModel(format!(
            "{}: checksum mismatch",
            blob.path
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_square(dir: &Path, blob: &BlobRef, dim: usize, ridge: f64) -> Result<SpdFactor> {
    let values = read_blob(dir, blob)?;
    if values.len() != dim * dim {
        return Err(Error::CorruptModel(format!(
            "{}: factor is not {dim}x{dim}",
            blob.path
        )));
    }
    SpdFactor::from_parts(DMatrix::from_row_slice(dim, dim, &values), ridge)
        .map_err(|e| Error::CorruptModel(format!("{}: {e}", blob.path)))
}

fn read_stats(dir: &Path, s: &StatsRef) -> Result<BandStats> {
    Ok(BandStats {
        mean: read_blob(dir, &s.mean)?,
        std: read_blob(dir, &s.std)?,
    })
}

fn read_term(dir: &Path, t: &TermManifest) -> Result<Term> {
    let corrupt = |e: Error| Error::CorruptModel(e.to_string());
    Ok(match t {
        TermManifest::Linear {
            dim,
            ridge,
            mean,
            factor,
        } => {
            let f = read_square(dir, factor, *dim, *ridge)?;
            Term::Linear(LinearTerm::from_parts(read_blob(dir, mean)?, f).map_err(corrupt)?)
        }
        TermManifest::Kernel {
            kernel,
            lambda,
            ridge,
            n,
            dim,
            train,
            factor,
        } => {
            let rows = PixelMatrix::new(*n, *dim, read_blob(dir, train)?).map_err(corrupt)?;
            let f = read_square(dir, factor, *n, *ridge)?;
            Term::Kernel(KernelTerm::from_parts(rows, *kernel, *lambda, f).map_err(corrupt)?)
        }
    })
}

pub fn load_model(dir: &Path) -> Result<FittedDetector> {
    Ok(load_model_with_manifest(dir)?.0)
}

pub fn load_model_with_manifest(dir: &Path) -> Result<(FittedDetector, ModelManifest)> {
    let m = read_manifest(dir)?;
    let det = FittedDetector::from_parts(
        m.config,
        read_stats(dir, &m.band_stats_x)?,
        read_stats(dir, &m.band_stats_y)?,
        read_term(dir, &m.terms.x)?,
        read_term(dir, &m.terms.y)?,
        read_term(dir, &m.terms.z)?,
    )
    .map_err(|e| Error::CorruptModel(e.to_string()))?;
    if det.d_x() != m.dims.d_x || det.d_y() != m.dims.d_y {
        return Err(Error::CorruptModel(
            "dims disagree with stored arrays".into(),
        ));
    }
    Ok((det, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_binary_bytes() {
        let bytes = encode_pgm(1, 2, PgmMap::Binary(&[false, true])).unwrap();
        let mut expected = b"P5\n2 1\n255\n".to_vec();
        expected.extend_from_slice(&[0x00, 0xFF]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn pgm_constant_scaled_is_black() {
        let bytes = encode_pgm(2, 2, PgmMap::Scaled(&[3.0; 4])).unwrap();
        assert!(bytes.ends_with(&[0, 0, 0, 0]));
    }

    #[test]
    fn pgm_scaled_keeps_ranking() {
        let scores: Vec<f64> = (0..500)
            .map(|i| ((i * 7919) % 500) as f64 * 0.37 - 20.0)
            .collect();
        let bytes = encode_pgm(20, 25, PgmMap::Scaled(&scores)).unwrap();
        let px = &bytes[bytes.len() - 500..];
        for i in 0..500 {
            for j in 0..500 {
                if scores[i] < scores[j] {
                    assert!(px[i] <= px[j]);
                }
            }
        }
        assert_eq!(*px.iter().max().unwrap(), 255);
        assert_eq!(*px.iter().min().unwrap(), 0);
    }

    #[test]
    fn pgm_size_mismatch() {
        assert!(encode_pgm(2, 2, PgmMap::Binary(&[true])).is_err());
    }

    #[test]
    fn raster_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.bin");
        let cube = ImageCube::new(2, 3, 2, (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        write_raster(&path, &cube).unwrap();
        let side = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert_eq!(
            side,
            r#"{"height":2,"width":3,"bands":2,"dtype":"f32","interleave":"bip"}"#
        );
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 48);
        assert_eq!(&bytes[4 * 5..4 * 6], &2.5f32.to_le_bytes());
        assert_eq!(read_raster(&path).unwrap(), cube);
    }

    #[test]
    fn raster_rejects_bad_sidecar_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        let cube = ImageCube::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        write_raster(&path, &cube).unwrap();
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(read_raster(&path), Err(Error::Format { .. })));
        fs::write(
            sidecar_path(&path),
            r#"{"height":1,"width":2,"bands":1,"dtype":"f64","interleave":"bip"}"#,
        )
        .unwrap();
        assert!(read_raster(&path).is_err());
        assert!(read_raster(&dir.path().join("missing.bin")).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.bin");
        let labels = vec![true, false, false, true, true, false];
        write_labels(&path, 2, 3, &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
        write_raster(&path, &ImageCube::new(1, 1, 1, vec![0.5]).unwrap()).unwrap();
        assert!(read_labels(&path).is_err());
    }

    #[test]
    fn roc_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roc.csv");
        let roc = crate::eval::roc_curve(&[0.1, 0.7], &[false, true]).unwrap();
        write_roc_csv(&path, &roc).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "fpr,tpr,threshold");
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[2],
            "0.0000000000000000e0,1.0000000000000000e0,6.9999999999999996e-1"
        );
        let parsed: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(parsed, 0.7);
    }
}
