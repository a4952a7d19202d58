//! Synthetic change generation: pervasive Gaussian noise plus anomalous
//! pixel scrambling with ground-truth labels.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::{sample_pixels_with, BandStats, ImageCube};

/// A simulated second acquisition and its change labels (`true` = anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub second_image: ImageCube,
    pub labels: Vec<bool>,
}

impl SimulationResult {
    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Add independent `N(0, std²)` noise to every value, in units of each
/// band's standard deviation.
pub fn pervasive_noise(cube: &ImageCube, std: f64, seed: u64) -> Result<ImageCube> {
    pervasive_noise_with(&mut ChaCha8Rng::seed_from_u64(seed), cube, std)
}

/// Draws one normal per value in storage (BIP) order.
pub fn pervasive_noise_with<R: Rng + ?Sized>(
    rng: &mut R,
    cube: &ImageCube,
    std: f64,
) -> Result<ImageCube> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid(format!(
            "noise std must be nonnegative, got {std}"
        )));
    }
    if std == 0.0 {
        return Ok(cube.clone());
    }
    let stats = if cube.pixel_count() >= 2 {
        BandStats::fit(&cube.flatten())?
    } else {
        BandStats::identity(cube.bands())
    };
    let bands = cube.bands();
    let data = cube
        .data()
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let e: f64 = StandardNormal.sample(rng);
            v + stats.std[k % bands] * std * e
        })
        .collect();
    ImageCube::new(cube.height(), cube.width(), bands, data)
}

/// Uniformly pick `round(frac · H · W)` pixels and permute their spectra with
/// a derangement, so every selected pixel receives another pixel's spectrum.
pub fn scramble_anomalies(cube: &ImageCube, frac: f64, seed: u64) -> Result<SimulationResult> {
    scramble_anomalies_with(&mut ChaCha8Rng::seed_from_u64(seed), cube, frac)
}

/// Draw order: pixel selection, then derangement shuffles.
pub fn scramble_anomalies_with<R: Rng + ?Sized>(
    rng: &mut R,
    cube: &ImageCube,
    frac: f64,
) -> Result<SimulationResult> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::invalid(format!(
            "scramble fraction must lie in (0, 1], got {frac}"
        )));
    }
    let n = cube.pixel_count();
    let k = (frac * n as f64).round() as usize;
    if k < 2 {
        return Err(Error::CannotDerange(k));
    }
    let mut selected = sample_pixels_with(rng, n, k)?;
    selected.sort_unstable();
    let perm = derangement(rng, k);

    let bands = cube.bands();
    let src = cube.data();
    let mut data = src.to_vec();
    let mut labels = vec![false; n];
    for (slot, &from) in perm.iter().enumerate() {
        let to = selected[slot];
        let from = selected[from];
        data[to * bands..(to + 1) * bands].copy_from_slice(&src[from * bands..(from + 1) * bands]);
        labels[to] = true;
    }
    Ok(SimulationResult {
        second_image: ImageCube::new(cube.height(), cube.width(), bands, data)?,
        labels,
    })
}

/// Uniform permutation of `0..k` without fixed points, by rejection.
fn derangement<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<usize> {
    debug_assert!(k >= 2);
    let mut perm: Vec<usize> = (0..k).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

/// Noise first, then scrambling, from a single generator.
pub fn simulate_change(
    cube: &ImageCube,
    noise_std: f64,
    scramble_frac: f64,
    seed: u64,
) -> Result<SimulationResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = pervasive_noise_with(&mut rng, cube, noise_std)?;
    scramble_anomalies_with(&mut rng, &noisy, scramble_frac)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Pixels drawn i.i.d. from an equal-weight Gaussian mixture.
///
/// Component means are `N(0, separation² I)`; each component covariance is
/// `A Aᵀ` with `A` having `N(0, 1/bands)` entries.
pub fn gaussian_mixture_cube(
    height: usize,
    width: usize,
    bands: usize,
    components: usize,
    separation: f64,
    seed: u64,
) -> Result<ImageCube> {
    if components == 0 {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (bands as f64).sqrt();
    let comps: Vec<(Vec<f64>, Vec<f64>)> = (0..components)
        .map(|_| {
            let mean: Vec<f64> = (0..bands).map(|_| separation * normal(&mut rng)).collect();
            let mix: Vec<f64> = (0..bands * bands)
                .map(|_| scale * normal(&mut rng))
                .collect();
            (mean, mix)
        })
        .collect();
    let mut data = Vec::with_capacity(height * width * bands);
    let mut e = vec![0.0; bands];
    for _ in 0..height * width {
        let (mean, mix) = &comps[rng.random_range(0..components)];
        e.iter_mut().for_each(|v| *v = normal(&mut rng));
        for b in 0..bands {
            let row = &mix[b * bands..(b + 1) * bands];
            data.push(mean[b] + row.iter().zip(&e).map(|(a, x)| a * x).sum::<f64>());
        }
    }
    ImageCube::new(height, width, bands, data)
}
