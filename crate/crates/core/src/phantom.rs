//! Gaussian-blob phantoms, projections, contrasts, noise, and synthetic datasets.

use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctf::{ctf_value_per_pixel, defocus_groups, CtfParams};
use crate::error::{Error, Result};
use crate::image::{Fft2, Image};
use crate::rng::{substream, Domain};

/// Isotropic 3-D Gaussian; center and std in units of the image half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blob {
    pub center: [f64; 3],
    pub weight: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomVolume {
    pub blobs: Vec<Blob>,
}

impl PhantomVolume {
    pub fn new(blobs: Vec<Blob>) -> Result<Self> {
        let vol = PhantomVolume { blobs };
        vol.validate()?;
        Ok(vol)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (i, b) in self.blobs.iter().enumerate() {
            let norm = b.center.iter().map(|c| c * c).sum::<f64>().sqrt();
            if !(b.std > 0.0) {
                problems.push(format!("blob {i}: std {} must be > 0", b.std));
            }
            if !(b.weight >= 0.0) {
                problems.push(format!("blob {i}: weight {} must be >= 0", b.weight));
            }
            if !(norm + 3.0 * b.std <= 1.0) {
                problems.push(format!(
                    "blob {i}: |center| + 3 std = {} exceeds 1",
                    norm + 3.0 * b.std
                ));
            }
        }
        if !(self.mass() > 0.0) {
            problems.push("total mass must be > 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Total mass `s`, the pixel sum of every projection.
    pub fn mass(&self) -> f64 {
        self.blobs.iter().map(|b| b.weight).sum()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let vol: PhantomVolume = serde_json::from_str(text)?;
        vol.validate()?;
        Ok(vol)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Twelve blobs with seeded centers, weights and widths, kept well
    /// inside the frame (`|center| + 3 std <= 0.7`).
    pub fn random(count: usize, seed: u64) -> Self {
        let mut rng = substream(seed, Domain::Phantom, 0);
        let blobs = (0..count)
            .map(|_| {
                let std = rng.random_range(0.05..0.15);
                let weight = rng.random_range(0.5..1.5);
                let radius = 0.7 - 3.0 * std;
                let center = loop {
                    let c: [f64; 3] = [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ];
                    if c.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                        break c.map(|v| v * radius);
                    }
                };
                Blob {
                    center,
                    weight,
                    std,
                }
            })
            .collect();
        PhantomVolume { blobs }
    }
}

impl Default for PhantomVolume {
    fn default() -> Self {
        PhantomVolume::random(12, 2660)
    }
}

/// Proper rotation of 3-space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let r = Rotation(m);
        if r.orthogonality_error() > 1e-12 || (m.determinant() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("matrix is not a proper rotation"));
        }
        Ok(r)
    }

    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Counter-clockwise rotation by `alpha` about the viewing axis.
    pub fn about_z(alpha: f64) -> Self {
        let (s, c) = alpha.sin_cos();
        Rotation(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Haar-uniform rotation from a normalized Gaussian quaternion.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut q = [0.0f64; 4];
        loop {
            for v in &mut q {
                *v = rng.sample(StandardNormal);
            }
            if q.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
                break;
            }
        }
        let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
        Rotation(uq.to_rotation_matrix().into_inner())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn orthogonality_error(&self) -> f64 {
        (self.0 * self.0.transpose() - Matrix3::identity()).amax()
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

/// Projection along `z` of the rotated phantom on an `L x L` pixel grid.
/// Each blob contributes `w / (2 pi s^2) exp(-|p - c|^2 / (2 s^2))` with the
/// rotated center `c` and width `s` converted to pixels.
pub fn project_phantom(vol: &PhantomVolume, rot: &Rotation, size: usize) -> Image {
    let half = size as f64 / 2.0;
    let blobs: Vec<(f64, f64, f64, f64)> = vol
        .blobs
        .iter()
        .map(|b| {
            let c = rot.0 * Vector3::from(b.center);
            let s = b.std * half;
            (c.x * half, c.y * half, 0.5 / (s * s), b.weight / (2.0 * std::f64::consts::PI * s * s))
        })
        .collect();
    Image::from_fn(size, |x, y| {
        blobs
            .iter()
            .map(|&(cx, cy, a, amp)| {
                let (dx, dy) = (x - cx, y - cy);
                amp * (-(dx * dx + dy * dy) * a).exp()
            })
            .sum()
    })
}

/// i.i.d. `U[lo, hi]` contrasts; draw `i` depends only on `(seed, i)`.
pub fn sample_contrasts(n: usize, lo: f64, hi: f64, seed: u64) -> Result<Vec<f64>> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::invalid(format!("contrast range [{lo}, {hi}]")));
    }
    Ok((0..n)
        .map(|i| {
            if lo == hi {
                lo
            } else {
                substream(seed, Domain::Contrast, i as u64).random_range(lo..hi)
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Colored,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseKind::White => "white",
            NoiseKind::Colored => "colored",
        })
    }
}

/// Additive stationary Gaussian noise with per-pixel variance `sigma2`.
///
/// Colored noise has radial PSD proportional to `1/sqrt(k^2 + 1)` with
/// `k = 128 xi` (`xi` in cycles per pixel), scaled to mean 1 over the DFT
/// grid so that `sigma2` stays the per-pixel variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma2: f64,
}

/// Unnormalized colored PSD shape.
pub fn colored_psd_shape(xi: f64) -> f64 {
    let k = 128.0 * xi;
    1.0 / (k * k + 1.0).sqrt()
}

/// Mean of `shape(|m| / L)` over the `L x L` DFT grid.
pub fn grid_mean(size: usize, shape: impl Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    for r in 0..size {
        let fy = crate::image::signed_freq(r, size);
        for c in 0..size {
            let fx = crate::image::signed_freq(c, size);
            total += shape((fx * fx + fy * fy).sqrt() / size as f64);
        }
    }
    total / (size * size) as f64
}

impl NoiseModel {
    pub fn white(sigma2: f64) -> Self {
        NoiseModel {
            kind: NoiseKind::White,
            sigma2,
        }
    }

    pub fn colored(sigma2: f64) -> Self {
        NoiseModel {
            kind: NoiseKind::Colored,
            sigma2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::invalid(format!("noise variance {}", self.sigma2)));
        }
        Ok(())
    }

    /// PSD shape normalized to unit mean on the `size x size` grid.
    pub fn shape(&self, size: usize) -> impl Fn(f64) -> f64 {
        let (kind, norm) = match self.kind {
            NoiseKind::White => (NoiseKind::White, 1.0),
            NoiseKind::Colored => (NoiseKind::Colored, 1.0 / grid_mean(size, colored_psd_shape)),
        };
        move |xi| match kind {
            NoiseKind::White => 1.0,
            NoiseKind::Colored => norm * colored_psd_shape(xi),
        }
    }

    /// Noise PSD per pixel at frequency `xi` (cycles per pixel).
    pub fn psd(&self, size: usize) -> impl Fn(f64) -> f64 {
        let shape = self.shape(size);
        let s2 = self.sigma2;
        move |xi| s2 * shape(xi)
    }
}

/// Adds noise drawn from `rng`. `sigma2 = 0` returns the input unchanged.
pub fn add_noise<R: Rng + ?Sized>(
    image: &Image,
    model: &NoiseModel,
    fft: &Fft2,
    rng: &mut R,
) -> Result<Image> {
    model.validate()?;
    if model.sigma2 == 0.0 {
        return Ok(image.clone());
    }
    let size = image.size();
    if fft.size() != size {
        return Err(Error::mismatch(fft.size(), size));
    }
    let sigma = model.sigma2.sqrt();
    let white: Vec<f64> = (0..size * size)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut noise = Image::from_vec(size, white)?;
    if model.kind == NoiseKind::Colored {
        let shape = model.shape(size);
        noise = fft.radial_filter(&noise, |m| shape(m / size as f64).sqrt());
    }
    let mut out = image.clone();
    for (o, n) in out.data_mut().iter_mut().zip(noise.data()) {
        *o += sigma * n;
    }
    Ok(out)
}

/// Noise variance giving `snr` = mean per-pixel signal power / noise power.
pub fn snr_to_sigma(clean: &[Image], snr: f64) -> Result<f64> {
    if clean.is_empty() {
        return Err(Error::invalid("empty clean image set"));
    }
    if !(snr > 0.0) {
        return Err(Error::invalid(format!("SNR {snr} must be > 0")));
    }
    let power = clean.iter().map(Image::power).sum::<f64>() / clean.len() as f64;
    if power == 0.0 {
        return Err(Error::Degenerate("all clean images are zero".into()));
    }
    Ok(power / snr)
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationParams {
    pub size: usize,
    pub n: usize,
    pub snr: f64,
    pub noise: NoiseKind,
    pub contrast_range: (f64, f64),
    pub ctfs: Vec<CtfParams>,
    pub phantom: PhantomVolume,
    pub seed: u64,
}

/// Default pixel size: 1.34 * 360 / L Angstrom.
pub fn default_pixel_size(size: usize) -> f64 {
    1.34 * 360.0 / size as f64
}

impl SimulationParams {
    /// Desk-scale defaults: ten defocus groups over 1-4 um, U[0.5, 1.5]
    /// contrasts, default phantom.
    pub fn new(size: usize, n: usize, snr: f64, noise: NoiseKind, seed: u64) -> Self {
        SimulationParams {
            size,
            n,
            snr,
            noise,
            contrast_range: (0.5, 1.5),
            ctfs: defocus_groups(10, 1.0, 4.0, default_pixel_size(size)),
            phantom: PhantomVolume::default(),
            seed,
        }
    }
}

/// Observed images with their ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub size: usize,
    pub images: Vec<Image>,
    pub contrasts: Vec<f64>,
    pub rotations: Vec<Rotation>,
    pub groups: Vec<usize>,
    pub ctfs: Vec<CtfParams>,
    pub noise: NoiseModel,
    pub phantom: PhantomVolume,
}

impl SyntheticDataset {
    pub fn pixel_size(&self) -> f64 {
        self.ctfs[0].pixel_size
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Clean projection `x_i` (before CTF and contrast).
    pub fn clean_image(&self, i: usize) -> Image {
        project_phantom(&self.phantom, &self.rotations[i], self.size)
    }
}

/// Applies the radial CTF on the DFT grid.
pub fn apply_ctf(img: &Image, params: &CtfParams, fft: &Fft2) -> Image {
    let size = img.size() as f64;
    fft.radial_filter(img, |m| ctf_value_per_pixel(params, m / size))
}

/// Draws a dataset `y_i = c_i A_i x_i + e_i` with group `i mod D`.
pub fn simulate(params: &SimulationParams) -> Result<SyntheticDataset> {
    let mut problems = Vec::new();
    if params.size < 8 {
        problems.push(format!("image size {} < 8", params.size));
    }
    if params.n == 0 {
        problems.push("n must be >= 1".to_string());
    }
    if !(params.snr > 0.0) {
        problems.push(format!("SNR {} must be > 0", params.snr));
    }
    if params.ctfs.is_empty() {
        problems.push("at least one CTF group required".to_string());
    }
    for (g, c) in params.ctfs.iter().enumerate() {
        if let Err(e) = c.validate() {
            problems.push(format!("ctf {g}: {e}"));
        }
    }
    if let Err(Error::Config(p)) = params.phantom.validate() {
        problems.extend(p);
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let size = params.size;
    let contrasts = sample_contrasts(
        params.n,
        params.contrast_range.0,
        params.contrast_range.1,
        params.seed,
    )?;
    let rotations: Vec<Rotation> = (0..params.n)
        .map(|i| Rotation::random(&mut substream(params.seed, Domain::Rotation, i as u64)))
        .collect();
    let groups: Vec<usize> = (0..params.n).map(|i| i % params.ctfs.len()).collect();
    let fft = Fft2::new(size);

    let signal = |i: usize| {
        let x = project_phantom(&params.phantom, &rotations[i], size);
        apply_ctf(&x, &params.ctfs[groups[i]], &fft).scaled(contrasts[i])
    };
    // collected before summing so the result does not depend on the thread count
    let powers: Vec<f64> = (0..params.n).into_par_iter().map(|i| signal(i).power()).collect();
    let power = powers.iter().sum::<f64>() / params.n as f64;
    if power == 0.0 {
        return Err(Error::Degenerate("all clean images are zero".into()));
    }
    let noise = NoiseModel {
        kind: params.noise,
        sigma2: power / params.snr,
    };
    let images = (0..params.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(params.seed, Domain::Noise, i as u64);
            add_noise(&signal(i), &noise, &fft, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticDataset {
        size,
        images,
        contrasts,
        rotations,
        groups,
        ctfs: params.ctfs.clone(),
        noise,
        phantom: params.phantom.clone(),
    })
}
