//! Corner-based normalization, noise PSD estimation, background
//! subtraction and per-group whitening.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::ctf::{ctf_value_per_pixel, radial_operator, BlockOperator, CtfParams};
use crate::error::{Error, Result};
use crate::image::{disk_mask, ring_index, signed_freq, Fft2, Image};
use crate::steerable::{FBBasis, FBCoeffs};

/// Minimum number of corner pixels for per-image statistics.
pub const MIN_CORNER_PIXELS: usize = 100;

/// Relative PSD floor with respect to the median.
pub const PSD_FLOOR: f64 = 1e-6;

/// Largest fraction of floored radii inside the band before whitening is
/// rejected.
pub const MAX_FLOORED_FRACTION: f64 = 0.1;

/// Pixels outside a centered disk of radius `0.45 L`.
#[derive(Clone, Debug, PartialEq)]
pub struct CornerMask {
    size: usize,
    radius: f64,
    mask: Vec<bool>,
}

impl CornerMask {
    pub fn new(size: usize) -> Result<Self> {
        Self::with_radius(size, 0.45 * size as f64)
    }

    pub fn with_radius(size: usize, radius: f64) -> Result<Self> {
        let mask: Vec<bool> = disk_mask(size, radius).into_iter().map(|inside| !inside).collect();
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid(format!(
                "no pixels outside radius {radius} in a {size}x{size} image"
            )));
        }
        Ok(CornerMask { size, radius, mask })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// `true` for corner pixels, row-major.
    pub fn pixels(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn values<'a>(&'a self, img: &'a Image) -> impl Iterator<Item = f64> + 'a {
        img.data().iter().zip(&self.mask).filter(|(_, &m)| m).map(|(v, _)| *v)
    }

    /// Mean and population standard deviation of the corner pixels.
    pub fn stats(&self, img: &Image) -> Result<(f64, f64)> {
        img.check_size(self.size)?;
        let n = self.count() as f64;
        let mean = self.values(img).sum::<f64>() / n;
        let var = self.values(img).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok((mean, var.sqrt()))
    }
}

/// Divides the image by the standard deviation of its corner pixels.
pub fn corner_normalize(img: &Image, mask: &CornerMask) -> Result<Image> {
    if mask.count() < MIN_CORNER_PIXELS {
        return Err(Error::invalid(format!(
            "corner mask has {} pixels, need at least {MIN_CORNER_PIXELS}",
            mask.count()
        )));
    }
    let (_, std) = mask.stats(img)?;
    if !(std > 0.0) {
        return Err(Error::Degenerate("constant corner pixels".into()));
    }
    Ok(img.scaled(1.0 / std))
}

/// Subtracts the mean of the corner pixels.
pub fn background_subtract(img: &Image, mask: &CornerMask) -> Result<Image> {
    let (mean, _) = mask.stats(img)?;
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v -= mean);
    Ok(out)
}

/// Radially averaged noise PSD of one defocus group.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePSD {
    pub group: usize,
    /// Image size the PSD was estimated on.
    pub size: usize,
    /// PSD at integer Fourier radius `r` (in DFT bins), after flooring.
    pub values: Vec<f64>,
    /// Radii where the floor replaced the estimate.
    pub floored: Vec<usize>,
}

impl NoisePSD {
    /// Radial profile with `max(psd, floor * median)` applied.
    pub fn from_profile(group: usize, size: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("noise PSD".into()));
        }
        let mut sorted = raw.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        if !(median > 0.0) {
            return Err(Error::Degenerate("noise PSD median is not positive".into()));
        }
        let floor = PSD_FLOOR * median;
        let mut floored = Vec::new();
        let values = raw
            .into_iter()
            .enumerate()
            .map(|(r, v)| {
                if v < floor {
                    floored.push(r);
                    floor
                } else {
                    v
                }
            })
            .collect();
        Ok(NoisePSD {
            group,
            size,
            values,
            floored,
        })
    }

    /// Flat PSD `level` on all radii.
    pub fn flat(group: usize, size: usize, level: f64) -> Result<Self> {
        let nbins = ring_index(size).into_iter().max().unwrap_or(0) + 1;
        Self::from_profile(group, size, vec![level; nbins])
    }

    /// Linear interpolation at radius `m` in DFT bins, clamped at the ends.
    pub fn at_radius(&self, m: f64) -> f64 {
        let last = self.values.len() - 1;
        if m <= 0.0 {
            return self.values[0];
        }
        if m >= last as f64 {
            return self.values[last];
        }
        let i = m.floor() as usize;
        let t = m - i as f64;
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }

    /// PSD at `xi` cycles per pixel.
    pub fn at(&self, xi: f64) -> f64 {
        self.at_radius(xi * self.size as f64)
    }

    /// Fraction of floored radii up to `max_radius`.
    pub fn floored_fraction(&self, max_radius: f64) -> f64 {
        let total = self.values.len().min(max_radius.floor() as usize + 1);
        let hit = self.floored.iter().filter(|&&r| (r as f64) <= max_radius).count();
        hit as f64 / total.max(1) as f64
    }
}

/// Mask-corrected periodogram of the corner pixels, radially averaged and
/// averaged over the images of one group. Must run before background
/// subtraction, which would remove the zero-frequency power.
pub fn estimate_corner_psd(images: &[Image], mask: &CornerMask, group: usize) -> Result<NoisePSD> {
    if images.is_empty() {
        return Err(Error::invalid(format!("defocus group {group} has no images")));
    }
    let size = mask.size();
    let fft = Fft2::new(size);
    let idx = ring_index(size);
    let nbins = idx.iter().copied().max().unwrap_or(0) + 1;
    let mut counts = vec![0usize; nbins];
    for &r in &idx {
        counts[r] += 1;
    }
    let scale = 1.0 / mask.count() as f64;
    let sums = images
        .par_iter()
        .map(|img| {
            img.check_size(size)?;
            let masked: Vec<f64> = img
                .data()
                .iter()
                .zip(mask.pixels())
                .map(|(v, &m)| if m { *v } else { 0.0 })
                .collect();
            let spec = fft.forward(&Image::from_vec(size, masked)?);
            let mut bins = vec![0.0; nbins];
            for (f, &r) in spec.iter().zip(&idx) {
                bins[r] += f.norm_sqr() * scale;
            }
            Ok(bins)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut profile = vec![0.0; nbins];
    for bins in &sums {
        for (p, b) in profile.iter_mut().zip(bins) {
            *p += b;
        }
    }
    let n = images.len() as f64;
    for (p, &c) in profile.iter_mut().zip(&counts) {
        *p /= n * c as f64;
    }
    NoisePSD::from_profile(group, size, profile)
}

/// Expected radial corner periodogram as a linear map of a PSD that is
/// piecewise linear in `|m|` between integer radii: entry `(r, s)` is the
/// mean over ring `r` of the mask window `|M_hat|^2 / (count L^2)`
/// circularly convolved with the hat function centered at radius `s`.
/// Rows sum to one, so a flat PSD maps to itself.
pub fn corner_window_matrix(mask: &CornerMask) -> DMatrix<f64> {
    let size = mask.size();
    let fft = Fft2::new(size);
    let grid = |f: &dyn Fn(usize) -> f64| Image::from_vec(size, (0..size * size).map(f).collect()).expect("square grid");
    let window: Vec<f64> = fft
        .forward(&grid(&|i| if mask.pixels()[i] { 1.0 } else { 0.0 }))
        .iter()
        .map(|c| c.norm_sqr())
        .collect();
    let window_spec = fft.forward(&Image::from_vec(size, window).expect("square grid"));
    let idx = ring_index(size);
    let nbins = idx.iter().copied().max().unwrap_or(0) + 1;
    let mut counts = vec![0usize; nbins];
    for &r in &idx {
        counts[r] += 1;
    }
    let radius: Vec<f64> = (0..size * size)
        .map(|i| {
            let (fy, fx) = (signed_freq(i / size, size), signed_freq(i % size, size));
            (fx * fx + fy * fy).sqrt()
        })
        .collect();
    let norm = 1.0 / (mask.count() as f64 * (size * size) as f64);
    let columns: Vec<Vec<f64>> = (0..nbins)
        .into_par_iter()
        .map(|s| {
            let hat = fft.forward(&grid(&|i| (1.0 - (radius[i] - s as f64).abs()).max(0.0)));
            let conv = fft.inverse_real(window_spec.iter().zip(&hat).map(|(a, b)| a * b).collect());
            let mut col = vec![0.0; nbins];
            for (v, &r) in conv.data().iter().zip(&idx) {
                col[r] += v * norm / counts[r] as f64;
            }
            col
        })
        .collect();
    DMatrix::from_fn(nbins, nbins, |r, s| columns[s][r])
}

/// Removes the leakage of the corner window from a radial PSD estimate by
/// solving `K p = psd` with [`corner_window_matrix`]. Unbiased for spectra
/// linear between integer radii, but noisier than the raw estimate at low
/// radii, so it needs larger groups.
pub fn deconvolve_corner_psd(psd: &NoisePSD, mask: &CornerMask) -> Result<NoisePSD> {
    if psd.size != mask.size() {
        return Err(Error::mismatch(mask.size(), psd.size));
    }
    let k = corner_window_matrix(mask);
    if k.nrows() != psd.values.len() {
        return Err(Error::mismatch(k.nrows(), psd.values.len()));
    }
    let p = k
        .lu()
        .solve(&DVector::from_column_slice(&psd.values))
        .ok_or_else(|| Error::Singular("corner window matrix".into()))?;
    NoisePSD::from_profile(psd.group, psd.size, p.iter().copied().collect())
}

/// Multiplies the spectrum by `psd(xi)^{-1/2}`, `xi` in cycles per pixel.
pub fn whiten_image(img: &Image, fft: &Fft2, psd: impl Fn(f64) -> f64) -> Image {
    let size = fft.size() as f64;
    fft.radial_filter(img, |m| psd(m / size).powf(-0.5))
}

/// Whitened coefficients and the matching operator of one group.
#[derive(Clone, Debug)]
pub struct WhitenedGroup {
    pub coeffs: Vec<FBCoeffs>,
    /// Operator of multiplication by `ctf * psd^{-1/2}`.
    pub operator: BlockOperator,
}

/// Multiplies every image by `psd^{-1/2}` on the DFT grid and expands it;
/// the operator is the radial product of the CTF and the whitening filter.
pub fn whiten_group(images: &[Image], psd: &NoisePSD, ctf: &CtfParams, basis: &FBBasis) -> Result<WhitenedGroup> {
    ctf.validate()?;
    let size = basis.size();
    if psd.size != size {
        return Err(Error::mismatch(size, psd.size));
    }
    let band = basis.band_limit() * size as f64;
    let fraction = psd.floored_fraction(band);
    if fraction > MAX_FLOORED_FRACTION {
        return Err(Error::Degenerate(format!(
            "PSD floor active on {:.0}% of the band of group {}; whitening is unreliable",
            100.0 * fraction,
            psd.group
        )));
    }
    if !psd.floored.is_empty() {
        warn!("PSD of group {} floored at radii {:?}", psd.group, psd.floored);
    }
    let fft = Fft2::new(size);
    let coeffs = images
        .par_iter()
        .map(|img| {
            img.check_size(size)?;
            basis.expand(&whiten_image(img, &fft, |xi| psd.at(xi)))
        })
        .collect::<Result<Vec<_>>>()?;
    let operator = radial_operator(basis, |xi| ctf_value_per_pixel(ctf, xi) / psd.at(xi).sqrt());
    Ok(WhitenedGroup { coeffs, operator })
}

/// Output of the corner pipeline for one group.
#[derive(Clone, Debug)]
pub struct PreprocessedGroup {
    pub psd: NoisePSD,
    pub whitened: WhitenedGroup,
}

/// Normalize, estimate the PSD, subtract the background, whiten.
pub fn preprocess_group(
    images: &[Image],
    mask: &CornerMask,
    ctf: &CtfParams,
    basis: &FBBasis,
    group: usize,
) -> Result<PreprocessedGroup> {
    let normalized = images
        .par_iter()
        .map(|img| corner_normalize(img, mask))
        .collect::<Result<Vec<_>>>()?;
    let psd = estimate_corner_psd(&normalized, mask, group)?;
    let subtracted = normalized
        .par_iter()
        .map(|img| background_subtract(img, mask))
        .collect::<Result<Vec<_>>>()?;
    let whitened = whiten_group(&subtracted, &psd, ctf, basis)?;
    Ok(PreprocessedGroup { psd, whitened })
}
