//! Square real images and the 2-D Fourier helpers shared by the pipeline.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Square `L x L` real image, row-major (`data[row * L + col]`).
///
/// Pixel `(row, col)` sits at centered coordinates
/// `(x, y) = (col - L/2, row - L/2)` (integer division), so for even `L`
/// the origin is the pixel just below-right of the geometric center.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(size: usize) -> Self {
        Image {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn from_vec(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::mismatch(size * size, data.len()));
        }
        Ok(Image { size, data })
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let c = (size / 2) as f64;
        let mut data = Vec::with_capacity(size * size);
        for row in 0..size {
            for col in 0..size {
                data.push(f(col as f64 - c, row as f64 - c));
            }
        }
        Image { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Image {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn add_assign(&mut self, other: &Image) {
        debug_assert_eq!(self.size, other.size);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    /// Mean of squared pixel values over the whole frame.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub fn check_size(&self, size: usize) -> Result<()> {
        if self.size != size {
            return Err(Error::mismatch(
                format!("{size}x{size} image"),
                format!("{0}x{0} image", self.size),
            ));
        }
        Ok(())
    }
}

/// Pixels with centered radius at most `radius`, in row-major order.
pub fn disk_mask(size: usize, radius: f64) -> Vec<bool> {
    let c = (size / 2) as f64;
    let r2 = radius * radius;
    let mut mask = Vec::with_capacity(size * size);
    for row in 0..size {
        let y = row as f64 - c;
        for col in 0..size {
            let x = col as f64 - c;
            mask.push(x * x + y * y <= r2);
        }
    }
    mask
}

/// Nearest integer radius `round(|m|)` of every DFT bin, row-major.
pub fn ring_index(size: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(size * size);
    for r in 0..size {
        let fy = signed_freq(r, size);
        for c in 0..size {
            let fx = signed_freq(c, size);
            idx.push((fx * fx + fy * fy).sqrt().round() as usize);
        }
    }
    idx
}

/// Signed DFT frequency index for bin `i` of an `n`-point transform,
/// in `[-n/2, n/2)`.
pub fn signed_freq(i: usize, n: usize) -> f64 {
    if i < n.div_ceil(2) {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Cached forward and inverse plans for `L x L` transforms.
#[derive(Clone)]
pub struct Fft2 {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("size", &self.size).finish()
    }
}

impl Fft2 {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn transform(&self, buf: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.size;
        for row in buf.chunks_exact_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = buf[r * n + c];
            }
            plan.process(&mut col);
            for r in 0..n {
                buf[r * n + c] = col[r];
            }
        }
    }

    /// Unnormalized forward DFT of a real image (origin at index 0).
    pub fn forward(&self, img: &Image) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = img.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, &self.forward);
        buf
    }

    /// Inverse DFT scaled by `1/L^2`, keeping the real part.
    pub fn inverse_real(&self, mut spec: Vec<Complex64>) -> Image {
        self.transform(&mut spec, &self.inverse);
        let norm = 1.0 / (self.size * self.size) as f64;
        Image {
            size: self.size,
            data: spec.into_iter().map(|c| c.re * norm).collect(),
        }
    }

    /// Multiplies the spectrum of `img` by `filter(|m|)`, where `|m|` is the
    /// radial DFT index in bins, and transforms back.
    ///
    /// The spectrum is computed with the origin at pixel 0, so this is a
    /// circular convolution with a radially symmetric kernel; the image
    /// center convention does not matter.
    pub fn radial_filter(&self, img: &Image, filter: impl Fn(f64) -> f64) -> Image {
        let n = self.size;
        let mut spec = self.forward(img);
        for r in 0..n {
            let fy = signed_freq(r, n);
            for c in 0..n {
                let fx = signed_freq(c, n);
                spec[r * n + c] *= filter((fx * fx + fy * fy).sqrt());
            }
        }
        self.inverse_real(spec)
    }
}
