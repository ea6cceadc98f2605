//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cryocontrast::image::Image;
use cryocontrast::steerable::{FBBasis, FBCoeffs};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `J_n(x) = (1/pi) int_0^pi cos(n t - x sin t) dt` by the trapezoid rule,
/// which is spectrally accurate for this periodic integrand.
pub fn bessel_j_integral(n: usize, x: f64) -> f64 {
    let m = 400 + 2 * (x.abs() as usize + n);
    let h = std::f64::consts::PI / m as f64;
    let f = |t: f64| (n as f64 * t - x * t.sin()).cos();
    let mut s = 0.5 * (f(0.0) + f(std::f64::consts::PI));
    for i in 1..m {
        s += f(i as f64 * h);
    }
    s * h / std::f64::consts::PI
}

/// Zeros of `J_k` in `(0, upper]` by scanning and bisecting the integral form.
pub fn bessel_zeros_oracle(k: usize, upper: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let step = 0.1;
    let mut a = (k as f64).max(1e-6);
    let mut fa = bessel_j_integral(k, a);
    while a < upper {
        let b = (a + step).min(upper);
        let fb = bessel_j_integral(k, b);
        if fa != 0.0 && fa.signum() != fb.signum() {
            let (mut lo, mut hi, mut flo) = (a, b, fa);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                let fm = bessel_j_integral(k, mid);
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            out.push(0.5 * (lo + hi));
        }
        a = b;
        fa = fb;
    }
    out
}

/// Random coefficients of a real image (block 0 real).
pub fn random_coeffs(basis: &FBBasis, rng: &mut impl Rng) -> FBCoeffs {
    let blocks = basis
        .block_sizes()
        .iter()
        .enumerate()
        .map(|(k, &q)| {
            (0..q)
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = if k == 0 { 0.0 } else { rng.sample(StandardNormal) };
                    Complex64::new(re, im)
                })
                .collect()
        })
        .collect();
    FBCoeffs::from_blocks(blocks)
}

pub fn random_image(size: usize, rng: &mut impl Rng) -> Image {
    let data = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();
    Image::from_vec(size, data).unwrap()
}

pub fn random_symmetric(p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a + a.transpose()) * 0.5
}

pub fn random_psd(p: usize, rank: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose()
}

pub fn random_vector(p: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Relative coefficient difference `|a - b| / |b|`.
pub fn rel_diff(a: &FBCoeffs, b: &FBCoeffs) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    d.norm() / b.norm()
}

/// Block-0-only coefficients from a real vector.
pub fn block0_coeffs(v: &DVector<f64>) -> FBCoeffs {
    FBCoeffs::from_blocks(vec![v.iter().map(|&x| Complex64::new(x, 0.0)).collect()])
}
