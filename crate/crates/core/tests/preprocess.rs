mod common;

use common::{block0_coeffs, random_image, random_vector, rel_diff, rng};
use cryocontrast::covariance::{BlockCovariance, MeanEstimate};
use cryocontrast::ctf::{ctf_block_operator, BlockOperator, CtfParams};
use cryocontrast::image::{Fft2, Image};
use cryocontrast::phantom::{add_noise, NoiseModel};
use cryocontrast::preprocess::{
    background_subtract, corner_normalize, corner_window_matrix, deconvolve_corner_psd, estimate_corner_psd,
    preprocess_group, whiten_group, CornerMask, NoisePSD,
};
use cryocontrast::restore::cwf_filter;
use cryocontrast::steerable::{FBBasis, FBCoeffs};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn noise_stack(size: usize, n: usize, model: &NoiseModel, seed: u64) -> Vec<Image> {
    let fft = Fft2::new(size);
    let mut r = rng(seed);
    (0..n)
        .map(|_| add_noise(&Image::zeros(size), model, &fft, &mut r).unwrap())
        .collect()
}

/// Corner PSD of `chunks * per_chunk` noise images, generated in chunks to
/// bound memory; equal chunk sizes make the average exact.
fn chunked_psd(size: usize, chunks: u64, per_chunk: usize, model: &NoiseModel, mask: &CornerMask, seed: u64) -> NoisePSD {
    let mut total = Vec::new();
    for c in 0..chunks {
        let psd = estimate_corner_psd(&noise_stack(size, per_chunk, model, seed + c), mask, 0).unwrap();
        total.resize(psd.values.len(), 0.0);
        for (t, v) in total.iter_mut().zip(&psd.values) {
            *t += v / chunks as f64;
        }
    }
    NoisePSD::from_profile(0, size, total).unwrap()
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn op_diff(a: &BlockOperator, b: &BlockOperator) -> f64 {
    a.blocks().iter().zip(b.blocks()).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

#[test]
fn mask_has_the_documented_geometry() {
    for l in [32usize, 33, 128] {
        let m = CornerMask::new(l).unwrap();
        assert_eq!(m.radius(), 0.45 * l as f64);
        let c = (l / 2) as f64;
        for (i, &corner) in m.pixels().iter().enumerate() {
            let (x, y) = ((i % l) as f64 - c, (i / l) as f64 - c);
            assert_eq!(corner, x * x + y * y > m.radius() * m.radius());
        }
    }
}

#[test]
fn white_psd_is_flat() {
    let l = 128;
    let s2 = 2.0;
    let mask = CornerMask::new(l).unwrap();
    let psd = estimate_corner_psd(&noise_stack(l, 1024, &NoiseModel::white(s2), 11), &mask, 0).unwrap();
    for (r, v) in psd.values.iter().enumerate() {
        let rel = v / s2 - 1.0;
        assert!(rel.abs() < 0.1, "radius {r}: {rel}");
    }
}

#[test]
fn colored_psd_shape_is_recovered() {
    let l = 128;
    let model = NoiseModel::colored(1.0);
    let truth = model.psd(l);
    let at = |r: usize| truth(r as f64 / l as f64);
    let mask = CornerMask::new(l).unwrap();
    let psd = estimate_corner_psd(&noise_stack(l, 64, &model, 13), &mask, 0).unwrap();
    let want = at(4) / at(64);
    let got = psd.values[4] / psd.values[64];
    assert!((got / want - 1.0).abs() < 0.15, "{got} vs {want}");

    // The zero ring needs the window leakage removed and a large group.
    let psd = chunked_psd(l, 16, 1024, &model, &mask, 1400);
    let fixed = deconvolve_corner_psd(&psd, &mask).unwrap();
    let want = at(0) / at(64);
    let got = fixed.values[0] / fixed.values[64];
    assert!((got / want - 1.0).abs() < 0.15, "{got} vs {want}");
}

#[test]
fn window_matrix_preserves_flat_spectra() {
    let l = 32;
    let mask = CornerMask::new(l).unwrap();
    let k = corner_window_matrix(&mask);
    for r in 0..k.nrows() {
        assert!((k.row(r).sum() - 1.0).abs() < 1e-10);
        assert!(k.row(r).iter().all(|&v| v > -1e-12));
    }
    let flat = NoisePSD::flat(0, l, 3.0).unwrap();
    let out = deconvolve_corner_psd(&flat, &mask).unwrap();
    assert!(out.values.iter().all(|v| (v - 3.0).abs() < 1e-9));
    assert!(deconvolve_corner_psd(&NoisePSD::flat(0, 16, 1.0).unwrap(), &mask).is_err());
}

#[test]
fn window_matrix_predicts_the_mean_periodogram() {
    let l = 32;
    let mask = CornerMask::new(l).unwrap();
    let k = corner_window_matrix(&mask);
    let model = NoiseModel::colored(1.0);
    let truth = model.psd(l);
    let node_psd = DVector::from_fn(k.nrows(), |r, _| truth(r as f64 / l as f64));
    let fft = Fft2::new(l);
    // PSD linear between integer radii, so the matrix model holds exactly.
    let linear = |m: f64| {
        let (lo, t) = (m.floor(), m - m.floor());
        (1.0 - t) * truth(lo / l as f64) + t * truth((lo + 1.0) / l as f64)
    };
    let shaped = |img: &Image| fft.radial_filter(img, |m| linear(m).sqrt());
    let mut r = rng(15);
    let images: Vec<Image> = (0..20_000).map(|_| shaped(&random_image(l, &mut r))).collect();
    let est = estimate_corner_psd(&images, &mask, 0).unwrap();
    let want = &k * &node_psd;
    for b in 1..=l / 2 {
        assert!((est.values[b] / want[b] - 1.0).abs() < 0.05, "ring {b}");
    }
}

#[test]
fn identical_images_give_the_single_image_psd() {
    let l = 32;
    let mask = CornerMask::new(l).unwrap();
    let img = random_image(l, &mut rng(16));
    let one = estimate_corner_psd(std::slice::from_ref(&img), &mask, 0).unwrap();
    let two = estimate_corner_psd(&[img.clone(), img], &mask, 0).unwrap();
    assert_eq!(one, two);
    assert!(estimate_corner_psd(&[], &mask, 3).is_err());
}

#[test]
fn corner_normalization() {
    let l = 128;
    let mask = CornerMask::new(l).unwrap();
    for img in noise_stack(l, 16, &NoiseModel::white(4.0), 18) {
        let out = corner_normalize(&img, &mask).unwrap();
        let (_, std) = mask.stats(&out).unwrap();
        assert!((std - 1.0).abs() < 0.02);
    }
    let unit = random_image(l, &mut rng(17));
    let (_, std) = mask.stats(&unit).unwrap();
    assert!((std - 1.0).abs() < 3.0 / (mask.count() as f64).sqrt());
    let out = corner_normalize(&unit, &mask).unwrap();
    assert!(max_abs_diff(&out, &unit.scaled(1.0 / std)) < 1e-14);
    assert!(corner_normalize(&Image::from_fn(l, |_, _| 2.0), &mask).is_err());
}

#[test]
fn background_subtraction_examples() {
    let l = 64;
    let mask = CornerMask::new(l).unwrap();
    let img = random_image(l, &mut rng(19));
    let centered = background_subtract(&img, &mask).unwrap();
    assert!(mask.stats(&centered).unwrap().0.abs() < 1e-14);
    assert!(max_abs_diff(&background_subtract(&centered, &mask).unwrap(), &centered) < 1e-14);
    let shifted = Image::from_vec(l, img.data().iter().map(|v| v + 7.5).collect()).unwrap();
    assert!(max_abs_diff(&background_subtract(&shifted, &mask).unwrap(), &centered) < 1e-12);
}

#[test]
fn flat_whitening_is_a_scaling() {
    let l = 32;
    let basis = FBBasis::new(l, 0.5).unwrap();
    let ctf = CtfParams::new(1.5, 1.0);
    let mut r = rng(20);
    let images: Vec<Image> = (0..3).map(|_| random_image(l, &mut r)).collect();
    let a = ctf_block_operator(&ctf, &basis).unwrap();
    let unit = whiten_group(&images, &NoisePSD::flat(0, l, 1.0).unwrap(), &ctf, &basis).unwrap();
    let four = whiten_group(&images, &NoisePSD::flat(0, l, 4.0).unwrap(), &ctf, &basis).unwrap();
    assert!(op_diff(&unit.operator, &a) < 1e-8);
    assert!(op_diff(&four.operator, &a.scaled(0.5)) < 1e-8);
    for (i, img) in images.iter().enumerate() {
        let x = basis.expand(img).unwrap();
        assert!(rel_diff(&unit.coeffs[i], &x) < 1e-8);
        assert!(rel_diff(&four.coeffs[i], &x.scaled(0.5)) < 1e-8);
    }
}

/// Mean `|a|^2` per angular block over a stack of expansions.
fn block_variances(coeffs: &[FBCoeffs]) -> Vec<f64> {
    (0..coeffs[0].num_blocks())
        .map(|k| {
            let total: f64 = coeffs
                .iter()
                .map(|c| c.block(k).iter().map(|v| v.norm_sqr()).sum::<f64>())
                .sum();
            total / (coeffs.len() * coeffs[0].block(k).len()) as f64
        })
        .collect()
}

#[test]
fn whitened_colored_noise_has_flat_block_variances() {
    let l = 32;
    let n = 4000;
    let basis = FBBasis::new(l, 0.5).unwrap();
    let mask = CornerMask::new(l).unwrap();
    let ctf = CtfParams::new(1.5, 1.0);
    let colored = noise_stack(l, n, &NoiseModel::colored(1.0), 21);
    let psd = estimate_corner_psd(&colored, &mask, 0).unwrap();
    let whitened = whiten_group(&colored, &psd, &ctf, &basis).unwrap();
    let white = whiten_group(
        &noise_stack(l, n, &NoiseModel::white(1.0), 22),
        &NoisePSD::flat(0, l, 1.0).unwrap(),
        &ctf,
        &basis,
    )
    .unwrap();
    let got = block_variances(&whitened.coeffs);
    let reference = block_variances(&white.coeffs);
    for (k, (g, w)) in got.iter().zip(&reference).enumerate() {
        assert!((g / w - 1.0).abs() < 0.1, "block {k}: {g} vs {w}");
    }
}

#[test]
fn whitened_model_matches_general_noise_lmmse() {
    // Commuting A and N, as for radial filters in one basis.
    let mut r = rng(23);
    let q = DMatrix::from_fn(4, 4, |_, _| r.sample::<f64, _>(StandardNormal)).qr().q();
    let diag = |v: [f64; 4]| &q * DMatrix::from_diagonal(&DVector::from_row_slice(&v)) * q.transpose();
    let n_vals = [0.5, 1.5, 2.0, 0.8];
    let a = diag([0.9, -0.4, 0.2, 0.7]);
    let noise = diag(n_vals);
    let w = diag(n_vals.map(|v: f64| v.powf(-0.5)));
    let s = common::random_psd(4, 4, &mut r) + DMatrix::identity(4, 4) * 0.1;
    let mu = random_vector(4, &mut r);
    let y = random_vector(4, &mut r);

    let inner = &a * &s * a.transpose() + &noise;
    let want = &mu + &s * a.transpose() * inner.try_inverse().unwrap() * (&y - &a * &mu);

    let wa = BlockOperator::from_blocks(vec![&w * &a]);
    let out = cwf_filter(
        &block0_coeffs(&(&w * &y)),
        &wa,
        &BlockCovariance::new(vec![s]),
        &MeanEstimate { coeffs: block0_coeffs(&mu) },
        1.0,
    )
    .unwrap();
    assert!((out.block0() - want).amax() < 1e-10);
}

#[test]
fn psd_is_estimated_before_background_subtraction() {
    let l = 64;
    let basis = FBBasis::new(l, 0.5).unwrap();
    let mask = CornerMask::new(l).unwrap();
    let ctf = CtfParams::new(1.5, 1.0);
    let images: Vec<Image> = noise_stack(l, 8, &NoiseModel::white(1.0), 24)
        .into_iter()
        .map(|img| Image::from_vec(l, img.data().iter().map(|v| v + 3.0).collect()).unwrap())
        .collect();
    let out = preprocess_group(&images, &mask, &ctf, &basis, 0).unwrap();
    let normalized: Vec<Image> = images.iter().map(|i| corner_normalize(i, &mask).unwrap()).collect();
    assert_eq!(out.psd, estimate_corner_psd(&normalized, &mask, 0).unwrap());
    // The offset shows up as zero-frequency power.
    assert!(out.psd.values[0] > 100.0 * out.psd.values[10]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn background_subtraction_is_idempotent(seed in 0u64..1000, offset in -10.0f64..10.0) {
        let mask = CornerMask::new(24).unwrap();
        let img = random_image(24, &mut rng(seed));
        let img = Image::from_vec(24, img.data().iter().map(|v| v + offset).collect()).unwrap();
        let once = background_subtract(&img, &mask).unwrap();
        let twice = background_subtract(&once, &mask).unwrap();
        prop_assert!(max_abs_diff(&once, &twice) < 1e-12);
    }

    #[test]
    fn normalization_is_scale_invariant(seed in 0u64..1000, a in 0.01f64..100.0) {
        let mask = CornerMask::new(24).unwrap();
        let img = random_image(24, &mut rng(seed));
        let x = corner_normalize(&img, &mask).unwrap();
        let y = corner_normalize(&img.scaled(a), &mask).unwrap();
        prop_assert!(max_abs_diff(&x, &y) < 1e-10);
    }
}
