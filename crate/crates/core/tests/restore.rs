mod common;

use common::{block0_coeffs, random_psd, random_vector, rng};
use cryocontrast::covariance::{BlockCovariance, MeanEstimate};
use cryocontrast::ctf::BlockOperator;
use cryocontrast::restore::{
    cwf_filter, estimate_contrasts, normalize_contrasts, restore_2stage, restore_normalize, restore_with_model,
    run_algorithm1, ContrastEstimates, ContrastMethod, CwfFilter, RefineMethod, RestoreOption, SolverOptions,
    CONTRAST_FLOOR,
};
use cryocontrast::steerable::{pixel_sum_fb, FBBasis, FBCoeffs, OnesVector};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn mean0(mu: &DVector<f64>) -> MeanEstimate {
    MeanEstimate { coeffs: block0_coeffs(mu) }
}

fn op0(b: &DMatrix<f64>) -> BlockOperator {
    BlockOperator::from_blocks(vec![b.clone()])
}

fn cov0(s: &DMatrix<f64>) -> BlockCovariance {
    BlockCovariance::new(vec![s.clone()])
}

fn vec0(c: &FBCoeffs) -> DVector<f64> {
    c.block0()
}

/// `mu + S B^T (B S B^T + s2 I)^{-1} (y - B mu)` by explicit inversion.
fn dense_lmmse(y: &DVector<f64>, b: &DMatrix<f64>, s: &DMatrix<f64>, mu: &DVector<f64>, s2: f64) -> DVector<f64> {
    let p = y.len();
    let inner = b * s * b.transpose() + DMatrix::identity(p, p) * s2;
    mu + s * b.transpose() * inner.try_inverse().unwrap() * (y - b * mu)
}

#[test]
fn zero_covariance_returns_the_mean() {
    let mut r = rng(1);
    let mu = random_vector(4, &mut r);
    let b = random_psd(4, 4, &mut r);
    let y = random_vector(4, &mut r);
    let out = cwf_filter(&block0_coeffs(&y), &op0(&b), &cov0(&DMatrix::zeros(4, 4)), &mean0(&mu), 0.5).unwrap();
    assert!((vec0(&out) - &mu).amax() < 1e-15);
}

#[test]
fn noiseless_limit_returns_the_data() {
    let mut r = rng(2);
    let s = random_psd(4, 4, &mut r) + DMatrix::identity(4, 4);
    let mu = random_vector(4, &mut r);
    let y = random_vector(4, &mut r);
    let ident = op0(&DMatrix::identity(4, 4));
    let mut prev = f64::INFINITY;
    for s2 in [1e-2, 1e-5, 1e-8] {
        let out = cwf_filter(&block0_coeffs(&y), &ident, &cov0(&s), &mean0(&mu), s2).unwrap();
        let err = (vec0(&out) - &y).norm();
        assert!(err < prev);
        prev = err;
    }
    assert!(prev < 1e-7);
}

#[test]
fn two_by_two_toy_matches_dense_formula() {
    let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let b = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, -0.3]);
    let mu = DVector::from_vec(vec![1.0, -0.5]);
    let y = DVector::from_vec(vec![0.3, 0.7]);
    let s2 = 0.25;
    let out = cwf_filter(&block0_coeffs(&y), &op0(&b), &cov0(&s), &mean0(&mu), s2).unwrap();
    let want = dense_lmmse(&y, &b, &s, &mu, s2);
    assert!((vec0(&out) - &want).amax() <= 1e-12, "{} vs {}", vec0(&out), want);
}

#[test]
fn complex_blocks_filter_real_and_imaginary_parts_alike() {
    let mut r = rng(3);
    let s = random_psd(3, 3, &mut r);
    let b = random_psd(3, 3, &mut r);
    let mu = DVector::zeros(3);
    let yr = random_vector(3, &mut r);
    let yi = random_vector(3, &mut r);
    let y = FBCoeffs::from_blocks(vec![
        vec![Complex64::new(0.0, 0.0); 3],
        (0..3).map(|j| Complex64::new(yr[j], yi[j])).collect(),
    ]);
    let op = BlockOperator::from_blocks(vec![b.clone(), b.clone()]);
    let cov = BlockCovariance::new(vec![s.clone(), s.clone()]);
    let mean = MeanEstimate {
        coeffs: FBCoeffs::from_blocks(vec![vec![Complex64::new(0.0, 0.0); 3]; 2]),
    };
    let out = cwf_filter(&y, &op, &cov, &mean, 0.3).unwrap();
    let wr = dense_lmmse(&yr, &b, &s, &mu, 0.3);
    let wi = dense_lmmse(&yi, &b, &s, &mu, 0.3);
    for j in 0..3 {
        assert!((out.block(1)[j].re - wr[j]).abs() < 1e-12);
        assert!((out.block(1)[j].im - wi[j]).abs() < 1e-12);
    }
}

/// `E[1^T cx | y]` from the joint covariance of `(1^T cx, y)`.
fn conditional_pixel_sum(
    y: &DVector<f64>,
    b: &DMatrix<f64>,
    s: &DMatrix<f64>,
    mu: &DVector<f64>,
    s2: f64,
    ones: &DVector<f64>,
) -> f64 {
    let p = y.len();
    let mut k = DMatrix::zeros(p + 1, p + 1);
    k[(0, 0)] = ones.dot(&(s * ones));
    let cross = b * s * ones;
    for i in 0..p {
        k[(0, i + 1)] = cross[i];
        k[(i + 1, 0)] = cross[i];
    }
    k.view_mut((1, 1), (p, p)).copy_from(&(b * s * b.transpose() + DMatrix::identity(p, p) * s2));
    let kbb = k.view((1, 1), (p, p)).into_owned();
    let kab = k.view((0, 1), (1, p)).into_owned();
    let resid = y - b * mu;
    ones.dot(mu) + (kab * kbb.try_inverse().unwrap() * resid)[0]
}

struct Toy {
    s: DMatrix<f64>,
    mu: DVector<f64>,
    ones: DVector<f64>,
    ops: Vec<DMatrix<f64>>,
    s2: f64,
}

fn toy(seed: u64) -> Toy {
    let mut r = rng(seed);
    Toy {
        s: random_psd(4, 4, &mut r) * 0.3,
        mu: random_vector(4, &mut r).map(|v| v + 2.0),
        ones: random_vector(4, &mut r).map(|v| v.abs() + 0.5),
        ops: (0..2).map(|_| random_psd(4, 4, &mut r) * 0.5).collect(),
        s2: 0.2,
    }
}

fn toy_data(t: &Toy, n: usize, seed: u64) -> (Vec<FBCoeffs>, Vec<usize>) {
    let mut r = rng(seed);
    let l = t.s.clone().cholesky().unwrap().l();
    let mut ys = Vec::new();
    let mut groups = Vec::new();
    for i in 0..n {
        let g = i % t.ops.len();
        let z = DVector::from_fn(4, |_, _| r.sample::<f64, _>(StandardNormal));
        let e = DVector::from_fn(4, |_, _| r.sample::<f64, _>(StandardNormal)) * t.s2.sqrt();
        ys.push(block0_coeffs(&(&t.ops[g] * (&t.mu + &l * z) + e)));
        groups.push(g);
    }
    (ys, groups)
}

fn toy_contrasts(t: &Toy, ys: &[FBCoeffs], groups: &[usize]) -> ContrastEstimates {
    let ops: Vec<BlockOperator> = t.ops.iter().map(op0).collect();
    estimate_contrasts(
        ys,
        groups,
        &ops,
        &cov0(&t.s),
        &mean0(&t.mu),
        t.s2,
        &OnesVector::from_values(t.ones.clone()),
        ContrastMethod::OracleCov,
    )
    .unwrap()
}

#[test]
fn contrasts_match_gaussian_conditioning() {
    let t = toy(4);
    let (ys, groups) = toy_data(&t, 12, 5);
    let est = toy_contrasts(&t, &ys, &groups);
    let raw: Vec<f64> = ys
        .iter()
        .zip(&groups)
        .map(|(y, &g)| conditional_pixel_sum(&vec0(y), &t.ops[g], &t.s, &t.mu, t.s2, &t.ones))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    for (c, w) in est.values.iter().zip(&raw) {
        assert!((c - w / mean).abs() <= 1e-10, "{c} vs {}", w / mean);
    }
    assert!((est.normalization - mean).abs() <= 1e-10 * mean.abs());
}

#[test]
fn contrasts_equal_the_filtered_pixel_sums() {
    let t = toy(6);
    let (ys, groups) = toy_data(&t, 8, 7);
    let est = toy_contrasts(&t, &ys, &groups);
    let ones = OnesVector::from_values(t.ones.clone());
    let raw: Vec<f64> = ys
        .iter()
        .zip(&groups)
        .map(|(y, &g)| {
            let x = cwf_filter(y, &op0(&t.ops[g]), &cov0(&t.s), &mean0(&t.mu), t.s2).unwrap();
            pixel_sum_fb(&x, &ones).unwrap()
        })
        .collect();
    let want = normalize_contrasts(&raw, ContrastMethod::OracleCov).unwrap();
    for (a, b) in est.values.iter().zip(&want.values) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn noiseless_identity_recovers_relative_contrasts() {
    // x_i = mu + z_i with z_i orthogonal to the ones vector: equal pixel sums.
    let mut r = rng(8);
    let p = 5;
    let ones = random_vector(p, &mut r).map(|v| v.abs() + 0.5);
    let u = ones.normalize();
    let proj = DMatrix::identity(p, p) - &u * u.transpose();
    let mu = random_vector(p, &mut r) + &ones;
    let sx = &proj * random_psd(p, p, &mut r) * &proj;
    let var = 1.0 / 12.0;
    let scx = &sx * (1.0 + var) + &mu * mu.transpose() * var;
    let n = 10;
    let c: Vec<f64> = (0..n).map(|i| 0.55 + 0.1 * i as f64).collect();
    let ys: Vec<FBCoeffs> = c
        .iter()
        .map(|&ci| {
            let z = &sx * random_vector(p, &mut r);
            block0_coeffs(&((&mu + z) * ci))
        })
        .collect();
    let est = estimate_contrasts(
        &ys,
        &vec![0; n],
        &[op0(&DMatrix::identity(p, p))],
        &cov0(&scx),
        &mean0(&mu),
        0.0,
        &OnesVector::from_values(ones),
        ContrastMethod::OracleCov,
    )
    .unwrap();
    let cbar = c.iter().sum::<f64>() / n as f64;
    for (e, t) in est.values.iter().zip(&c) {
        assert!((e - t / cbar).abs() <= 1e-10, "{e} vs {}", t / cbar);
    }
}

#[test]
fn normalization_examples() {
    let mut r = rng(9);
    let x = block0_coeffs(&random_vector(4, &mut r));
    let ones = OnesVector::from_values(random_vector(4, &mut r).map(f64::abs));
    assert_eq!(restore_normalize(&x, 1.0, CONTRAST_FLOOR).unwrap(), x);
    let half = restore_normalize(&x, 2.0, CONTRAST_FLOOR).unwrap();
    assert_eq!(pixel_sum_fb(&half, &ones).unwrap() * 2.0, pixel_sum_fb(&x, &ones).unwrap());
    assert!(restore_normalize(&x, 0.05, CONTRAST_FLOOR).is_none());
    // exact contrasts make every normalized pixel sum equal
    let base = pixel_sum_fb(&x, &ones).unwrap();
    for c in [0.6, 0.93, 1.41] {
        let scaled = x.scaled(c);
        let back = restore_normalize(&scaled, c, CONTRAST_FLOOR).unwrap();
        assert!((pixel_sum_fb(&back, &ones).unwrap() - base).abs() <= 1e-10 * base.abs());
    }
}

#[test]
fn two_stage_with_unit_contrast_is_one_stage() {
    let t = toy(10);
    let (ys, _) = toy_data(&t, 3, 11);
    let op = op0(&t.ops[0]);
    for y in &ys {
        let one = cwf_filter(y, &op, &cov0(&t.s), &mean0(&t.mu), t.s2).unwrap();
        let two = restore_2stage(y, &op, 1.0, &cov0(&t.s), &mean0(&t.mu), t.s2, CONTRAST_FLOOR).unwrap();
        assert!((vec0(&one) - vec0(&two)).amax() <= 1e-13);
    }
    assert!(restore_2stage(&ys[0], &op, 0.01, &cov0(&t.s), &mean0(&t.mu), t.s2, CONTRAST_FLOOR).is_err());
}

#[test]
fn two_stage_matches_rescaled_operator_lmmse() {
    let t = toy(12);
    let u = t.ones.normalize();
    let proj = DMatrix::identity(4, 4) - &u * u.transpose();
    let sx = &proj * &t.s * &proj;
    let (ys, _) = toy_data(&t, 4, 13);
    let ones = OnesVector::from_values(t.ones.clone());
    let mut sums = Vec::new();
    for (i, y) in ys.iter().enumerate() {
        let c = 0.7 + 0.2 * i as f64;
        let out = restore_2stage(y, &op0(&t.ops[1]), c, &cov0(&sx), &mean0(&t.mu), t.s2, CONTRAST_FLOOR).unwrap();
        let want = dense_lmmse(&vec0(y), &(&t.ops[1] * c), &sx, &t.mu, t.s2);
        assert!((vec0(&out) - &want).amax() <= 1e-10);
        sums.push(pixel_sum_fb(&out, &ones).unwrap());
    }
    let target = t.ones.dot(&t.mu);
    for s in sums {
        assert!((s - target).abs() <= 1e-6 * target.abs());
    }
}

/// Block-0 dataset on a real basis: x_i = mu + z_i with z_i orthogonal to 1_FB.
fn fb_dataset(basis: &FBBasis, c: &[f64], seed: u64) -> Vec<FBCoeffs> {
    let mut r = rng(seed);
    let ones = basis.ones_vector().block0().clone();
    let p = ones.len();
    let u = ones.normalize();
    let proj = DMatrix::identity(p, p) - &u * u.transpose();
    let mu = ones.clone() * 0.3 + random_vector(p, &mut r) * 0.1;
    c.iter()
        .map(|&ci| {
            let mut x = common::random_coeffs(basis, &mut r);
            x.set_block0(&((&mu + &proj * random_vector(p, &mut r)) * ci));
            x
        })
        .collect()
}

#[test]
fn degenerate_unit_contrasts_noiseless() {
    let basis = FBBasis::new(16, 0.5).unwrap();
    let n = 200;
    let ys = fb_dataset(&basis, &vec![1.0; n], 14);
    let ops = [BlockOperator::identity(&basis)];
    let ones = basis.ones_vector();
    for method in [RefineMethod::Gs, RefineMethod::Sdp] {
        let out = run_algorithm1(&ys, &vec![0; n], &ops, 1e-12, &ones, method, &SolverOptions::default()).unwrap();
        assert!(out.model.var.var_c <= 1e-6, "{}", out.model.var.var_c);
        assert!(out.contrasts.values.iter().all(|c| (c - 1.0).abs() <= 1e-6));
    }
}

#[test]
fn normalization_with_unit_contrasts_is_plain_cwf() {
    let basis = FBBasis::new(16, 0.5).unwrap();
    let c: Vec<f64> = (0..60).map(|i| 0.5 + (i % 10) as f64 / 10.0).collect();
    let mut ys = fb_dataset(&basis, &c, 15);
    let mut r = rng(16);
    for y in &mut ys {
        y.axpy(0.3, &common::random_coeffs(&basis, &mut r));
    }
    let groups = vec![0; ys.len()];
    let ops = [BlockOperator::identity(&basis)];
    let ones = basis.ones_vector();
    let opts = SolverOptions::default();
    let out = run_algorithm1(&ys, &groups, &ops, 0.09, &ones, RefineMethod::Gs, &opts).unwrap();
    let moments = cryocontrast::covariance::GroupMoments::new(&ys, &groups, 1).unwrap();
    let est = cryocontrast::restore::estimate_model(&moments, &ops, 0.09, &opts).unwrap();
    let model = cryocontrast::restore::refine_model(&est, &ones, RefineMethod::Gs, &opts).unwrap();
    let unit = ContrastEstimates {
        values: vec![1.0; ys.len()],
        method: ContrastMethod::CwfGs,
        normalization: 1.0,
    };
    let restored =
        restore_with_model(&ys, &groups, &ops, 0.09, &est.mean, &model, &unit, RestoreOption::Normalization, CONTRAST_FLOOR)
            .unwrap();
    let filter = CwfFilter::new(&ops, &model.sigma_cx_rf, &est.mean, 0.09).unwrap();
    for (y, x) in ys.iter().zip(&restored.coeffs) {
        let want = filter.apply(0, y).unwrap();
        assert_eq!(x.as_ref().unwrap(), &want);
    }
    // the 2-stage option gives constant pixel sums
    let two = restore_with_model(
        &ys,
        &groups,
        &ops,
        0.09,
        &est.mean,
        &model,
        &out.contrasts,
        RestoreOption::TwoStage,
        CONTRAST_FLOOR,
    )
    .unwrap();
    let sums: Vec<f64> = two.coeffs.iter().flatten().map(|x| pixel_sum_fb(x, &ones).unwrap()).collect();
    let target = pixel_sum_fb(&est.mean.coeffs, &ones).unwrap();
    assert!(sums.iter().all(|s| (s - target).abs() <= 1e-6 * target.abs()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_filter_is_affine(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let t = toy(seed);
        let mut r = rng(seed ^ 1);
        let y1 = random_vector(4, &mut r);
        let y2 = random_vector(4, &mut r);
        let f = |y: &DVector<f64>| vec0(&cwf_filter(&block0_coeffs(y), &op0(&t.ops[0]), &cov0(&t.s), &mean0(&t.mu), t.s2).unwrap());
        let lhs = f(&(&y1 * a + &y2 * b));
        let rhs = f(&y1) * a + f(&y2) * b + f(&DVector::zeros(4)) * (1.0 - a - b);
        prop_assert!((&lhs - &rhs).amax() <= 1e-9 * (1.0 + lhs.amax()));
    }

    #[test]
    fn prop_contrasts_have_unit_mean(seed in any::<u64>()) {
        let t = toy(seed);
        let (ys, groups) = toy_data(&t, 20, seed ^ 2);
        let est = toy_contrasts(&t, &ys, &groups);
        let mean = est.values.iter().sum::<f64>() / est.values.len() as f64;
        prop_assert!((mean - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn prop_contrasts_are_scale_invariant(seed in any::<u64>(), a in 0.1f64..10.0) {
        let t = toy(seed);
        let (ys, groups) = toy_data(&t, 10, seed ^ 3);
        let base = toy_contrasts(&t, &ys, &groups);
        let scaled_t = Toy { s: &t.s * (a * a), mu: &t.mu * a, ones: t.ones.clone(), ops: t.ops.clone(), s2: t.s2 * a * a };
        let ys_a: Vec<FBCoeffs> = ys.iter().map(|y| y.scaled(a)).collect();
        let scaled = toy_contrasts(&scaled_t, &ys_a, &groups);
        for (x, y) in base.values.iter().zip(&scaled.values) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
        }
    }
}
