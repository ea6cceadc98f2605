mod common;

use common::{random_psd, random_symmetric, random_vector, rng};
use cryocontrast::covariance::{
    constraint_residuals, estimate_covariance, estimate_mean, estimate_var_c, recombine, refine_gs, refine_sdp,
    split_sigma_x, BlockCovariance, CovarianceOptions, MeanEstimate,
};
use cryocontrast::ctf::{ctf_block_operator, BlockOperator, CtfParams};
use cryocontrast::phantom::default_pixel_size;
use cryocontrast::steerable::{FBBasis, FBCoeffs};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn no_shrink() -> CovarianceOptions {
    CovarianceOptions {
        cg_tol: 1e-12,
        cg_maxiter: 2000,
        shrink: false,
    }
}

fn noisy_coeffs(basis: &FBBasis, n: usize, seed: u64) -> Vec<FBCoeffs> {
    let mut r = rng(seed);
    (0..n).map(|_| common::random_coeffs(basis, &mut r)).collect()
}

/// `Re((y - m)(y - m)^*)` summed and divided by `n`, per block.
fn sample_cov(ys: &[FBCoeffs], mean: &FBCoeffs) -> Vec<DMatrix<f64>> {
    (0..mean.num_blocks())
        .map(|k| {
            let q = mean.block(k).len();
            let mut s = DMatrix::zeros(q, q);
            for y in ys {
                let d: Vec<Complex64> = y.block(k).iter().zip(mean.block(k)).map(|(a, b)| a - b).collect();
                for i in 0..q {
                    for j in 0..q {
                        s[(i, j)] += (d[i] * d[j].conj()).re;
                    }
                }
            }
            s / ys.len() as f64
        })
        .collect()
}

fn two_group_ops(basis: &FBBasis) -> Vec<BlockOperator> {
    [1.2, 3.1]
        .iter()
        .map(|&d| ctf_block_operator(&CtfParams::new(d, default_pixel_size(basis.size())), basis).unwrap())
        .collect()
}

#[test]
fn identity_operators_give_the_sample_mean() {
    let basis = FBBasis::new(16, 0.5).unwrap();
    let ys = noisy_coeffs(&basis, 40, 1);
    let mean = estimate_mean(&ys, &vec![0; 40], &[BlockOperator::identity(&basis)]).unwrap();
    let mut want = basis.zeros();
    for y in &ys {
        want.axpy(1.0 / 40.0, y);
    }
    assert!(common::rel_diff(&mean.coeffs, &want) < 1e-9);
}

#[test]
fn single_image_mean_inverts_the_operator() {
    let basis = FBBasis::new(16, 0.5).unwrap();
    let op = two_group_ops(&basis).remove(1);
    let x = noisy_coeffs(&basis, 1, 2).remove(0);
    let y = op.apply(&x).unwrap();
    let mean = estimate_mean(&[y], &[0], std::slice::from_ref(&op)).unwrap();
    let back = op.apply(&mean.coeffs).unwrap();
    // the 1e-10 ridge perturbs the solve in poorly conditioned directions only
    assert!(common::rel_diff(&back, &op.apply(&x).unwrap()) < 1e-6);
}

#[test]
fn mean_matches_stacked_least_squares() {
    let basis = FBBasis::new(16, 0.5).unwrap();
    let ops = two_group_ops(&basis);
    let ys = noisy_coeffs(&basis, 30, 3);
    let groups: Vec<usize> = (0..30).map(|i| i % 2).collect();
    let mean = estimate_mean(&ys, &groups, &ops).unwrap();
    for k in 0..basis.num_blocks() {
        let q = basis.block(k).len();
        // stack [B_{g(i)}] and solve the real and imaginary parts by SVD
        let mut a = DMatrix::zeros(30 * q, q);
        let mut re = DVector::zeros(30 * q);
        let mut im = DVector::zeros(30 * q);
        for (i, y) in ys.iter().enumerate() {
            a.view_mut((i * q, 0), (q, q)).copy_from(ops[groups[i]].block(k));
            for (j, v) in y.block(k).iter().enumerate() {
                re[i * q + j] = v.re;
                im[i * q + j] = v.im;
            }
        }
        let svd = a.svd(true, true);
        let xr = svd.solve(&re, 1e-14).unwrap();
        let xi = svd.solve(&im, 1e-14).unwrap();
        for j in 0..q {
            let got = mean.coeffs.block(k)[j];
            let want_im = if k == 0 { 0.0 } else { xi[j] };
            let scale = xr.norm().max(1.0);
            assert!((got.re - xr[j]).abs() <= 1e-8 * scale, "k={k} j={j}");
            assert!((got.im - want_im).abs() <= 1e-8 * scale);
        }
    }
}

#[test]
fn identity_covariance_is_sample_covariance_minus_noise() {
    let basis = FBBasis::new(16, 0.5).unwrap();
    let ys = noisy_coeffs(&basis, 60, 4);
    let groups = vec![0; 60];
    let ops = [BlockOperator::identity(&basis)];
    let mean = estimate_mean(&ys, &groups, &ops).unwrap();
    let sample = sample_cov(&ys, &mean.coeffs);
    for sigma2 in [0.0, 0.4] {
        let cov = estimate_covariance(&ys, &groups, &ops, &mean, sigma2, &no_shrink()).unwrap();
        for (k, s) in sample.iter().enumerate() {
            let want = s - DMatrix::identity(s.nrows(), s.ncols()) * sigma2;
            assert!((cov.block(k) - &want).norm() <= 1e-8 * want.norm().max(1.0), "k={k} sigma2={sigma2}");
        }
    }
}

#[test]
fn two_group_covariance_matches_kronecker_solve() {
    let basis = FBBasis::new(16, 0.5).unwrap();
    let ops = two_group_ops(&basis);
    let n = 50;
    let ys = noisy_coeffs(&basis, n, 5);
    let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mean = estimate_mean(&ys, &groups, &ops).unwrap();
    let sigma2 = 0.3;
    let cov = estimate_covariance(&ys, &groups, &ops, &mean, sigma2, &no_shrink()).unwrap();
    for k in 0..basis.num_blocks() {
        let q = basis.block(k).len();
        let mut lhs = DMatrix::zeros(q * q, q * q);
        let mut rhs = DMatrix::zeros(q, q);
        for (g, op) in ops.iter().enumerate() {
            let b = op.block(k);
            let b2 = b * b;
            let members: Vec<&FBCoeffs> = ys.iter().zip(&groups).filter(|(_, &h)| h == g).map(|(y, _)| y).collect();
            let ng = members.len() as f64;
            lhs += b2.kronecker(&b2) * ng;
            let bm: Vec<Complex64> = (0..q)
                .map(|i| (0..q).map(|j| mean.coeffs.block(k)[j] * b[(i, j)]).sum())
                .collect();
            let mut s = DMatrix::zeros(q, q);
            for y in members {
                let d: Vec<Complex64> = y.block(k).iter().zip(&bm).map(|(a, c)| a - c).collect();
                for i in 0..q {
                    for j in 0..q {
                        s[(i, j)] += (d[i] * d[j].conj()).re;
                    }
                }
            }
            rhs += b * s * b - &b2 * (sigma2 * ng);
        }
        let vec_rhs = DVector::from_column_slice(rhs.as_slice());
        let sol = lhs.lu().solve(&vec_rhs).unwrap();
        let want = DMatrix::from_column_slice(q, q, sol.as_slice());
        let err = (cov.block(k) - &want).norm() / want.norm().max(1e-300);
        assert!(err <= 1e-6, "k={k}: {err}");
    }
}

#[test]
fn var_c_monte_carlo() {
    // c ~ U[0.5, 1.5], x = mu + z with z orthogonal to the ones vector.
    let p = 4;
    let mut r = rng(6);
    let ones = DVector::from_vec(vec![1.0, 0.8, 1.3, 0.6]);
    let mu = DVector::from_vec(vec![2.0, -0.5, 1.0, 0.7]);
    let u = ones.normalize();
    let proj = DMatrix::identity(p, p) - &u * u.transpose();
    let mix = &proj * random_psd(p, p, &mut r);
    let draws = 1_000_000;
    let mut sum = DVector::zeros(p);
    let mut outer = DMatrix::zeros(p, p);
    for _ in 0..draws {
        let c: f64 = r.random_range(0.5..1.5);
        let z = &mix * DVector::from_fn(p, |_, _| r.sample::<f64, _>(StandardNormal));
        let cx = (&mu + z) * c;
        sum += &cx;
        outer += &cx * cx.transpose();
    }
    let m = sum / draws as f64;
    let cov = outer / draws as f64 - &m * m.transpose();
    let est = estimate_var_c(&cov, &m, &ones).unwrap();
    assert!((est.var_c / (1.0 / 12.0) - 1.0).abs() < 0.02, "{}", est.var_c);
}

#[test]
fn var_c_exact_on_population_identity() {
    // Cov(cx) = E(c^2) Cov(x) + Var(c) E(x) E(x)^T with Cov(x) 1 = 0.
    let mut r = rng(7);
    let ones = random_vector(5, &mut r).map(f64::abs);
    let u = ones.normalize();
    let proj = DMatrix::identity(5, 5) - &u * u.transpose();
    let cov_x = &proj * random_psd(5, 3, &mut r) * &proj;
    let mu = random_vector(5, &mut r) + &ones;
    let var = 1.0 / 12.0;
    let cov_cx = &cov_x * (1.0 + var) + &mu * mu.transpose() * var;
    let est = estimate_var_c(&cov_cx, &mu, &ones).unwrap();
    assert!((est.var_c - var).abs() < 1e-12);
}

fn block0_mean(mu: &DVector<f64>) -> MeanEstimate {
    MeanEstimate {
        coeffs: common::block0_coeffs(mu),
    }
}

#[test]
fn split_inverts_recombine() {
    let mut r = rng(8);
    let s = random_psd(6, 4, &mut r);
    let mu = random_vector(6, &mut r);
    let mean = block0_mean(&mu);
    let v = 0.09;
    let cx = recombine(&BlockCovariance::new(vec![s.clone()]), v, &mean);
    let back = split_sigma_x(&cx, v, &mean);
    assert!((back.block(0) - &s).amax() <= 1e-12 * s.amax());
    let again = recombine(&back, v, &mean);
    assert!((again.block(0) - cx.block(0)).amax() <= 1e-12 * cx.block(0).amax());
    let same = split_sigma_x(&cx, 0.0, &mean);
    assert_eq!(same.block(0), cx.block(0));
}

#[test]
fn recombined_matrix_maps_ones_to_mean() {
    let mut r = rng(9);
    let ones = random_vector(6, &mut r).map(f64::abs);
    let mu = random_vector(6, &mut r);
    let raw = random_symmetric(6, &mut r);
    let refined = refine_sdp(&raw, &ones, 1e-12, 10_000).unwrap().matrix;
    let v = 0.1;
    let cx = recombine(&BlockCovariance::new(vec![refined]), v, &block0_mean(&mu));
    let lhs = cx.block(0) * &ones;
    let rhs = &mu * (v * mu.dot(&ones));
    assert!((&lhs - &rhs).norm() <= 1e-8 * rhs.norm());
}

#[test]
fn gs_keeps_feasible_inputs() {
    let mut r = rng(10);
    let ones = random_vector(5, &mut r).map(f64::abs);
    let u = ones.normalize();
    let proj = DMatrix::identity(5, 5) - &u * u.transpose();
    let feasible = &proj * random_psd(5, 5, &mut r) * &proj;
    let out = refine_gs(&feasible, &ones).unwrap().matrix;
    assert!((&out - &feasible).amax() <= 1e-8 * feasible.amax());
    let w = &proj * random_vector(5, &mut r);
    let rank_one = &w * w.transpose();
    let out = refine_gs(&rank_one, &ones).unwrap().matrix;
    assert!((&out - &rank_one).amax() <= 1e-10 * rank_one.amax());
}

/// Classical Gram-Schmidt of `[1, v_1, ..., v_{p-1}]`, clipped eigenvalues.
fn gs_oracle(s: &DMatrix<f64>, ones: &DVector<f64>) -> DMatrix<f64> {
    let p = s.nrows();
    let eig = SymmetricEigen::new(s.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut basis: Vec<DVector<f64>> = vec![ones.normalize()];
    let mut out = DMatrix::zeros(p, p);
    for &j in order.iter().take(p - 1) {
        let mut v = eig.eigenvectors.column(j).into_owned();
        for b in &basis {
            let c = b.dot(&eig.eigenvectors.column(j));
            v -= b * c;
        }
        let v = v.normalize();
        out += &v * v.transpose() * eig.eigenvalues[j].max(0.0);
        basis.push(v);
    }
    out
}

#[test]
fn gs_matches_classical_gram_schmidt() {
    let mut r = rng(11);
    for _ in 0..5 {
        let s = random_symmetric(5, &mut r);
        let ones = random_vector(5, &mut r).map(f64::abs);
        let out = refine_gs(&s, &ones).unwrap().matrix;
        let want = gs_oracle(&s, &ones);
        assert!((&out - &want).amax() <= 1e-8 * want.amax().max(1.0));
    }
}

/// Independent Dykstra loop run to a tenfold smaller tolerance.
fn sdp_oracle(s: &DMatrix<f64>, ones: &DVector<f64>, tol: f64) -> DMatrix<f64> {
    let p = s.nrows();
    let u = ones.normalize();
    let proj = DMatrix::identity(p, p) - &u * u.transpose();
    let clip = |m: &DMatrix<f64>| {
        let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
        &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0))) * e.eigenvectors.transpose()
    };
    let mut x = s.clone();
    let (mut pi, mut qi) = (DMatrix::zeros(p, p), DMatrix::zeros(p, p));
    for _ in 0..100_000 {
        let y = clip(&(&x + &pi));
        pi = &x + &pi - &y;
        let next = &proj * (&y + &qi) * &proj;
        qi = &y + &qi - &next;
        let done = (&next - &x).norm() < tol;
        x = next;
        if done {
            break;
        }
    }
    x
}

#[test]
fn sdp_objective_matches_long_run_oracle() {
    let mut r = rng(12);
    for _ in 0..4 {
        let s = random_symmetric(6, &mut r);
        let ones = random_vector(6, &mut r).map(f64::abs);
        let out = refine_sdp(&s, &ones, 1e-8, 1000).unwrap();
        assert!(out.converged);
        let want = sdp_oracle(&s, &ones, 1e-9);
        let f = (&out.matrix - &s).norm_squared();
        let g = (&want - &s).norm_squared();
        assert!((f - g).abs() <= 1e-6 * g.max(1.0), "{f} vs {g}");
    }
}

#[test]
fn sdp_keeps_feasible_and_zeroes_negative_definite() {
    let mut r = rng(13);
    let ones = random_vector(5, &mut r).map(f64::abs);
    let u = ones.normalize();
    let proj = DMatrix::identity(5, 5) - &u * u.transpose();
    let feasible = &proj * random_psd(5, 5, &mut r) * &proj;
    let out = refine_sdp(&feasible, &ones, 1e-8, 1000).unwrap().matrix;
    assert!((&out - &feasible).norm() <= 1e-8);
    let neg = -DMatrix::<f64>::identity(5, 5);
    let out = refine_sdp(&neg, &ones, 1e-8, 1000).unwrap().matrix;
    assert!(out.symmetric_eigenvalues().amax() <= 1e-8);
}

#[test]
fn block_covariance_json_round_trip() {
    let mut r = rng(14);
    let cov = BlockCovariance::new(vec![random_psd(3, 3, &mut r), random_psd(2, 1, &mut r)]);
    let back = BlockCovariance::from_json(&cov.to_json().unwrap()).unwrap();
    assert_eq!(back, cov);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_refinements_satisfy_constraints(seed in any::<u64>(), p in 2usize..9) {
        let mut r = rng(seed);
        let s = random_symmetric(p, &mut r) + random_psd(p, 2, &mut r);
        let ones = random_vector(p, &mut r).map(|v| v.abs() + 0.1);
        for m in [refine_gs(&s, &ones).unwrap().matrix, refine_sdp(&s, &ones, 1e-8, 1000).unwrap().matrix] {
            let (null, ratio) = constraint_residuals(&m, &ones);
            prop_assert!(null <= 1e-8, "null residual {}", null);
            prop_assert!(ratio >= -1e-10, "eigen ratio {}", ratio);
        }
    }

    #[test]
    fn prop_split_recombine_round_trip(seed in any::<u64>(), v in 0.0f64..2.0) {
        let mut r = rng(seed);
        let s = random_symmetric(5, &mut r);
        let mean = block0_mean(&random_vector(5, &mut r));
        let cov = BlockCovariance::new(vec![s.clone()]);
        let back = recombine(&split_sigma_x(&cov, v, &mean), v, &mean);
        prop_assert!((back.block(0) - &s).amax() <= 1e-12 * (1.0 + s.amax() + v * mean.coeffs.norm().powi(2)));
    }

    #[test]
    fn prop_var_c_recovers_population_value(seed in any::<u64>(), v in 0.0f64..0.5) {
        let mut r = rng(seed);
        let ones = random_vector(4, &mut r).map(|x| x.abs() + 0.2);
        let u = ones.normalize();
        let proj = DMatrix::identity(4, 4) - &u * u.transpose();
        let cov_x = &proj * random_psd(4, 2, &mut r) * &proj;
        let mu = &ones + random_vector(4, &mut r) * 0.1;
        let cov_cx = &cov_x * (1.0 + v) + &mu * mu.transpose() * v;
        let est = estimate_var_c(&cov_cx, &mu, &ones).unwrap();
        prop_assert!((est.raw_var_c - v).abs() <= 1e-10 * (1.0 + v));
    }
}
