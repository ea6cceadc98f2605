//! Covariance Wiener filtering, contrast estimation, and restoration.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    constraint_residuals, estimate_var_c, recombine, refine_gs, refine_sdp, split_sigma_x,
    BlockCovariance, CovarianceOptions, GroupMoments, MeanEstimate, Refinement, VarianceEstimate,
};
use crate::ctf::{apply_real, BlockOperator};
use crate::error::{Error, Result, StageExt};
use crate::linalg::{psd_clip, symmetrize};
use crate::steerable::{FBCoeffs, OnesVector};

/// Default floor below which a contrast estimate is not divided by.
pub const CONTRAST_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContrastMethod {
    #[serde(rename = "cwf")]
    Cwf,
    #[serde(rename = "cwf-gs")]
    CwfGs,
    #[serde(rename = "cwf-sdp")]
    CwfSdp,
    #[serde(rename = "oracle-cov")]
    OracleCov,
    #[serde(rename = "oracle")]
    Oracle,
    #[serde(rename = "trivial")]
    Trivial,
}

impl ContrastMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ContrastMethod::Cwf => "cwf",
            ContrastMethod::CwfGs => "cwf-gs",
            ContrastMethod::CwfSdp => "cwf-sdp",
            ContrastMethod::OracleCov => "oracle-cov",
            ContrastMethod::Oracle => "oracle",
            ContrastMethod::Trivial => "trivial",
        }
    }
}

impl std::fmt::Display for ContrastMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RestoreMethod {
    #[serde(rename = "cwf")]
    Cwf,
    #[serde(rename = "cwf-norm")]
    CwfNorm,
    #[serde(rename = "gs-norm")]
    GsNorm,
    #[serde(rename = "sdp-norm")]
    SdpNorm,
    #[serde(rename = "gs-2stage")]
    Gs2Stage,
    #[serde(rename = "sdp-2stage")]
    Sdp2Stage,
}

impl RestoreMethod {
    pub const ALL: [RestoreMethod; 6] = [
        RestoreMethod::Cwf,
        RestoreMethod::CwfNorm,
        RestoreMethod::GsNorm,
        RestoreMethod::SdpNorm,
        RestoreMethod::Gs2Stage,
        RestoreMethod::Sdp2Stage,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RestoreMethod::Cwf => "cwf",
            RestoreMethod::CwfNorm => "cwf-norm",
            RestoreMethod::GsNorm => "gs-norm",
            RestoreMethod::SdpNorm => "sdp-norm",
            RestoreMethod::Gs2Stage => "gs-2stage",
            RestoreMethod::Sdp2Stage => "sdp-2stage",
        }
    }
}

impl std::fmt::Display for RestoreMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMethod {
    Gs,
    Sdp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestoreOption {
    Normalization,
    TwoStage,
}

/// Contrast estimates normalized to mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastEstimates {
    pub values: Vec<f64>,
    pub method: ContrastMethod,
    /// Mean of the unnormalized estimates that was divided out.
    pub normalization: f64,
}

/// Divides by the mean so the estimates average to 1.
pub fn normalize_contrasts(raw: &[f64], method: ContrastMethod) -> Result<ContrastEstimates> {
    if raw.is_empty() {
        return Err(Error::invalid("no contrast estimates"));
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if !(mean.abs() > 0.0) || !mean.is_finite() {
        return Err(Error::Degenerate(format!(
            "mean of unnormalized contrasts is {mean}"
        )));
    }
    let negative = raw.iter().filter(|&&v| v < 0.0).count();
    if negative * 100 > raw.len() {
        warn!("{negative} of {} unnormalized contrasts are negative", raw.len());
    }
    Ok(ContrastEstimates {
        values: raw.iter().map(|v| v / mean).collect(),
        method,
        normalization: mean,
    })
}

/// Per-block pieces of `mu + c Sigma B (c^2 B Sigma B + s2 I)^{-1} (y - c B mu)`
/// with `B Sigma B = V diag(lambda) V^T`.
#[derive(Clone, Debug)]
struct FilterBlock {
    vt: DMatrix<f64>,
    lambda: DVector<f64>,
    sigma_bv: DMatrix<f64>,
    b_mu: Vec<Complex64>,
    mu: Vec<Complex64>,
}

/// Wiener filters for every CTF group, factored once and applied to many
/// images (optionally with a per-image scale on the operator).
#[derive(Clone, Debug)]
pub struct CwfFilter {
    groups: Vec<Vec<FilterBlock>>,
    sigma2: f64,
}

impl CwfFilter {
    pub fn new(ops: &[BlockOperator], sigma: &BlockCovariance, mean: &MeanEstimate, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) {
            return Err(Error::invalid(format!("noise variance {sigma2}")));
        }
        let sizes = sigma.block_sizes();
        if mean.coeffs.block_sizes() != sizes {
            return Err(Error::mismatch(format!("{sizes:?}"), format!("{:?}", mean.coeffs.block_sizes())));
        }
        let groups = ops
            .par_iter()
            .map(|op| {
                if op.block_sizes() != sizes {
                    return Err(Error::mismatch(format!("{sizes:?}"), format!("{:?}", op.block_sizes())));
                }
                sizes
                    .iter()
                    .enumerate()
                    .map(|(k, _)| {
                        let b = op.block(k);
                        let s = sigma.block(k);
                        let inner = symmetrize(&(b * s * b));
                        let eig = SymmetricEigen::new(inner);
                        let scale = eig.eigenvalues.amax() + sigma2;
                        if eig.eigenvalues.iter().any(|&l| (l + sigma2).abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE)) {
                            return Err(Error::Singular(format!(
                                "B Sigma B + sigma2 I is singular in block {k}"
                            )));
                        }
                        let mu = mean.coeffs.block(k).to_vec();
                        Ok(FilterBlock {
                            sigma_bv: s * b * &eig.eigenvectors,
                            vt: eig.eigenvectors.transpose(),
                            lambda: eig.eigenvalues,
                            b_mu: apply_real(b, &mu),
                            mu,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CwfFilter { groups, sigma2 })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Filter with operator `scale * B_group`.
    pub fn apply_scaled(&self, group: usize, y: &FBCoeffs, scale: f64) -> Result<FBCoeffs> {
        let blocks = self
            .groups
            .get(group)
            .ok_or_else(|| Error::invalid(format!("no filter for group {group}")))?;
        if y.num_blocks() < blocks.len() {
            return Err(Error::mismatch(blocks.len(), y.num_blocks()));
        }
        let out = blocks
            .iter()
            .enumerate()
            .map(|(k, fb)| {
                let yk = y.block(k);
                if yk.len() != fb.mu.len() {
                    return Err(Error::mismatch(fb.mu.len(), yk.len()));
                }
                let centered: Vec<Complex64> = yk
                    .iter()
                    .zip(&fb.b_mu)
                    .map(|(y, bm)| y - bm * scale)
                    .collect();
                let mut d = apply_real(&fb.vt, &centered);
                for (dj, &l) in d.iter_mut().zip(fb.lambda.iter()) {
                    let denom = scale * scale * l + self.sigma2;
                    if denom == 0.0 {
                        return Err(Error::Singular(format!("scaled filter singular in block {k}")));
                    }
                    *dj *= scale / denom;
                }
                let mut x = apply_real(&fb.sigma_bv, &d);
                for (xj, m) in x.iter_mut().zip(&fb.mu) {
                    *xj += m;
                    if k == 0 {
                        xj.im = 0.0;
                    }
                }
                Ok(x)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FBCoeffs::from_blocks(out))
    }

    pub fn apply(&self, group: usize, y: &FBCoeffs) -> Result<FBCoeffs> {
        self.apply_scaled(group, y, 1.0)
    }
}

/// `mu + Sigma B^T (B Sigma B^T + sigma2 I)^{-1} (y - B mu)` per block.
pub fn cwf_filter(y: &FBCoeffs, op: &BlockOperator, sigma: &BlockCovariance, mean: &MeanEstimate, sigma2: f64) -> Result<FBCoeffs> {
    CwfFilter::new(std::slice::from_ref(op), sigma, mean, sigma2)?.apply(0, y)
}

/// Filtered pixel sums `1_FB^T CWF(y_i)` normalized to mean 1; only block 0
/// of the covariance, mean, operators and coefficients is used.
pub fn estimate_contrasts(
    ys: &[FBCoeffs],
    groups: &[usize],
    ops: &[BlockOperator],
    sigma_cx: &BlockCovariance,
    mean: &MeanEstimate,
    sigma2: f64,
    ones: &OnesVector,
    method: ContrastMethod,
) -> Result<ContrastEstimates> {
    if ys.len() != groups.len() {
        return Err(Error::mismatch(ys.len(), groups.len()));
    }
    let ops0: Vec<BlockOperator> = ops.iter().map(|o| o.truncated(1)).collect();
    let filter = CwfFilter::new(&ops0, &sigma_cx.truncated(1), &mean.truncated(1), sigma2)?;
    let raw = filtered_sums(&filter, ys, groups, ones)?;
    normalize_contrasts(&raw, method)
}

fn filtered_sums(filter: &CwfFilter, ys: &[FBCoeffs], groups: &[usize], ones: &OnesVector) -> Result<Vec<f64>> {
    // 1^T (m_g + G_g y) = 1^T m_g + (G_g^T 1)^T y in block 0
    let ones0 = ones.block0();
    let p = ones0.len();
    let linear: Vec<(f64, DVector<f64>)> = filter
        .groups
        .iter()
        .map(|blocks| {
            let fb = &blocks[0];
            let mut lambda_scale = fb.lambda.clone();
            for l in lambda_scale.iter_mut() {
                *l = 1.0 / (*l + filter.sigma2);
            }
            // G = sigma_bv diag(s) vt
            let w = fb.sigma_bv.transpose() * ones0;
            let w = w.component_mul(&lambda_scale);
            let g1 = fb.vt.transpose() * w;
            let mu = DVector::from_iterator(p, fb.mu.iter().map(|c| c.re));
            let bmu = DVector::from_iterator(p, fb.b_mu.iter().map(|c| c.re));
            (ones0.dot(&mu) - g1.dot(&bmu), g1)
        })
        .collect();
    ys.iter()
        .zip(groups)
        .map(|(y, &g)| {
            let (offset, g1) = linear
                .get(g)
                .ok_or_else(|| Error::invalid(format!("no filter for group {g}")))?;
            let b0 = y.block(0);
            if b0.len() != p {
                return Err(Error::mismatch(p, b0.len()));
            }
            Ok(offset + b0.iter().zip(g1.iter()).map(|(c, w)| c.re * w).sum::<f64>())
        })
        .collect()
}

/// `cx / c`, or `None` when `c <= floor`.
pub fn restore_normalize(cx: &FBCoeffs, c: f64, floor: f64) -> Option<FBCoeffs> {
    if c > floor {
        Some(cx.scaled(1.0 / c))
    } else {
        None
    }
}

/// CWF with the estimated contrast absorbed into the operator.
pub fn restore_2stage(
    y: &FBCoeffs,
    op: &BlockOperator,
    c: f64,
    sigma_x: &BlockCovariance,
    mean: &MeanEstimate,
    sigma2: f64,
    floor: f64,
) -> Result<FBCoeffs> {
    if !(c > floor) {
        return Err(Error::invalid(format!("contrast {c} below floor {floor}")));
    }
    CwfFilter::new(std::slice::from_ref(op), sigma_x, mean, sigma2)?.apply_scaled(0, y, c)
}

/// Settings shared by both algorithms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub covariance: CovarianceOptions,
    pub sdp_tol: f64,
    pub sdp_maxiter: usize,
    pub mean_regularization: f64,
    pub contrast_floor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            covariance: CovarianceOptions::default(),
            sdp_tol: 1e-8,
            sdp_maxiter: 1000,
            mean_regularization: 1e-10,
            contrast_floor: CONTRAST_FLOOR,
        }
    }
}

/// Mean and unrefined covariance of the scaled clean coefficients.
#[derive(Clone, Debug)]
pub struct Estimation {
    pub mean: MeanEstimate,
    pub sigma_cx: BlockCovariance,
}

/// Estimates the rotation-averaged mean and the covariance from moments.
pub fn estimate_model(moments: &GroupMoments, ops: &[BlockOperator], sigma2: f64, opts: &SolverOptions) -> Result<Estimation> {
    let mean = moments
        .mean(ops, opts.mean_regularization)
        .stage("estimate_mean")?
        .rotation_averaged();
    let sigma_cx = moments
        .covariance(ops, &mean, sigma2, &opts.covariance)
        .stage("estimate_covariance")?;
    Ok(Estimation { mean, sigma_cx })
}

/// Refined covariance model.
#[derive(Clone, Debug)]
pub struct RefinedModel {
    pub method: RefineMethod,
    pub var: VarianceEstimate,
    /// Block 0 of `Sigma_x` before refinement.
    pub sigma_x0: DMatrix<f64>,
    pub refinement: Refinement,
    /// `Sigma_cx` with block 0 refined and other blocks PSD-clipped.
    pub sigma_cx_rf: BlockCovariance,
    /// `Sigma_x` with block 0 refined and other blocks PSD-clipped.
    pub sigma_x_rf: BlockCovariance,
    /// Constraint residuals of the refined block 0.
    pub null_residual: f64,
    pub eigen_ratio: f64,
}

pub fn refine_model(est: &Estimation, ones: &OnesVector, method: RefineMethod, opts: &SolverOptions) -> Result<RefinedModel> {
    let ones0 = ones.block0();
    let mu0 = est.mean.block0();
    let var = estimate_var_c(est.sigma_cx.block(0), &mu0, ones0).stage("estimate_var_c")?;
    let split = split_sigma_x(&est.sigma_cx, var.var_c, &est.mean);
    let sigma_x0 = split.block(0).clone();
    let refinement = match method {
        RefineMethod::Gs => refine_gs(&sigma_x0, ones0).stage("refine_gs")?,
        RefineMethod::Sdp => refine_sdp(&sigma_x0, ones0, opts.sdp_tol, opts.sdp_maxiter).stage("refine_sdp")?,
    };
    let (null_residual, eigen_ratio) = constraint_residuals(&refinement.matrix, ones0);
    let mut x_blocks = vec![refinement.matrix.clone()];
    x_blocks.extend(split.blocks[1..].par_iter().map(psd_clip).collect::<Vec<_>>());
    let sigma_x_rf = BlockCovariance::new(x_blocks);
    let sigma_cx_rf = recombine(&sigma_x_rf, var.var_c, &est.mean);
    Ok(RefinedModel {
        method,
        var,
        sigma_x0,
        refinement,
        sigma_cx_rf,
        sigma_x_rf,
        null_residual,
        eigen_ratio,
    })
}

/// Intermediates and output of contrast estimation.
#[derive(Clone, Debug)]
pub struct Algorithm1Output {
    pub estimation: Estimation,
    pub model: RefinedModel,
    pub contrasts: ContrastEstimates,
}

/// Contrast estimation from block-0 quantities.
pub fn run_algorithm1(
    ys: &[FBCoeffs],
    groups: &[usize],
    ops: &[BlockOperator],
    sigma2: f64,
    ones: &OnesVector,
    method: RefineMethod,
    opts: &SolverOptions,
) -> Result<Algorithm1Output> {
    if ys.len() < 2 {
        return Err(Error::invalid("contrast estimation needs n >= 2"));
    }
    let ops0: Vec<BlockOperator> = ops.iter().map(|o| o.truncated(1)).collect();
    let moments = GroupMoments::with_blocks(ys, groups, ops.len(), 1).stage("moments")?;
    let estimation = estimate_model(&moments, &ops0, sigma2, opts)?;
    let model = refine_model(&estimation, ones, method, opts)?;
    let tag = match method {
        RefineMethod::Gs => ContrastMethod::CwfGs,
        RefineMethod::Sdp => ContrastMethod::CwfSdp,
    };
    let contrasts = estimate_contrasts(ys, groups, &ops0, &model.sigma_cx_rf, &estimation.mean, sigma2, ones, tag)
        .stage("estimate_contrasts")?;
    Ok(Algorithm1Output {
        estimation,
        model,
        contrasts,
    })
}

/// Restored coefficients; `None` marks images excluded by the contrast floor.
#[derive(Clone, Debug)]
pub struct RestoredImages {
    pub method: RestoreMethod,
    pub coeffs: Vec<Option<FBCoeffs>>,
}

/// Restoration with the refined full covariance model.
pub fn restore_with_model(
    ys: &[FBCoeffs],
    groups: &[usize],
    ops: &[BlockOperator],
    sigma2: f64,
    mean: &MeanEstimate,
    model: &RefinedModel,
    contrasts: &ContrastEstimates,
    option: RestoreOption,
    floor: f64,
) -> Result<RestoredImages> {
    let method = match (model.method, option) {
        (RefineMethod::Gs, RestoreOption::Normalization) => RestoreMethod::GsNorm,
        (RefineMethod::Sdp, RestoreOption::Normalization) => RestoreMethod::SdpNorm,
        (RefineMethod::Gs, RestoreOption::TwoStage) => RestoreMethod::Gs2Stage,
        (RefineMethod::Sdp, RestoreOption::TwoStage) => RestoreMethod::Sdp2Stage,
    };
    let coeffs = match option {
        RestoreOption::Normalization => {
            let filter = CwfFilter::new(ops, &model.sigma_cx_rf, mean, sigma2).stage("cwf_filter")?;
            ys.par_iter()
                .zip(groups.par_iter())
                .zip(contrasts.values.par_iter())
                .map(|((y, &g), &c)| Ok(restore_normalize(&filter.apply(g, y)?, c, floor)))
                .collect::<Result<Vec<_>>>()?
        }
        RestoreOption::TwoStage => {
            let filter = CwfFilter::new(ops, &model.sigma_x_rf, mean, sigma2).stage("cwf_filter")?;
            ys.par_iter()
                .zip(groups.par_iter())
                .zip(contrasts.values.par_iter())
                .map(|((y, &g), &c)| {
                    if c > floor {
                        filter.apply_scaled(g, y, c).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(RestoredImages { method, coeffs })
}

/// Full-basis restoration: estimate, refine block 0, estimate contrasts,
/// then normalize or filter again with the contrast in the operator.
pub fn run_algorithm2(
    ys: &[FBCoeffs],
    groups: &[usize],
    ops: &[BlockOperator],
    sigma2: f64,
    ones: &OnesVector,
    option: RestoreOption,
    method: RefineMethod,
    opts: &SolverOptions,
) -> Result<RestoredImages> {
    if ys.len() < 2 {
        return Err(Error::invalid("restoration needs n >= 2"));
    }
    let moments = GroupMoments::new(ys, groups, ops.len()).stage("moments")?;
    let estimation = estimate_model(&moments, ops, sigma2, opts)?;
    let model = refine_model(&estimation, ones, method, opts)?;
    let tag = match method {
        RefineMethod::Gs => ContrastMethod::CwfGs,
        RefineMethod::Sdp => ContrastMethod::CwfSdp,
    };
    let contrasts = estimate_contrasts(ys, groups, ops, &model.sigma_cx_rf, &estimation.mean, sigma2, ones, tag)
        .stage("estimate_contrasts")?;
    restore_with_model(ys, groups, ops, sigma2, &estimation.mean, &model, &contrasts, option, opts.contrast_floor)
        .stage("restore")
}

/// Rotation-averaged sample mean and covariance of clean coefficients.
pub fn sample_moments(coeffs: &[FBCoeffs]) -> Result<Estimation> {
    let groups = vec![0usize; coeffs.len()];
    let moments = GroupMoments::new(coeffs, &groups, 1)?;
    let n = moments.total() as f64;
    let mean = MeanEstimate {
        coeffs: moments.sums[0].scaled(1.0 / n),
    }
    .rotation_averaged();
    let blocks = moments.scatter[0]
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let m = mean.coeffs.block(k);
            let q = m.len();
            let outer = DMatrix::from_fn(q, q, |i, j| (m[i] * m[j].conj()).re);
            symmetrize(&(s / n - outer))
        })
        .collect();
    Ok(Estimation {
        mean,
        sigma_cx: BlockCovariance::new(blocks),
    })
}

/// Least-squares contrast `<y_i, t_i>/|t_i|^2` against exact clean templates
/// `t_i` that went through the same forward model and preprocessing as `y_i`.
pub fn template_oracle(ys: &[FBCoeffs], templates: &[FBCoeffs]) -> Result<Vec<f64>> {
    if ys.len() != templates.len() {
        return Err(Error::mismatch(ys.len(), templates.len()));
    }
    ys.par_iter()
        .zip(templates.par_iter())
        .map(|(y, t)| {
            let denom = t.dot(t);
            if denom == 0.0 {
                return Err(Error::Degenerate("clean template vanishes".into()));
            }
            Ok(y.dot(t) / denom)
        })
        .collect()
}
