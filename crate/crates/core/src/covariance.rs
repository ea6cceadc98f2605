//! Mean and block covariance estimation, contrast variance, and the
//! block-0 refinements that enforce the contrast model's constraints.
//!
//! Images are grouped by CTF: `groups[i]` selects the operator `ops[g]`
//! applied to image `i`. Blocks `k > 0` hold complex coefficients `u + i v`;
//! their covariance is the rotation-averaged `E[u u^T + v v^T]`, for which
//! white noise of per-pixel variance `sigma2` contributes `sigma2 * I` in
//! every block.

use std::io::{Read, Write};
use std::path::Path;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctf::{apply_real, BlockOperator};
use crate::error::{Error, Result};
use crate::linalg::{psd_clip, sorted_eigen, spectral_map, symmetrize};
use crate::steerable::FBCoeffs;

/// Estimated mean of the scaled clean coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanEstimate {
    pub coeffs: FBCoeffs,
}

impl MeanEstimate {
    pub fn block0(&self) -> DVector<f64> {
        self.coeffs.block0()
    }

    /// Sets blocks `k > 0` to zero, their value after averaging over
    /// in-plane rotations.
    pub fn rotation_averaged(mut self) -> Self {
        for k in 1..self.coeffs.num_blocks() {
            self.coeffs
                .block_mut(k)
                .iter_mut()
                .for_each(|c| *c = Complex64::new(0.0, 0.0));
        }
        self
    }

    pub fn truncated(&self, nblocks: usize) -> MeanEstimate {
        MeanEstimate {
            coeffs: self.coeffs.truncated(nblocks),
        }
    }
}

/// Per-block real symmetric matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCovariance {
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockCovariance {
    pub fn new(blocks: Vec<DMatrix<f64>>) -> Self {
        BlockCovariance { blocks }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        BlockCovariance {
            blocks: sizes.iter().map(|&q| DMatrix::zeros(q, q)).collect(),
        }
    }

    pub fn block(&self, k: usize) -> &DMatrix<f64> {
        &self.blocks[k]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.nrows()).collect()
    }

    pub fn asymmetry(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| (b - b.transpose()).amax())
            .fold(0.0, f64::max)
    }

    /// Every block projected onto the PSD cone.
    pub fn psd_clipped(&self) -> BlockCovariance {
        BlockCovariance {
            blocks: self.blocks.par_iter().map(psd_clip).collect(),
        }
    }

    pub fn truncated(&self, nblocks: usize) -> BlockCovariance {
        BlockCovariance {
            blocks: self.blocks.iter().take(nblocks).cloned().collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Contrast variance from the block-0 constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub var_c: f64,
    pub raw_var_c: f64,
}

/// Solver settings for the covariance normal equations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovarianceOptions {
    pub cg_tol: f64,
    pub cg_maxiter: usize,
    /// Zero the noise-level eigenvalues of the right-hand side first.
    pub shrink: bool,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        CovarianceOptions {
            cg_tol: 1e-8,
            cg_maxiter: 300,
            shrink: true,
        }
    }
}

/// Per-group sufficient statistics: counts, coefficient sums, and raw
/// second moments `sum Re(y y^*)` per block.
#[derive(Clone, Debug)]
pub struct GroupMoments {
    pub counts: Vec<usize>,
    pub sums: Vec<FBCoeffs>,
    /// `scatter[g][k]`.
    pub scatter: Vec<Vec<DMatrix<f64>>>,
}

fn check_inputs(coeffs: &[FBCoeffs], groups: &[usize], ops: &[BlockOperator]) -> Result<Vec<usize>> {
    if coeffs.is_empty() {
        return Err(Error::invalid("no images"));
    }
    if groups.len() != coeffs.len() {
        return Err(Error::mismatch(coeffs.len(), groups.len()));
    }
    let sizes = coeffs[0].block_sizes();
    for c in coeffs {
        if c.block_sizes() != sizes {
            return Err(Error::mismatch(format!("{sizes:?}"), format!("{:?}", c.block_sizes())));
        }
    }
    for op in ops {
        if op.block_sizes() != sizes {
            return Err(Error::mismatch(format!("{sizes:?}"), format!("{:?}", op.block_sizes())));
        }
    }
    if let Some(&g) = groups.iter().find(|&&g| g >= ops.len()) {
        return Err(Error::invalid(format!(
            "group {g} has no operator ({} given)",
            ops.len()
        )));
    }
    Ok(sizes)
}

impl GroupMoments {
    pub fn new(coeffs: &[FBCoeffs], groups: &[usize], ngroups: usize) -> Result<Self> {
        Self::with_blocks(coeffs, groups, ngroups, usize::MAX)
    }

    /// Moments of the leading `nblocks` blocks only.
    pub fn with_blocks(coeffs: &[FBCoeffs], groups: &[usize], ngroups: usize, nblocks: usize) -> Result<Self> {
        if groups.len() != coeffs.len() {
            return Err(Error::mismatch(coeffs.len(), groups.len()));
        }
        if coeffs.is_empty() {
            return Err(Error::invalid("no images"));
        }
        let mut sizes = coeffs[0].block_sizes();
        sizes.truncate(nblocks);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); ngroups];
        for (i, &g) in groups.iter().enumerate() {
            if g >= ngroups {
                return Err(Error::invalid(format!("group {g} out of range")));
            }
            members[g].push(i);
        }
        let counts = members.iter().map(|m| m.len()).collect();
        let per_group: Vec<(FBCoeffs, Vec<DMatrix<f64>>)> = members
            .iter()
            .map(|idx| {
                let sums = FBCoeffs::from_blocks(
                    sizes
                        .iter()
                        .enumerate()
                        .map(|(k, &q)| {
                            let mut s = vec![Complex64::new(0.0, 0.0); q];
                            for &i in idx {
                                for (d, v) in s.iter_mut().zip(coeffs[i].block(k)) {
                                    *d += v;
                                }
                            }
                            s
                        })
                        .collect(),
                );
                let scatter = sizes
                    .par_iter()
                    .enumerate()
                    .map(|(k, &q)| {
                        let cols = if k == 0 { idx.len() } else { 2 * idx.len() };
                        let mut y = DMatrix::zeros(q, cols);
                        for (j, &i) in idx.iter().enumerate() {
                            for (r, v) in coeffs[i].block(k).iter().enumerate() {
                                if k == 0 {
                                    y[(r, j)] = v.re;
                                } else {
                                    y[(r, 2 * j)] = v.re;
                                    y[(r, 2 * j + 1)] = v.im;
                                }
                            }
                        }
                        &y * y.transpose()
                    })
                    .collect();
                (sums, scatter)
            })
            .collect();
        let (sums, scatter) = per_group.into_iter().unzip();
        Ok(GroupMoments {
            counts,
            sums,
            scatter,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn block_sizes(&self) -> Vec<usize> {
        self.sums[0].block_sizes()
    }

    /// `mu = (sum_g n_g B_g^2 + delta I)^{-1} sum_g B_g s_g` per block with
    /// `delta = rel_delta * trace / p`.
    pub fn mean(&self, ops: &[BlockOperator], rel_delta: f64) -> Result<MeanEstimate> {
        let sizes = self.block_sizes();
        let blocks = sizes
            .par_iter()
            .enumerate()
            .map(|(k, &q)| {
                let mut a = DMatrix::zeros(q, q);
                let mut rhs = vec![Complex64::new(0.0, 0.0); q];
                for (g, op) in ops.iter().enumerate() {
                    if self.counts[g] == 0 {
                        continue;
                    }
                    let b = op.block(k);
                    a += (b * b) * self.counts[g] as f64;
                    for (d, v) in rhs.iter_mut().zip(apply_real(b, self.sums[g].block(k))) {
                        *d += v;
                    }
                }
                let delta = rel_delta * a.trace() / q as f64;
                for i in 0..q {
                    a[(i, i)] += delta;
                }
                let chol = Cholesky::new(symmetrize(&a)).ok_or_else(|| {
                    Error::Singular(format!("mean normal equations, block {k}"))
                })?;
                let re = chol.solve(&DVector::from_iterator(q, rhs.iter().map(|c| c.re)));
                let im = chol.solve(&DVector::from_iterator(q, rhs.iter().map(|c| c.im)));
                Ok((0..q)
                    .map(|i| Complex64::new(re[i], if k == 0 { 0.0 } else { im[i] }))
                    .collect())
            })
            .collect::<Result<Vec<Vec<Complex64>>>>()?;
        Ok(MeanEstimate {
            coeffs: FBCoeffs::from_blocks(blocks),
        })
    }

    /// Centered scatter `sum_{i in g} Re((y_i - B_g mu)(y_i - B_g mu)^*)`.
    fn centered_scatter(&self, g: usize, k: usize, op: &DMatrix<f64>, mean: &[Complex64]) -> DMatrix<f64> {
        let q = op.nrows();
        let c = apply_real(op, mean);
        let s = self.sums[g].block(k);
        let n = self.counts[g] as f64;
        let mut out = self.scatter[g][k].clone();
        for i in 0..q {
            for j in 0..q {
                let cross = (s[i] * c[j].conj()).re + (c[i] * s[j].conj()).re;
                out[(i, j)] += n * (c[i] * c[j].conj()).re - cross;
            }
        }
        symmetrize(&out)
    }

    /// Solves `sum_g n_g B_g^2 S B_g^2 = M` per block, where
    /// `M = sum_g B_g S_g B_g - sigma2 sum_g n_g B_g^2`.
    pub fn covariance(
        &self,
        ops: &[BlockOperator],
        mean: &MeanEstimate,
        sigma2: f64,
        opts: &CovarianceOptions,
    ) -> Result<BlockCovariance> {
        let n = self.total();
        if n < 2 {
            return Err(Error::invalid("covariance estimation needs n >= 2"));
        }
        let sizes = self.block_sizes();
        let blocks = sizes
            .par_iter()
            .enumerate()
            .map(|(k, &q)| {
                let mut system = BlockSystem {
                    counts: Vec::new(),
                    squares: Vec::new(),
                };
                let mut rhs = DMatrix::zeros(q, q);
                let mut q_bar = DMatrix::zeros(q, q);
                for (g, op) in ops.iter().enumerate() {
                    if self.counts[g] == 0 {
                        continue;
                    }
                    let b = op.block(k);
                    let ng = self.counts[g] as f64;
                    let s = self.centered_scatter(g, k, b, mean.coeffs.block(k));
                    let b2 = symmetrize(&(b * b));
                    rhs += b * s * b - &b2 * (sigma2 * ng);
                    q_bar += &b2 * ng;
                    system.counts.push(ng);
                    system.squares.push(b2);
                }
                q_bar /= n as f64;
                let rhs = symmetrize(&rhs);
                let rhs = if opts.shrink {
                    let samples = if k == 0 { n as f64 } else { 2.0 * n as f64 };
                    shrink_rhs(&rhs, &q_bar, n as f64, sigma2, q as f64 / samples)
                } else {
                    rhs
                };
                let (sol, iters, res) = system.solve(&rhs, &q_bar, n as f64, opts)?;
                debug!("covariance block {k}: {iters} CG iterations, residual {res:.2e}");
                Ok(sol)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockCovariance { blocks })
    }
}

/// Marchenko-Pastur shrinkage in the frame whitened by `Q^{-1/2}`.
fn shrink_rhs(rhs: &DMatrix<f64>, q_bar: &DMatrix<f64>, n: f64, sigma2: f64, gamma: f64) -> DMatrix<f64> {
    let (_, qmax) = crate::linalg::eigen_range(q_bar);
    let floor = 1e-8 * qmax.max(f64::MIN_POSITIVE);
    let w = spectral_map(q_bar, |l| 1.0 / l.max(floor).sqrt());
    let w_inv = spectral_map(q_bar, |l| l.max(floor).sqrt());
    let whitened = &w * (rhs / n) * &w;
    let edge = sigma2 * ((1.0 + gamma.sqrt()).powi(2) - 1.0);
    let kept = spectral_map(&whitened, |l| if l >= edge { l } else { 0.0 });
    symmetrize(&(&w_inv * kept * &w_inv * n))
}

/// The per-block linear map `S -> sum_g n_g C_g S C_g`.
pub struct BlockSystem {
    pub counts: Vec<f64>,
    pub squares: Vec<DMatrix<f64>>,
}

impl BlockSystem {
    pub fn apply(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(s.nrows(), s.ncols());
        for (n, c) in self.counts.iter().zip(&self.squares) {
            out += c * s * c * *n;
        }
        out
    }

    /// Preconditioned CG with `R -> Q^{-1} R Q^{-1} / n`.
    pub fn solve(
        &self,
        rhs: &DMatrix<f64>,
        q_bar: &DMatrix<f64>,
        n: f64,
        opts: &CovarianceOptions,
    ) -> Result<(DMatrix<f64>, usize, f64)> {
        let q = rhs.nrows();
        let bnorm = rhs.norm();
        if bnorm == 0.0 {
            return Ok((DMatrix::zeros(q, q), 0, 0.0));
        }
        let (_, qmax) = crate::linalg::eigen_range(q_bar);
        let floor = 1e-6 * qmax.max(f64::MIN_POSITIVE);
        let q_inv = spectral_map(q_bar, |l| 1.0 / l.max(floor));
        let precond = |r: &DMatrix<f64>| symmetrize(&(&q_inv * r * &q_inv / n));
        let dot = |a: &DMatrix<f64>, b: &DMatrix<f64>| a.dot(b);

        let mut x = precond(rhs);
        let mut r = rhs - self.apply(&x);
        let mut z = precond(&r);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for it in 0..opts.cg_maxiter {
            let res = r.norm() / bnorm;
            if res <= opts.cg_tol {
                return Ok((symmetrize(&x), it, res));
            }
            let ap = self.apply(&p);
            let alpha = rz / dot(&p, &ap);
            x += &p * alpha;
            r -= &ap * alpha;
            z = precond(&r);
            let rz_new = dot(&r, &z);
            p = &z + &p * (rz_new / rz);
            rz = rz_new;
        }
        let res = r.norm() / bnorm;
        if res <= opts.cg_tol {
            return Ok((symmetrize(&x), opts.cg_maxiter, res));
        }
        Err(Error::CgNotConverged {
            iterations: opts.cg_maxiter,
            residual: res,
        })
    }
}

/// Mean estimate with the default regularization `1e-10 trace / p`.
pub fn estimate_mean(coeffs: &[FBCoeffs], groups: &[usize], ops: &[BlockOperator]) -> Result<MeanEstimate> {
    check_inputs(coeffs, groups, ops)?;
    GroupMoments::new(coeffs, groups, ops.len())?.mean(ops, 1e-10)
}

pub fn estimate_covariance(
    coeffs: &[FBCoeffs],
    groups: &[usize],
    ops: &[BlockOperator],
    mean: &MeanEstimate,
    sigma2: f64,
    opts: &CovarianceOptions,
) -> Result<BlockCovariance> {
    check_inputs(coeffs, groups, ops)?;
    GroupMoments::new(coeffs, groups, ops.len())?.covariance(ops, mean, sigma2, opts)
}

/// `Var(c) = mu^T S 1 / (|mu|^2 mu^T 1)`, clamped at zero.
pub fn estimate_var_c(sigma_cx0: &DMatrix<f64>, mu0: &DVector<f64>, ones0: &DVector<f64>) -> Result<VarianceEstimate> {
    if mu0.len() != ones0.len() || sigma_cx0.nrows() != mu0.len() {
        return Err(Error::mismatch(mu0.len(), sigma_cx0.nrows()));
    }
    let mu_ones = mu0.dot(ones0);
    if !(mu_ones.abs() >= 1e-12 * mu0.norm() * ones0.norm()) || mu0.norm() == 0.0 {
        return Err(Error::Degenerate(
            "mean is orthogonal to the ones vector".into(),
        ));
    }
    let raw = mu0.dot(&(sigma_cx0 * ones0)) / (mu0.norm_squared() * mu_ones);
    if raw > 1.0 {
        warn!("contrast variance estimate {raw:.3} exceeds 1");
    }
    Ok(VarianceEstimate {
        var_c: raw.max(0.0),
        raw_var_c: raw,
    })
}

fn mean_outer(mean: &[Complex64]) -> DMatrix<f64> {
    let q = mean.len();
    DMatrix::from_fn(q, q, |i, j| (mean[i] * mean[j].conj()).re)
}

/// `Sigma_x = (Sigma_cx - v mu mu^T) / (v + 1)` per block.
pub fn split_sigma_x(sigma_cx: &BlockCovariance, var_c: f64, mean: &MeanEstimate) -> BlockCovariance {
    BlockCovariance {
        blocks: sigma_cx
            .blocks
            .iter()
            .enumerate()
            .map(|(k, s)| (s - mean_outer(mean.coeffs.block(k)) * var_c) / (var_c + 1.0))
            .collect(),
    }
}

/// `Sigma_cx = (v + 1) Sigma_x + v mu mu^T` per block.
pub fn recombine(sigma_x: &BlockCovariance, var_c: f64, mean: &MeanEstimate) -> BlockCovariance {
    BlockCovariance {
        blocks: sigma_x
            .blocks
            .iter()
            .enumerate()
            .map(|(k, s)| s * (var_c + 1.0) + mean_outer(mean.coeffs.block(k)) * var_c)
            .collect(),
    }
}

/// Output of a block-0 refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub matrix: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Eigenvalue removed from the ones direction (Gram-Schmidt only).
    pub discarded: f64,
}

/// Re-orthogonalizes the eigenvectors against `ones` by QR, clips negative
/// eigenvalues and zeroes the one paired with the ones direction.
pub fn refine_gs(sigma_x0: &DMatrix<f64>, ones0: &DVector<f64>) -> Result<Refinement> {
    let p = sigma_x0.nrows();
    if ones0.len() != p || sigma_x0.ncols() != p {
        return Err(Error::mismatch(p, ones0.len()));
    }
    let (values, vectors) = sorted_eigen(sigma_x0);
    let clipped = values.map(|l| l.max(0.0));
    let mut x = DMatrix::zeros(p, p);
    x.set_column(0, &(ones0 / ones0.norm()));
    for j in 1..p {
        x.set_column(j, &vectors.column(j - 1));
    }
    let q = x.qr().q();
    let mut out = DMatrix::zeros(p, p);
    for j in 0..p.saturating_sub(1) {
        let u = q.column(j + 1);
        out += u * u.transpose() * clipped[j];
    }
    let discarded = clipped[p - 1];
    let top = clipped.iter().copied().fold(0.0, f64::max);
    if discarded > 1e-10 * top {
        warn!("Gram-Schmidt refinement discarded eigenvalue {discarded:.3e} (largest {top:.3e})");
    }
    Ok(Refinement {
        matrix: symmetrize(&out),
        iterations: 0,
        converged: true,
        discarded,
    })
}

/// Nearest `S` with `S >= 0` and `S ones = 0` by Dykstra's alternating
/// projections. The returned matrix is the last iterate projected onto the
/// cone and then onto the subspace; `P A P` with `A >= 0` is PSD, so both
/// constraints hold to round-off.
pub fn refine_sdp(sigma_x0: &DMatrix<f64>, ones0: &DVector<f64>, tol: f64, maxiter: usize) -> Result<Refinement> {
    let p = sigma_x0.nrows();
    if ones0.len() != p || sigma_x0.ncols() != p {
        return Err(Error::mismatch(p, ones0.len()));
    }
    let u = ones0 / ones0.norm();
    let proj = DMatrix::identity(p, p) - &u * u.transpose();
    let subspace = |s: &DMatrix<f64>| symmetrize(&(&proj * s * &proj));

    let mut x = symmetrize(sigma_x0);
    let mut psd_inc = DMatrix::zeros(p, p);
    let mut sub_inc = DMatrix::zeros(p, p);
    for it in 1..=maxiter {
        let y = psd_clip(&(&x + &psd_inc));
        psd_inc = &x + &psd_inc - &y;
        let next = subspace(&(&y + &sub_inc));
        sub_inc = &y + &sub_inc - &next;
        let change = (&next - &x).norm();
        x = next;
        if change < tol {
            return Ok(Refinement {
                matrix: subspace(&psd_clip(&x)),
                iterations: it,
                converged: true,
                discarded: 0.0,
            });
        }
    }
    warn!("alternating projections stopped after {maxiter} iterations");
    Ok(Refinement {
        matrix: subspace(&psd_clip(&x)),
        iterations: maxiter,
        converged: false,
        discarded: 0.0,
    })
}

/// Constraint residuals `(|S 1| / (|S|_F |1|), lambda_min / lambda_max)`.
pub fn constraint_residuals(s: &DMatrix<f64>, ones0: &DVector<f64>) -> (f64, f64) {
    let fro = s.norm();
    let null = if fro == 0.0 {
        0.0
    } else {
        (s * ones0).norm() / (fro * ones0.norm())
    };
    let (lo, hi) = crate::linalg::eigen_range(s);
    let ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    (null, ratio)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCOV";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonBlock {
    k: usize,
    dim: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonCovariance {
    version: u32,
    blocks: Vec<JsonBlock>,
}

impl BlockCovariance {
    /// Binary checkpoint: magic `CCOV`, version, block count, then per block
    /// `(k, dim)` as little-endian `u32` and `dim^2` column-major `f64`.
    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (k, b) in self.blocks.iter().enumerate() {
            buf.extend_from_slice(&(k as u32).to_le_bytes());
            buf.extend_from_slice(&(b.nrows() as u32).to_le_bytes());
            for v in b.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            if end > buf.len() {
                return Err(Error::Truncated {
                    expected: end as u64,
                    actual: buf.len() as u64,
                });
            }
            let s = &buf[pos..end];
            pos = end;
            Ok(s)
        };
        let magic = take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::invalid("not a covariance checkpoint"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("checkpoint version {version}")));
        }
        let count = u32_at(take(4)?) as usize;
        let mut blocks = Vec::with_capacity(count);
        for expected in 0..count {
            let k = u32_at(take(4)?) as usize;
            let dim = u32_at(take(4)?) as usize;
            if k != expected {
                return Err(Error::invalid(format!("block {k} out of order")));
            }
            let raw = take(8 * dim * dim)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push(DMatrix::from_vec(dim, dim, data));
        }
        Ok(BlockCovariance { blocks })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = JsonCovariance {
            version: CHECKPOINT_VERSION,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(k, b)| JsonBlock {
                    k,
                    dim: b.nrows(),
                    data: b.iter().copied().collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JsonCovariance = serde_json::from_str(text)?;
        let mut blocks = Vec::with_capacity(doc.blocks.len());
        for (expected, b) in doc.blocks.into_iter().enumerate() {
            if b.k != expected || b.data.len() != b.dim * b.dim {
                return Err(Error::invalid(format!("malformed block {}", b.k)));
            }
            blocks.push(DMatrix::from_vec(b.dim, b.dim, b.data));
        }
        Ok(BlockCovariance { blocks })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(p: usize) -> DVector<f64> {
        DVector::from_fn(p, |i, _| 1.0 + 0.1 * i as f64)
    }

    #[test]
    fn var_c_exact_for_rank_one() {
        let mu = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        let s = &mu * mu.transpose() * 0.25;
        let v = estimate_var_c(&s, &mu, &ones(3)).unwrap();
        assert!((v.var_c - 0.25).abs() < 1e-14);
    }

    #[test]
    fn var_c_clamps_and_rejects_orthogonal_mean() {
        let mu = DVector::from_vec(vec![1.0, 0.0]);
        let s = -(&mu * mu.transpose());
        let v = estimate_var_c(&s, &mu, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(v.var_c, 0.0);
        assert!(v.raw_var_c < 0.0);
        let o = DVector::from_vec(vec![0.0, 1.0]);
        assert!(estimate_var_c(&s, &mu, &o).is_err());
    }

    #[test]
    fn sdp_negative_definite_goes_to_zero() {
        let r = refine_sdp(&(-DMatrix::<f64>::identity(4, 4)), &ones(4), 1e-8, 1000).unwrap();
        assert!(r.matrix.amax() <= 1e-8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cov = BlockCovariance::new(vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]),
            DMatrix::from_row_slice(1, 1, &[3.0]),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cov.bin");
        cov.write_checkpoint(&path).unwrap();
        assert_eq!(BlockCovariance::read_checkpoint(&path).unwrap(), cov);
        assert_eq!(BlockCovariance::from_json(&cov.to_json().unwrap()).unwrap(), cov);
        std::fs::write(&path, b"CCOV\x01\x00\x00\x00\x02\x00").unwrap();
        assert!(matches!(
            BlockCovariance::read_checkpoint(&path),
            Err(Error::Truncated { .. })
        ));
    }
}
