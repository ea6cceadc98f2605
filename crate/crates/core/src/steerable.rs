//! Fourier-Bessel steerable basis on the band-limit disk.
//!
//! Basis functions live in the 2-D Fourier domain (frequencies in cycles per
//! pixel) on the disk `xi <= r`:
//!
//! ```text
//! psi_{k,q}(xi, theta) = N_{k,q} J_k(R_{k,q} xi / r) exp(i k theta)
//! N_{k,q} = 1 / (r sqrt(pi) |J_{k+1}(R_{k,q})|)
//! ```
//!
//! `expand` projects the discrete-time Fourier transform of an image onto
//! these functions. The angular integral is done in closed form (Jacobi-Anger),
//! the radial one with Gauss-Legendre quadrature, so a pixel at radius `rho`
//! and angle `phi` contributes `(-i)^k exp(-i k phi) T_k[q](rho)` to
//! coefficient `(k, q)`. Only `k >= 0` is stored; coefficients of real images
//! satisfy `a_{-k} = conj(a_k)`, and norms count every `k > 0` block twice.
//!
//! `evaluate` is the minimum-norm image with given coefficients, i.e. the
//! pseudo-inverse of `expand`, computed by preconditioned conjugate gradient.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::special::{bessel_j, bessel_j_all, bessel_zeros_below, gauss_legendre};

const EVALUATE_TOL: f64 = 1e-13;
const EVALUATE_MAX_ITER: usize = 200;

/// Radial functions of one angular frequency `k`.
#[derive(Clone, Debug)]
pub struct RadialBlock {
    pub angular: usize,
    /// `R_{k,q}` for `q = 1..=count`.
    pub roots: Vec<f64>,
    /// `N_{k,q}`.
    pub norms: Vec<f64>,
    /// `F_k[j, q] = sqrt(2 pi) N_{k,q} J_k(R_{k,q} xi_j / r)`; orthonormal
    /// columns under the radial quadrature weights.
    pub samples: DMatrix<f64>,
}

impl RadialBlock {
    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }
}

/// Pixels grouped by distance from the image center.
#[derive(Clone, Debug)]
struct Rings {
    radii: Vec<f64>,
    multiplicity: Vec<f64>,
    pixel_ring: Vec<u32>,
    /// `exp(-i phi)` per pixel.
    pixel_phase: Vec<Complex64>,
}

impl Rings {
    fn new(size: usize) -> Self {
        let c = (size / 2) as i64;
        let mut sq: Vec<i64> = Vec::with_capacity(size * size);
        for row in 0..size as i64 {
            for col in 0..size as i64 {
                let (x, y) = (col - c, row - c);
                sq.push(x * x + y * y);
            }
        }
        let mut unique = sq.clone();
        unique.sort_unstable();
        unique.dedup();
        let mut multiplicity = vec![0.0; unique.len()];
        let pixel_ring: Vec<u32> = sq
            .iter()
            .map(|s| {
                let idx = unique.binary_search(s).unwrap();
                multiplicity[idx] += 1.0;
                idx as u32
            })
            .collect();
        let mut pixel_phase = Vec::with_capacity(size * size);
        for row in 0..size as i64 {
            for col in 0..size as i64 {
                let (x, y) = ((col - c) as f64, (row - c) as f64);
                let phi = if x == 0.0 && y == 0.0 { 0.0 } else { y.atan2(x) };
                pixel_phase.push(Complex64::from_polar(1.0, -phi));
            }
        }
        Rings {
            radii: unique.iter().map(|&s| (s as f64).sqrt()).collect(),
            multiplicity,
            pixel_ring,
            pixel_phase,
        }
    }

    fn len(&self) -> usize {
        self.radii.len()
    }
}

/// Fourier-Bessel basis for `L x L` images with band limit `r`.
#[derive(Clone)]
pub struct FBBasis {
    size: usize,
    band_limit: f64,
    blocks: Vec<RadialBlock>,
    nodes: Vec<f64>,
    /// Gauss-Legendre weight times `xi_j` (radial area element).
    weights: Vec<f64>,
    rings: Rings,
    /// `T_k`, one row per radial index, one column per ring.
    analysis: Vec<DMatrix<f64>>,
    /// Cholesky factors of the diagonal blocks of `E E^*`.
    precond: Vec<Cholesky<f64, Dyn>>,
}

impl std::fmt::Debug for FBBasis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FBBasis")
            .field("size", &self.size)
            .field("band_limit", &self.band_limit)
            .field("blocks", &self.blocks.len())
            .field("count", &self.count())
            .field("radial_nodes", &self.nodes.len())
            .finish()
    }
}

/// Truncation bound on `R_{k,q}`: `2 pi r (L/2)`.
pub fn truncation_bound(size: usize, band_limit: f64) -> f64 {
    std::f64::consts::PI * band_limit * size as f64
}

impl FBBasis {
    pub fn new(size: usize, band_limit: f64) -> Result<Self> {
        if size < 8 {
            return Err(Error::invalid(format!("image size {size} < 8")));
        }
        if !(band_limit > 0.0 && band_limit <= 0.5) {
            return Err(Error::invalid(format!(
                "band limit {band_limit} outside (0, 1/2]"
            )));
        }
        let bound = truncation_bound(size, band_limit);
        let zeros = bessel_zeros_below(bound);
        let rings = Rings::new(size);
        let rho_max = rings.radii.last().copied().unwrap_or(0.0);

        // Integrand bandwidth: basis oscillation plus the pixel-radius kernel.
        let phase = bound + 2.0 * std::f64::consts::PI * band_limit * rho_max;
        let n_nodes = (0.625 * phase).ceil() as usize + 40;
        let (nodes, gl) = gauss_legendre(n_nodes, 0.0, band_limit);
        let weights: Vec<f64> = nodes.iter().zip(&gl).map(|(x, w)| x * w).collect();

        let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
        let blocks: Vec<RadialBlock> = zeros
            .into_iter()
            .enumerate()
            .map(|(k, roots)| {
                let norms: Vec<f64> = roots
                    .iter()
                    .map(|&rt| {
                        1.0 / (band_limit
                            * std::f64::consts::PI.sqrt()
                            * bessel_j(k + 1, rt).abs())
                    })
                    .collect();
                let samples = DMatrix::from_fn(nodes.len(), roots.len(), |j, q| {
                    sqrt_2pi * norms[q] * bessel_j(k, roots[q] * nodes[j] / band_limit)
                });
                RadialBlock {
                    angular: k,
                    roots,
                    norms,
                    samples,
                }
            })
            .collect();

        let analysis = build_analysis(&blocks, &nodes, &weights, &rings);
        let mut precond = Vec::with_capacity(blocks.len());
        for t in &analysis {
            let mut scaled = t.clone();
            for (c, m) in rings.multiplicity.iter().enumerate() {
                scaled.column_mut(c).scale_mut(*m);
            }
            let gram = &scaled * t.transpose();
            let chol = Cholesky::new(gram)
                .ok_or_else(|| Error::Singular("basis Gram block not positive definite".into()))?;
            precond.push(chol);
        }

        Ok(FBBasis {
            size,
            band_limit,
            blocks,
            nodes,
            weights,
            rings,
            analysis,
            precond,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn band_limit(&self) -> f64 {
        self.band_limit
    }

    pub fn blocks(&self) -> &[RadialBlock] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &RadialBlock {
        &self.blocks[k]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn max_angular(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    /// Number of stored `(k, q)` pairs (`k >= 0`).
    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    /// Real dimension of the coefficient space for real images.
    pub fn real_dim(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| if b.angular == 0 { b.len() } else { 2 * b.len() })
            .sum()
    }

    /// Ordered `(k, q)` index set, `q` starting at 1.
    pub fn index_set(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .flat_map(|b| (1..=b.len()).map(move |q| (b.angular, q)))
            .collect()
    }

    /// Radial quadrature nodes in cycles per pixel.
    pub fn radial_nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Radial quadrature weights including the `xi` area factor.
    pub fn radial_weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn zeros(&self) -> FBCoeffs {
        FBCoeffs {
            blocks: self
                .blocks
                .iter()
                .map(|b| vec![Complex64::new(0.0, 0.0); b.len()])
                .collect(),
        }
    }

    fn check(&self, coeffs: &FBCoeffs) -> Result<()> {
        let sizes = coeffs.block_sizes();
        if sizes != self.block_sizes() {
            return Err(Error::mismatch(
                format!("block sizes {:?}", self.block_sizes()),
                format!("{sizes:?}"),
            ));
        }
        Ok(())
    }

    /// Angular moments `sum_{pixels in ring} x exp(-i k phi)` for `k <= kmax`,
    /// laid out `[k][ring]`.
    fn ring_moments(&self, img: &Image, kmax: usize) -> Vec<Complex64> {
        let nr = self.rings.len();
        let mut acc = vec![Complex64::new(0.0, 0.0); (kmax + 1) * nr];
        for (p, &v) in img.data().iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let ring = self.rings.pixel_ring[p] as usize;
            let z = self.rings.pixel_phase[p];
            let mut zk = Complex64::new(v, 0.0);
            acc[ring] += zk;
            for k in 1..=kmax {
                zk *= z;
                acc[k * nr + ring] += zk;
            }
        }
        acc
    }

    /// Fourier-Bessel coefficients of the image's Fourier transform.
    pub fn expand(&self, img: &Image) -> Result<FBCoeffs> {
        self.expand_blocks(img, self.blocks.len())
    }

    /// Coefficients of blocks `0..nblocks` only.
    pub fn expand_blocks(&self, img: &Image, nblocks: usize) -> Result<FBCoeffs> {
        img.check_size(self.size)?;
        let nblocks = nblocks.clamp(1, self.blocks.len());
        let nr = self.rings.len();
        let acc = self.ring_moments(img, nblocks - 1);
        let mut blocks = Vec::with_capacity(nblocks);
        for (k, t) in self.analysis.iter().take(nblocks).enumerate() {
            let moments = &acc[k * nr..(k + 1) * nr];
            let phase = neg_i_pow(k);
            let block = (0..t.nrows())
                .map(|q| {
                    let mut s = Complex64::new(0.0, 0.0);
                    for (c, m) in moments.iter().enumerate() {
                        s += m * t[(q, c)];
                    }
                    if k == 0 {
                        Complex64::new(s.re, 0.0)
                    } else {
                        phase * s
                    }
                })
                .collect();
            blocks.push(block);
        }
        Ok(FBCoeffs { blocks })
    }

    /// Block-0 coefficients only (the only block carrying the pixel sum).
    pub fn expand_block0(&self, img: &Image) -> Result<DVector<f64>> {
        img.check_size(self.size)?;
        let mut ring_sums = DVector::zeros(self.rings.len());
        for (p, &v) in img.data().iter().enumerate() {
            ring_sums[self.rings.pixel_ring[p] as usize] += v;
        }
        Ok(&self.analysis[0] * ring_sums)
    }

    /// Adjoint of `expand` with respect to the coefficient inner product
    /// that counts `k > 0` blocks twice.
    pub fn adjoint(&self, coeffs: &FBCoeffs) -> Result<Image> {
        self.check(coeffs)?;
        let nr = self.rings.len();
        let kmax = self.max_angular();
        // g_k[ring] = i^k (T_k^T b_k)[ring]
        let mut g = vec![Complex64::new(0.0, 0.0); (kmax + 1) * nr];
        for (k, t) in self.analysis.iter().enumerate() {
            let phase = neg_i_pow(k).conj();
            let b = &coeffs.blocks[k];
            for c in 0..nr {
                let mut s = Complex64::new(0.0, 0.0);
                for (q, bq) in b.iter().enumerate() {
                    s += bq * t[(q, c)];
                }
                g[k * nr + c] = if k == 0 { s } else { 2.0 * phase * s };
            }
        }
        let mut img = Image::zeros(self.size);
        for (p, v) in img.data_mut().iter_mut().enumerate() {
            let ring = self.rings.pixel_ring[p] as usize;
            // exp(+i k phi) = conj(pixel_phase)^k
            let z = self.rings.pixel_phase[p].conj();
            let mut zk = Complex64::new(1.0, 0.0);
            let mut s = g[ring].re;
            for k in 1..=kmax {
                zk *= z;
                s += (g[k * nr + ring] * zk).re;
            }
            *v = s;
        }
        Ok(img)
    }

    fn gram_apply(&self, coeffs: &FBCoeffs) -> FBCoeffs {
        let img = self.adjoint(coeffs).expect("matching coefficients");
        self.expand(&img).expect("matching image")
    }

    fn precondition(&self, r: &FBCoeffs) -> FBCoeffs {
        let mut out = r.clone();
        for (k, chol) in self.precond.iter().enumerate() {
            let b = &r.blocks[k];
            let re = DVector::from_iterator(b.len(), b.iter().map(|c| c.re));
            let im = DVector::from_iterator(b.len(), b.iter().map(|c| c.im));
            let re = chol.solve(&re);
            let im = chol.solve(&im);
            for (q, d) in out.blocks[k].iter_mut().enumerate() {
                *d = Complex64::new(re[q], im[q]);
            }
        }
        out
    }

    /// Minimum-norm image whose expansion equals `coeffs`.
    pub fn evaluate(&self, coeffs: &FBCoeffs) -> Result<Image> {
        self.check(coeffs)?;
        let bnorm = coeffs.norm();
        if bnorm == 0.0 {
            return Ok(Image::zeros(self.size));
        }
        let mut x = self.precondition(coeffs);
        let mut r = coeffs.clone();
        r.axpy(-1.0, &self.gram_apply(&x));
        let mut z = self.precondition(&r);
        let mut p = z.clone();
        let mut rz = r.dot(&z);
        for _ in 0..EVALUATE_MAX_ITER {
            if r.norm() <= EVALUATE_TOL * bnorm {
                return self.adjoint(&x);
            }
            let gp = self.gram_apply(&p);
            let alpha = rz / p.dot(&gp);
            x.axpy(alpha, &p);
            r.axpy(-alpha, &gp);
            z = self.precondition(&r);
            let rz_new = r.dot(&z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.scale(beta);
            p.axpy(1.0, &z);
        }
        let residual = r.norm() / bnorm;
        if residual > 1e-10 {
            return Err(Error::CgNotConverged {
                iterations: EVALUATE_MAX_ITER,
                residual,
            });
        }
        self.adjoint(&x)
    }

    /// Coefficients of the all-ones image's Fourier transform (a delta at
    /// the frequency origin): `N_{0,q}` in block 0, zero elsewhere.
    pub fn ones_vector(&self) -> OnesVector {
        OnesVector {
            values: DVector::from_vec(self.blocks[0].norms.clone()),
        }
    }
}

fn neg_i_pow(k: usize) -> Complex64 {
    match k % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, -1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, 1.0),
    }
}

/// `T_k[q, ring] = sqrt(2 pi) sum_j w_j F_k[j, q] J_k(2 pi xi_j rho)`.
fn build_analysis(
    blocks: &[RadialBlock],
    nodes: &[f64],
    weights: &[f64],
    rings: &Rings,
) -> Vec<DMatrix<f64>> {
    let kmax = blocks.len() - 1;
    let sqrt_2pi = (2.0 * std::f64::consts::PI).sqrt();
    // weighted[k] = sqrt(2 pi) * diag(w) F_k, nodes x q
    let weighted: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|b| {
            let mut m = b.samples.clone();
            for (j, w) in weights.iter().enumerate() {
                m.row_mut(j).scale_mut(sqrt_2pi * w);
            }
            m
        })
        .collect();

    let columns: Vec<Vec<Vec<f64>>> = rings
        .radii
        .par_iter()
        .map(|&rho| {
            let mut bessel = Vec::with_capacity(kmax + 1);
            // table[j][k] = J_k(2 pi xi_j rho)
            let table: Vec<Vec<f64>> = nodes
                .iter()
                .map(|&xi| {
                    bessel_j_all(kmax, 2.0 * std::f64::consts::PI * xi * rho, &mut bessel);
                    bessel.clone()
                })
                .collect();
            weighted
                .iter()
                .enumerate()
                .map(|(k, wk)| {
                    (0..wk.ncols())
                        .map(|q| (0..nodes.len()).map(|j| wk[(j, q)] * table[j][k]).sum())
                        .collect()
                })
                .collect()
        })
        .collect();

    blocks
        .iter()
        .enumerate()
        .map(|(k, b)| DMatrix::from_fn(b.len(), rings.len(), |q, c| columns[c][k][q]))
        .collect()
}

/// Per-block complex Fourier-Bessel coefficients, `k >= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FBCoeffs {
    blocks: Vec<Vec<Complex64>>,
}

impl FBCoeffs {
    pub fn from_blocks(blocks: Vec<Vec<Complex64>>) -> Self {
        FBCoeffs { blocks }
    }

    pub fn blocks(&self) -> &[Vec<Complex64>] {
        &self.blocks
    }

    pub fn block(&self, k: usize) -> &[Complex64] {
        &self.blocks[k]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [Complex64] {
        &mut self.blocks[k]
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.len()).collect()
    }

    /// Real part of block 0.
    pub fn block0(&self) -> DVector<f64> {
        DVector::from_iterator(self.blocks[0].len(), self.blocks[0].iter().map(|c| c.re))
    }

    pub fn set_block0(&mut self, v: &DVector<f64>) {
        for (d, s) in self.blocks[0].iter_mut().zip(v.iter()) {
            *d = Complex64::new(*s, 0.0);
        }
    }

    /// Real inner product of the Hermitian-extended coefficient vectors
    /// (blocks `k > 0` counted twice, once for `-k`).
    pub fn dot(&self, other: &FBCoeffs) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .enumerate()
            .map(|(k, (a, b))| {
                let s: f64 = a.iter().zip(b).map(|(x, y)| (x.conj() * y).re).sum();
                if k == 0 {
                    s
                } else {
                    2.0 * s
                }
            })
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, a: f64) {
        for b in &mut self.blocks {
            b.iter_mut().for_each(|c| *c *= a);
        }
    }

    pub fn scaled(&self, a: f64) -> FBCoeffs {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &FBCoeffs) {
        for (x, y) in self.blocks.iter_mut().zip(&other.blocks) {
            x.iter_mut().zip(y).for_each(|(x, y)| *x += y * a);
        }
    }

    /// In-plane rotation of the underlying image by `alpha` radians
    /// (counter-clockwise): block `k` picks up `exp(-i k alpha)`.
    pub fn rotated(&self, alpha: f64) -> FBCoeffs {
        FBCoeffs {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(k, b)| {
                    let ph = Complex64::from_polar(1.0, -(k as f64) * alpha);
                    b.iter().map(|c| c * ph).collect()
                })
                .collect(),
        }
    }

    /// Leading `nblocks` blocks.
    pub fn truncated(&self, nblocks: usize) -> FBCoeffs {
        FBCoeffs {
            blocks: self.blocks.iter().take(nblocks).cloned().collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.iter().all(|c| c.re.is_finite() && c.im.is_finite()))
    }
}

/// Block-0 coefficients of the transformed all-ones image.
#[derive(Clone, Debug, PartialEq)]
pub struct OnesVector {
    values: DVector<f64>,
}

impl OnesVector {
    pub fn from_values(values: DVector<f64>) -> Self {
        OnesVector { values }
    }

    pub fn block0(&self) -> &DVector<f64> {
        &self.values
    }

    /// Full coefficient vector (zero outside block 0).
    pub fn to_coeffs(&self, basis: &FBBasis) -> FBCoeffs {
        let mut c = basis.zeros();
        c.set_block0(&self.values);
        c
    }
}

/// Pixel sum of the image represented by `coeffs`: `<1_FB, coeffs>`.
pub fn pixel_sum_fb(coeffs: &FBCoeffs, ones: &OnesVector) -> Result<f64> {
    let b0 = coeffs.block(0);
    if b0.len() != ones.values.len() {
        return Err(Error::mismatch(ones.values.len(), b0.len()));
    }
    Ok(b0.iter().zip(ones.values.iter()).map(|(c, o)| c.re * o).sum())
}
