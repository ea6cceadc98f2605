//! Radially symmetric contrast transfer function and block operators.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steerable::{FBBasis, FBCoeffs};

/// Microscope parameters of one defocus group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtfParams {
    /// Defocus in micrometres (underfocus positive).
    pub defocus: f64,
    /// Acceleration voltage in kV.
    pub voltage: f64,
    /// Spherical aberration in mm.
    pub cs: f64,
    pub amplitude_contrast: f64,
    /// Pixel size in Angstrom.
    pub pixel_size: f64,
}

impl CtfParams {
    pub fn new(defocus: f64, pixel_size: f64) -> Self {
        CtfParams {
            defocus,
            voltage: 300.0,
            cs: 2.0,
            amplitude_contrast: 0.07,
            pixel_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.defocus > 0.0) {
            problems.push(format!("defocus {} must be > 0", self.defocus));
        }
        if !(self.voltage > 0.0) {
            problems.push(format!("voltage {} must be > 0", self.voltage));
        }
        if !(self.cs >= 0.0) {
            problems.push(format!("cs {} must be >= 0", self.cs));
        }
        if !(0.0..1.0).contains(&self.amplitude_contrast) {
            problems.push(format!(
                "amplitude contrast {} outside [0, 1)",
                self.amplitude_contrast
            ));
        }
        if !(self.pixel_size > 0.0) {
            problems.push(format!("pixel size {} must be > 0", self.pixel_size));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

/// Relativistic electron wavelength in Angstrom for a voltage in kV.
pub fn wavelength(voltage_kv: f64) -> f64 {
    let v = voltage_kv * 1e3;
    12.2639 / (v * (1.0 + 0.97845e-6 * v)).sqrt()
}

/// CTF at spatial frequency `xi` in 1/Angstrom.
pub fn ctf_value(params: &CtfParams, xi: f64) -> f64 {
    let lambda = wavelength(params.voltage);
    let defocus = params.defocus * 1e4;
    let cs = params.cs * 1e7;
    let xi2 = xi * xi;
    let chi = std::f64::consts::PI * lambda * defocus * xi2
        - 0.5 * std::f64::consts::PI * cs * lambda.powi(3) * xi2 * xi2;
    let w = params.amplitude_contrast;
    -(1.0 - w * w).sqrt() * chi.sin() - w * chi.cos()
}

/// CTF at a frequency given in cycles per pixel.
pub fn ctf_value_per_pixel(params: &CtfParams, xi_pixel: f64) -> f64 {
    ctf_value(params, xi_pixel / params.pixel_size)
}

/// `D` groups with defocus evenly spaced on `[lo, hi]` micrometres.
pub fn defocus_groups(count: usize, lo: f64, hi: f64, pixel_size: f64) -> Vec<CtfParams> {
    (0..count)
        .map(|g| {
            let t = if count > 1 {
                g as f64 / (count - 1) as f64
            } else {
                0.0
            };
            CtfParams::new(lo + t * (hi - lo), pixel_size)
        })
        .collect()
}

/// Block-diagonal real symmetric operator on Fourier-Bessel coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOperator {
    blocks: Vec<DMatrix<f64>>,
}

impl BlockOperator {
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Self {
        BlockOperator { blocks }
    }

    pub fn identity(basis: &FBBasis) -> Self {
        BlockOperator {
            blocks: basis
                .block_sizes()
                .into_iter()
                .map(|q| DMatrix::identity(q, q))
                .collect(),
        }
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
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

    pub fn apply(&self, x: &FBCoeffs) -> Result<FBCoeffs> {
        if x.block_sizes() != self.block_sizes() {
            return Err(Error::mismatch(
                format!("{:?}", self.block_sizes()),
                format!("{:?}", x.block_sizes()),
            ));
        }
        let blocks = self
            .blocks
            .iter()
            .zip(x.blocks())
            .map(|(b, v)| apply_real(b, v))
            .collect();
        Ok(FBCoeffs::from_blocks(blocks))
    }

    /// Block-wise product `self * other`.
    pub fn compose(&self, other: &BlockOperator) -> Result<BlockOperator> {
        if self.block_sizes() != other.block_sizes() {
            return Err(Error::mismatch(
                format!("{:?}", self.block_sizes()),
                format!("{:?}", other.block_sizes()),
            ));
        }
        Ok(BlockOperator {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    pub fn scaled(&self, a: f64) -> BlockOperator {
        BlockOperator {
            blocks: self.blocks.iter().map(|b| b * a).collect(),
        }
    }

    /// Leading `nblocks` blocks.
    pub fn truncated(&self, nblocks: usize) -> BlockOperator {
        BlockOperator {
            blocks: self.blocks.iter().take(nblocks).cloned().collect(),
        }
    }

    /// Largest entry-wise asymmetry over all blocks.
    pub fn asymmetry(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| (b - b.transpose()).amax())
            .fold(0.0, f64::max)
    }
}

/// Real matrix times complex vector.
pub(crate) fn apply_real(m: &DMatrix<f64>, v: &[Complex64]) -> Vec<Complex64> {
    (0..m.nrows())
        .map(|i| {
            let mut s = Complex64::new(0.0, 0.0);
            for (j, x) in v.iter().enumerate() {
                s += x * m[(i, j)];
            }
            s
        })
        .collect()
}

/// Operator of pointwise multiplication by the radial function `f`
/// (argument in cycles per pixel): `B_k = F_k^T diag(w_j f(xi_j)) F_k`.
pub fn radial_operator(basis: &FBBasis, f: impl Fn(f64) -> f64) -> BlockOperator {
    let values: Vec<f64> = basis
        .radial_nodes()
        .iter()
        .zip(basis.radial_weights())
        .map(|(&xi, &w)| w * f(xi))
        .collect();
    let blocks = basis
        .blocks()
        .iter()
        .map(|b| {
            let mut scaled = b.samples.clone();
            for (j, v) in values.iter().enumerate() {
                scaled.row_mut(j).scale_mut(*v);
            }
            let m = b.samples.transpose() * scaled;
            (&m + m.transpose()) * 0.5
        })
        .collect();
    BlockOperator { blocks }
}

pub fn ctf_block_operator(params: &CtfParams, basis: &FBBasis) -> Result<BlockOperator> {
    params.validate()?;
    Ok(radial_operator(basis, |xi| ctf_value_per_pixel(params, xi)))
}

/// Multiplication by `psd^{-1/2}`; `psd` takes cycles per pixel.
pub fn whitening_operator(psd: impl Fn(f64) -> f64, basis: &FBBasis) -> Result<BlockOperator> {
    for &xi in basis.radial_nodes() {
        let p = psd(xi);
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::invalid(format!(
                "noise PSD {p} at frequency {xi} is not positive"
            )));
        }
    }
    Ok(radial_operator(basis, |xi| psd(xi).powf(-0.5)))
}
