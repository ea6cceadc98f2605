//! Ab-initio contrast estimation and covariance Wiener filtering of cryo-EM
//! projection images in a steerable Fourier-Bessel basis.

pub mod config;
pub mod covariance;
pub mod ctf;
pub mod error;
pub mod experiment;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod mrc;
pub mod phantom;
pub mod preprocess;
pub mod restore;
pub mod rng;
pub mod special;
pub mod steerable;

pub use error::{Error, Result};
pub use image::Image;
