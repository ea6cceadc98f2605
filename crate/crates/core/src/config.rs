//! Experiment configuration and dataset manifests (versioned JSON).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ctf::CtfParams;
use crate::error::{Error, Result};
use crate::phantom::{NoiseKind, NoiseModel, PhantomVolume, Rotation};
use crate::restore::SolverOptions;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Method family selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Covariance Wiener filter with the unrefined covariance.
    Cwf,
    /// Gram-Schmidt refinement of block 0.
    Gs,
    /// Semidefinite (Dykstra) refinement of block 0.
    Sdp,
    /// Estimators that see the ground truth.
    Oracle,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cwf, Method::Gs, Method::Sdp, Method::Oracle];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Cwf => "cwf",
            Method::Gs => "gs",
            Method::Sdp => "sdp",
            Method::Oracle => "oracle",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}` (expected cwf, gs, sdp or oracle)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How noise is whitened before estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessMode {
    /// Whiten with the noise model recorded in the manifest.
    KnownPsd,
    /// Corner normalization, corner PSD estimate, background subtraction.
    Corner,
}

/// Parameter sweep and solver settings of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Image side `L` in pixels.
    pub size: usize,
    /// Band limit in cycles per pixel.
    pub band_limit: f64,
    pub snr: Vec<f64>,
    pub n: Vec<usize>,
    pub noise: Vec<NoiseKind>,
    pub methods: Vec<Method>,
    pub defocus_groups: usize,
    /// Defocus range in micrometres.
    pub defocus_range: [f64; 2],
    pub contrast_range: [f64; 2],
    /// Pixel size in Angstrom; defaults to `1.34 * 360 / L`.
    pub pixel_size: Option<f64>,
    /// Phantom JSON file; the built-in phantom when absent.
    pub phantom: Option<PathBuf>,
    pub preprocess: PreprocessMode,
    /// Number of leading images restored in pixel space for NRMSE and FRC.
    pub restore_images: usize,
    pub solver: SolverOptions,
    pub output: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            size: 64,
            band_limit: 0.5,
            snr: vec![0.1],
            n: vec![2000],
            noise: vec![NoiseKind::White],
            methods: Method::ALL.to_vec(),
            defocus_groups: 10,
            defocus_range: [1.0, 4.0],
            contrast_range: [0.5, 1.5],
            pixel_size: None,
            phantom: None,
            preprocess: PreprocessMode::KnownPsd,
            restore_images: 64,
            solver: SolverOptions::default(),
            output: PathBuf::from("results"),
            seed: 1,
        }
    }
}

/// Keys accepted at each level of the config file.
const CONFIG_KEYS: &[&str] = &[
    "schema_version",
    "size",
    "band_limit",
    "snr",
    "n",
    "noise",
    "methods",
    "defocus_groups",
    "defocus_range",
    "contrast_range",
    "pixel_size",
    "phantom",
    "preprocess",
    "restore_images",
    "solver",
    "output",
    "seed",
];
const SOLVER_KEYS: &[&str] = &["covariance", "sdp_tol", "sdp_maxiter", "mean_regularization", "contrast_floor"];
const COVARIANCE_KEYS: &[&str] = &["cg_tol", "cg_maxiter", "shrink"];

fn unknown_keys(value: &serde_json::Value, allowed: &[&str], prefix: &str, out: &mut Vec<String>) {
    if let Some(obj) = value.as_object() {
        for key in obj.keys() {
            if !allowed.contains(&key.as_str()) {
                out.push(format!("unknown key `{prefix}{key}`"));
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates, reporting every problem at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let mut problems = Vec::new();
        if !value.is_object() {
            return Err(Error::Config(vec!["config must be a JSON object".into()]));
        }
        unknown_keys(&value, CONFIG_KEYS, "", &mut problems);
        if let Some(solver) = value.get("solver") {
            unknown_keys(solver, SOLVER_KEYS, "solver.", &mut problems);
            if let Some(cov) = solver.get("covariance") {
                unknown_keys(cov, COVARIANCE_KEYS, "solver.covariance.", &mut problems);
            }
        }
        match value.get("schema_version") {
            None => problems.push("missing `schema_version`".into()),
            Some(v) if v.as_u64() != Some(CONFIG_SCHEMA_VERSION as u64) => problems.push(format!(
                "unsupported schema_version {v} (expected {CONFIG_SCHEMA_VERSION})"
            )),
            _ => {}
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
            .unwrap_or_else(|| crate::phantom::default_pixel_size(self.size))
    }

    /// Checks every field and lists all violations.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            p.push(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.size < 16 {
            p.push(format!("size {} must be >= 16", self.size));
        }
        if !(self.band_limit > 0.0 && self.band_limit <= 0.5) {
            p.push(format!("band_limit {} outside (0, 0.5]", self.band_limit));
        }
        if self.snr.is_empty() {
            p.push("snr list is empty".into());
        }
        for s in &self.snr {
            if !(*s > 0.0 && s.is_finite()) {
                p.push(format!("snr {s} must be finite and > 0"));
            }
        }
        if self.n.is_empty() {
            p.push("n list is empty".into());
        }
        for n in &self.n {
            if *n < 2 {
                p.push(format!("n {n} must be >= 2"));
            }
        }
        if self.noise.is_empty() {
            p.push("noise list is empty".into());
        }
        if self.methods.is_empty() {
            p.push("methods list is empty".into());
        }
        if self.defocus_groups == 0 {
            p.push("defocus_groups must be >= 1".into());
        }
        let [dlo, dhi] = self.defocus_range;
        if !(dlo > 0.0 && dlo <= dhi && dhi.is_finite()) {
            p.push(format!("defocus_range [{dlo}, {dhi}] must satisfy 0 < lo <= hi"));
        }
        let [clo, chi] = self.contrast_range;
        if !(clo > 0.0 && clo <= chi && chi.is_finite()) {
            p.push(format!("contrast_range [{clo}, {chi}] must satisfy 0 < lo <= hi"));
        }
        if let Some(px) = self.pixel_size {
            if !(px > 0.0 && px.is_finite()) {
                p.push(format!("pixel_size {px} must be > 0"));
            }
        }
        if self.restore_images == 0 {
            p.push("restore_images must be >= 1".into());
        }
        let s = &self.solver;
        if !(s.covariance.cg_tol > 0.0) {
            p.push(format!("solver.covariance.cg_tol {} must be > 0", s.covariance.cg_tol));
        }
        if s.covariance.cg_maxiter == 0 {
            p.push("solver.covariance.cg_maxiter must be >= 1".into());
        }
        if !(s.sdp_tol > 0.0) {
            p.push(format!("solver.sdp_tol {} must be > 0", s.sdp_tol));
        }
        if s.sdp_maxiter == 0 {
            p.push("solver.sdp_maxiter must be >= 1".into());
        }
        if !(s.mean_regularization > 0.0) {
            p.push(format!("solver.mean_regularization {} must be > 0", s.mean_regularization));
        }
        if !(s.contrast_floor > 0.0) {
            p.push(format!("solver.contrast_floor {} must be > 0", s.contrast_floor));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Methods without duplicates, in canonical order.
    pub fn method_set(&self) -> Vec<Method> {
        self.methods.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Every `(snr, n, noise)` combination in config order.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &noise in &self.noise {
            for &snr in &self.snr {
                for &n in &self.n {
                    out.push(GridPoint { snr, n, noise });
                }
            }
        }
        out
    }
}

/// One point of the parameter sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub snr: f64,
    pub n: usize,
    pub noise: NoiseKind,
}

impl GridPoint {
    /// Output subdirectory name.
    pub fn dir_name(&self) -> String {
        format!("snr{}_n{}_{}", self.snr, self.n, self.noise)
    }
}

/// Per-image metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub group: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
}

/// Description of an image stack on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Stack file, relative to the manifest.
    pub stack: String,
    pub n: usize,
    pub size: usize,
    pub pixel_size: f64,
    pub images: Vec<ImageRecord>,
    pub ctfs: Vec<CtfParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomVolume>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            p.push(format!(
                "unsupported manifest schema_version {} (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.n != self.images.len() {
            p.push(format!("n = {} but {} image records", self.n, self.images.len()));
        }
        if self.ctfs.is_empty() {
            p.push("no CTF groups".into());
        }
        for (i, rec) in self.images.iter().enumerate() {
            if rec.group >= self.ctfs.len() {
                p.push(format!("image {i} references missing CTF group {}", rec.group));
            }
            if let Some(r) = rec.rotation {
                let m = nalgebra::Matrix3::from_fn(|a, b| r[a][b]);
                if Rotation::from_matrix(m).is_err() {
                    p.push(format!("image {i} has a non-orthogonal rotation"));
                }
            }
        }
        for (g, c) in self.ctfs.iter().enumerate() {
            if let Err(e) = c.validate() {
                p.push(format!("ctf {g}: {e}"));
            }
        }
        if let Some(noise) = &self.noise {
            if let Err(e) = noise.validate() {
                p.push(e.to_string());
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn groups(&self) -> Vec<usize> {
        self.images.iter().map(|r| r.group).collect()
    }

    /// True contrasts when every record carries one.
    pub fn contrasts(&self) -> Option<Vec<f64>> {
        self.images.iter().map(|r| r.contrast).collect()
    }

    /// Rotations when every record carries one.
    pub fn rotations(&self) -> Option<Result<Vec<Rotation>>> {
        self.images
            .iter()
            .map(|r| r.rotation)
            .collect::<Option<Vec<_>>>()
            .map(|rs| {
                rs.into_iter()
                    .map(|r| Rotation::from_matrix(nalgebra::Matrix3::from_fn(|a, b| r[a][b])))
                    .collect()
            })
    }
}
