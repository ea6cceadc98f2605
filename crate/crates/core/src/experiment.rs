//! Staged experiment driver: simulate, preprocess, estimate, restore,
//! evaluate. Each grid point owns one output directory; every stage reads
//! the artifacts of the previous one, so stages can be rerun separately.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DatasetManifest, ExperimentConfig, GridPoint, ImageRecord, Method, PreprocessMode, MANIFEST_SCHEMA_VERSION};
use crate::covariance::GroupMoments;
use crate::ctf::{ctf_value_per_pixel, defocus_groups, radial_operator, BlockOperator, CtfParams};
use crate::error::{Error, Result, StageExt};
use crate::image::{ring_index, Fft2, Image};
use crate::metrics::{average_frc, contrast_errors, frc, group_breakdown, nrmse, spearman, GroupAxis, MetricRow, MetricTable};
use crate::mrc::{read_mrc_stack, write_mrc_stack};
use crate::phantom::{apply_ctf, project_phantom, simulate, NoiseModel, PhantomVolume, SimulationParams};
use crate::preprocess::{background_subtract, corner_normalize, estimate_corner_psd, whiten_image, CornerMask, NoisePSD};
use crate::restore::{
    estimate_contrasts, estimate_model, refine_model, restore_normalize, restore_with_model, sample_moments, template_oracle,
    ContrastEstimates, ContrastMethod, CwfFilter, RefineMethod, RestoreMethod, RestoreOption,
};
use crate::steerable::{FBBasis, FBCoeffs};

/// Pipeline stage selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Preprocess,
    Estimate,
    Restore,
    Evaluate,
    All,
}

impl Stage {
    pub const SEQUENCE: [Stage; 5] = [
        Stage::Simulate,
        Stage::Preprocess,
        Stage::Estimate,
        Stage::Restore,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Preprocess => "preprocess",
            Stage::Estimate => "estimate",
            Stage::Restore => "restore",
            Stage::Evaluate => "evaluate",
            Stage::All => "all",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::SEQUENCE
            .into_iter()
            .chain([Stage::All])
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const STACK_FILE: &str = "stack.mrc";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WHITENED_FILE: &str = "whitened.mrc";
pub const PSD_FILE: &str = "psd.csv";
pub const PREPROCESS_FILE: &str = "preprocess.json";
pub const CONTRASTS_FILE: &str = "contrasts.csv";
pub const MODEL_FILE: &str = "model.json";
pub const RESTORE_FILE: &str = "restore.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FRC_FILE: &str = "frc.csv";
pub const STATUS_FILE: &str = "stage_status.json";
pub const SUMMARY_FILE: &str = "summary.csv";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Outcome of each stage of one grid point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stages: BTreeMap<String, String>,
    pub failed: Option<String>,
}

impl StageStatus {
    fn load(dir: &Path) -> Self {
        fs::read_to_string(dir.join(STATUS_FILE))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default()
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join(STATUS_FILE), serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Driver for one configuration.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Experiment { config })
    }

    pub fn point_dir(&self, point: &GridPoint) -> PathBuf {
        self.config.output.join(point.dir_name())
    }

    /// Runs `stage` on every grid point. A failing point records the error in
    /// its status file; the first failure is returned after all points ran.
    pub fn run(&self, stage: Stage) -> Result<()> {
        fs::create_dir_all(&self.config.output).map_err(|e| Error::io(&self.config.output, e))?;
        let results: Vec<Result<()>> = self
            .config
            .grid()
            .par_iter()
            .map(|point| self.run_point(point, stage))
            .collect();
        results.into_iter().collect::<Result<Vec<_>>>()?;
        if stage == Stage::All {
            self.write_summary()?;
        }
        Ok(())
    }

    pub fn run_point(&self, point: &GridPoint, stage: Stage) -> Result<()> {
        let dir = self.point_dir(point);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stages: Vec<Stage> = match stage {
            Stage::All => Stage::SEQUENCE.to_vec(),
            s => vec![s],
        };
        let mut status = StageStatus::load(&dir);
        status.failed = None;
        for s in stages {
            info!("{}: {}", point.dir_name(), s);
            let result = match s {
                Stage::Simulate => self.simulate(point, &dir),
                Stage::Preprocess => self.preprocess(&dir),
                Stage::Estimate => self.estimate(&dir),
                Stage::Restore => self.restore(&dir),
                Stage::Evaluate => self.evaluate(point, &dir),
                Stage::All => unreachable!("expanded above"),
            }
            .stage(s.name());
            match result {
                Ok(()) => {
                    status.stages.insert(s.name().into(), "ok".into());
                    status.save(&dir)?;
                }
                Err(e) => {
                    status.stages.insert(s.name().into(), "failed".into());
                    status.failed = Some(e.to_string());
                    status.save(&dir)?;
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    fn phantom(&self) -> Result<PhantomVolume> {
        match &self.config.phantom {
            Some(path) => PhantomVolume::load(path),
            None => Ok(PhantomVolume::default()),
        }
    }

    fn basis(&self) -> Result<FBBasis> {
        FBBasis::new(self.config.size, self.config.band_limit)
    }

    fn simulate(&self, point: &GridPoint, dir: &Path) -> Result<()> {
        let c = &self.config;
        let params = SimulationParams {
            size: c.size,
            n: point.n,
            snr: point.snr,
            noise: point.noise,
            contrast_range: (c.contrast_range[0], c.contrast_range[1]),
            ctfs: defocus_groups(c.defocus_groups, c.defocus_range[0], c.defocus_range[1], c.pixel_size()),
            phantom: self.phantom()?,
            seed: c.seed,
        };
        let data = simulate(&params)?;
        write_mrc_stack(&data.images, data.pixel_size(), &dir.join(STACK_FILE))?;
        let images = (0..data.len())
            .map(|i| ImageRecord {
                group: data.groups[i],
                contrast: Some(data.contrasts[i]),
                rotation: Some(data.rotations[i].to_rows()),
            })
            .collect();
        let manifest = DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            stack: STACK_FILE.into(),
            n: data.len(),
            size: data.size,
            pixel_size: data.pixel_size(),
            images,
            ctfs: data.ctfs.clone(),
            noise: Some(data.noise.clone()),
            snr: Some(point.snr),
            phantom: Some(data.phantom.clone()),
            seed: Some(c.seed),
        };
        manifest.save(&dir.join(MANIFEST_FILE))
    }

    fn preprocess(&self, dir: &Path) -> Result<()> {
        let manifest = load_manifest(dir)?;
        let stack = load_stack(dir, &manifest, &manifest.stack)?;
        let size = manifest.size;
        let fft = Fft2::new(size);
        let ngroups = manifest.ctfs.len();
        let groups = manifest.groups();
        let nbins = ring_index(size).into_iter().max().unwrap_or(0) + 1;
        let mut image_scales = Vec::new();
        let (whitened, psds, scale) = match self.config.preprocess {
            PreprocessMode::KnownPsd => {
                let noise = manifest
                    .noise
                    .clone()
                    .ok_or_else(|| Error::invalid("manifest has no noise model for known-psd whitening"))?;
                let psd = noise.psd(size);
                let whitened: Vec<Image> = stack.par_iter().map(|img| whiten_image(img, &fft, &psd)).collect();
                let profile: Vec<f64> = (0..nbins).map(|r| psd(r as f64 / size as f64)).collect();
                let psds = (0..ngroups)
                    .map(|g| NoisePSD::from_profile(g, size, profile.clone()))
                    .collect::<Result<Vec<_>>>()?;
                (whitened, psds, 1.0)
            }
            PreprocessMode::Corner => {
                let mask = CornerMask::new(size)?;
                let stds = stack
                    .par_iter()
                    .map(|img| mask.stats(img).map(|s| s.1))
                    .collect::<Result<Vec<_>>>()?;
                let normalized = stack
                    .par_iter()
                    .map(|img| corner_normalize(img, &mask))
                    .collect::<Result<Vec<_>>>()?;
                let mut psds = Vec::with_capacity(ngroups);
                for g in 0..ngroups {
                    let members: Vec<Image> = normalized
                        .iter()
                        .zip(&groups)
                        .filter(|(_, &gi)| gi == g)
                        .map(|(img, _)| img.clone())
                        .collect();
                    psds.push(estimate_corner_psd(&members, &mask, g)?);
                }
                let whitened = normalized
                    .par_iter()
                    .zip(groups.par_iter())
                    .map(|(img, &g)| {
                        let sub = background_subtract(img, &mask)?;
                        Ok(whiten_image(&sub, &fft, |xi| psds[g].at(xi)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let scale = stds.iter().sum::<f64>() / stds.len() as f64;
                image_scales = stds;
                (whitened, psds, scale)
            }
        };
        write_mrc_stack(&whitened, manifest.pixel_size, &dir.join(WHITENED_FILE))?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["radius", "psd", "group"])?;
        for psd in &psds {
            for (r, v) in psd.values.iter().enumerate() {
                w.write_record([r.to_string(), v.to_string(), psd.group.to_string()])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        write_file(&dir.join(PSD_FILE), bytes)?;
        let meta = PreprocessInfo {
            mode: self.config.preprocess,
            intensity_scale: scale,
            image_scales,
        };
        write_file(&dir.join(PREPROCESS_FILE), serde_json::to_string_pretty(&meta)? + "\n")
    }

    /// Whitened coefficients (leading `nblocks` blocks), operators and
    /// manifest of a preprocessed point.
    fn whitened_inputs(&self, dir: &Path, nblocks: Option<usize>) -> Result<WhitenedInputs> {
        let manifest = load_manifest(dir)?;
        let info: PreprocessInfo = serde_json::from_str(&read_file(&dir.join(PREPROCESS_FILE))?)?;
        let stack = load_stack(dir, &manifest, WHITENED_FILE)?;
        let basis = self.basis()?;
        if basis.size() != manifest.size {
            return Err(Error::mismatch(format!("config size {}", basis.size()), format!("dataset size {}", manifest.size)));
        }
        let ops = operators(dir, &manifest, &info, &basis)?;
        let ys = stack
            .par_iter()
            .map(|img| match nblocks {
                Some(k) => basis.expand_blocks(img, k),
                None => basis.expand(img),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WhitenedInputs {
            manifest,
            info,
            basis,
            ops,
            ys,
        })
    }

    /// Clean images `A_i x_i` passed through the stored preprocessing, in
    /// block 0, with the factor that maps a fitted contrast to input units.
    fn oracle_templates(&self, dir: &Path, inp: &WhitenedInputs) -> Result<(Vec<FBCoeffs>, Vec<f64>)> {
        let m = &inp.manifest;
        let phantom = m
            .phantom
            .as_ref()
            .ok_or_else(|| Error::invalid("oracle methods need the phantom in the manifest"))?;
        let rotations = m
            .rotations()
            .ok_or_else(|| Error::invalid("oracle methods need rotations in the manifest"))??;
        let groups = m.groups();
        let fft = Fft2::new(m.size);
        let filtered = |i: usize| apply_ctf(&project_phantom(phantom, &rotations[i], m.size), &m.ctfs[groups[i]], &fft);
        match inp.info.mode {
            PreprocessMode::KnownPsd => {
                let noise = m.noise.clone().ok_or_else(|| Error::invalid("manifest has no noise model"))?;
                let psd = noise.psd(m.size);
                let t = (0..m.n)
                    .into_par_iter()
                    .map(|i| inp.basis.expand_blocks(&whiten_image(&filtered(i), &fft, &psd), 1))
                    .collect::<Result<Vec<_>>>()?;
                Ok((t, vec![1.0; m.n]))
            }
            PreprocessMode::Corner => {
                if inp.info.image_scales.len() != m.n {
                    return Err(Error::mismatch(format!("{} image scales", m.n), inp.info.image_scales.len()));
                }
                let psds = read_psd(&dir.join(PSD_FILE), m.ctfs.len(), m.size)?;
                let mask = CornerMask::new(m.size)?;
                let t = (0..m.n)
                    .into_par_iter()
                    .map(|i| {
                        let sub = background_subtract(&filtered(i), &mask)?;
                        inp.basis.expand_blocks(&whiten_image(&sub, &fft, |xi| psds[groups[i]].at(xi)), 1)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((t, inp.info.image_scales.clone()))
            }
        }
    }

    fn estimate(&self, dir: &Path) -> Result<()> {
        let inp = self.whitened_inputs(dir, Some(1))?;
        let opts = &self.config.solver;
        let groups = inp.manifest.groups();
        let ones = inp.basis.ones_vector();
        let ops0: Vec<BlockOperator> = inp.ops.iter().map(|o| o.truncated(1)).collect();
        let methods = self.config.method_set();
        let truth = inp.manifest.contrasts();
        let mut results: Vec<ContrastEstimates> = Vec::new();
        let mut model = serde_json::Map::new();

        let needs_model = methods.iter().any(|m| matches!(m, Method::Cwf | Method::Gs | Method::Sdp));
        if needs_model {
            let moments = GroupMoments::with_blocks(&inp.ys, &groups, ops0.len(), 1).stage("moments")?;
            let est = estimate_model(&moments, &ops0, WHITE_NOISE_VARIANCE, opts)?;
            for m in &methods {
                match m {
                    Method::Cwf => {
                        let c = estimate_contrasts(&inp.ys, &groups, &ops0, &est.sigma_cx, &est.mean, WHITE_NOISE_VARIANCE, &ones, ContrastMethod::Cwf)?;
                        model.insert("cwf".into(), json!({ "normalization": c.normalization }));
                        results.push(c);
                    }
                    Method::Gs | Method::Sdp => {
                        let (refine, tag) = if *m == Method::Gs {
                            (RefineMethod::Gs, ContrastMethod::CwfGs)
                        } else {
                            (RefineMethod::Sdp, ContrastMethod::CwfSdp)
                        };
                        let rm = refine_model(&est, &ones, refine, opts)?;
                        let c = estimate_contrasts(&inp.ys, &groups, &ops0, &rm.sigma_cx_rf, &est.mean, WHITE_NOISE_VARIANCE, &ones, tag)?;
                        model.insert(
                            tag.name().into(),
                            json!({
                                "var_c": rm.var.var_c,
                                "raw_var_c": rm.var.raw_var_c,
                                "null_residual": rm.null_residual,
                                "eigen_ratio": rm.eigen_ratio,
                                "iterations": rm.refinement.iterations,
                                "converged": rm.refinement.converged,
                                "normalization": c.normalization,
                            }),
                        );
                        results.push(c);
                    }
                    Method::Oracle => {}
                }
            }
        }
        if methods.contains(&Method::Oracle) {
            let truth = truth
                .clone()
                .ok_or_else(|| Error::invalid("oracle methods need true contrasts in the manifest"))?;
            let clean = clean_coefficients(&inp.manifest, &inp.basis, 1)?;
            // clean images live in input units; the whitened stack may be rescaled
            let unit = 1.0 / inp.info.intensity_scale;
            let scaled: Vec<FBCoeffs> = clean.iter().zip(&truth).map(|(x, c)| x.scaled(c * unit)).collect();
            let orc = sample_moments(&scaled)?;
            let c = estimate_contrasts(&inp.ys, &groups, &ops0, &orc.sigma_cx, &orc.mean, WHITE_NOISE_VARIANCE, &ones, ContrastMethod::OracleCov)?;
            results.push(c);
            let (templates, scales) = self.oracle_templates(dir, &inp)?;
            let raw = template_oracle(&inp.ys, &templates)?;
            results.push(ContrastEstimates {
                values: raw.iter().zip(&scales).map(|(c, s)| c * s).collect(),
                method: ContrastMethod::Oracle,
                normalization: 1.0,
            });
        }
        if let Some(t) = &truth {
            results.push(ContrastEstimates {
                values: vec![1.0; t.len()],
                method: ContrastMethod::Trivial,
                normalization: 1.0,
            });
        }

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image_id", "group_id", "c_hat", "c_true", "method"])?;
        for r in &results {
            check_finite(&r.values, &format!("contrasts of {}", r.method))?;
            for (i, v) in r.values.iter().enumerate() {
                let t = truth.as_ref().map(|t| t[i].to_string()).unwrap_or_default();
                w.write_record([i.to_string(), groups[i].to_string(), v.to_string(), t, r.method.name().to_string()])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        write_file(&dir.join(CONTRASTS_FILE), bytes)?;
        write_file(&dir.join(MODEL_FILE), serde_json::to_string_pretty(&model)? + "\n")
    }

    fn restore(&self, dir: &Path) -> Result<()> {
        let inp = self.whitened_inputs(dir, None)?;
        let opts = &self.config.solver;
        let groups = inp.manifest.groups();
        let ones = inp.basis.ones_vector();
        let k = self.config.restore_images.min(inp.ys.len());
        let moments = GroupMoments::new(&inp.ys, &groups, inp.ops.len()).stage("moments")?;
        let est = estimate_model(&moments, &inp.ops, WHITE_NOISE_VARIANCE, opts)?;
        let head = &inp.ys[..k];
        let head_groups = &groups[..k];
        let mut outputs: Vec<(RestoreMethod, Vec<Option<FBCoeffs>>)> = Vec::new();
        for m in self.config.method_set() {
            match m {
                Method::Cwf => {
                    let c = estimate_contrasts(&inp.ys, &groups, &inp.ops, &est.sigma_cx, &est.mean, WHITE_NOISE_VARIANCE, &ones, ContrastMethod::Cwf)?;
                    let filter = CwfFilter::new(&inp.ops, &est.sigma_cx, &est.mean, WHITE_NOISE_VARIANCE).stage("cwf_filter")?;
                    let plain = head
                        .par_iter()
                        .zip(head_groups.par_iter())
                        .map(|(y, &g)| filter.apply(g, y))
                        .collect::<Result<Vec<_>>>()?;
                    let normed = plain
                        .iter()
                        .zip(&c.values)
                        .map(|(x, &ci)| restore_normalize(x, ci, opts.contrast_floor))
                        .collect();
                    outputs.push((RestoreMethod::Cwf, plain.into_iter().map(Some).collect()));
                    outputs.push((RestoreMethod::CwfNorm, normed));
                }
                Method::Gs | Method::Sdp => {
                    let (refine, tag) = if m == Method::Gs {
                        (RefineMethod::Gs, ContrastMethod::CwfGs)
                    } else {
                        (RefineMethod::Sdp, ContrastMethod::CwfSdp)
                    };
                    let rm = refine_model(&est, &ones, refine, opts)?;
                    let c = estimate_contrasts(&inp.ys, &groups, &inp.ops, &rm.sigma_cx_rf, &est.mean, WHITE_NOISE_VARIANCE, &ones, tag)?;
                    let head_c = ContrastEstimates {
                        values: c.values[..k].to_vec(),
                        ..c
                    };
                    for option in [RestoreOption::Normalization, RestoreOption::TwoStage] {
                        let r = restore_with_model(head, head_groups, &inp.ops, WHITE_NOISE_VARIANCE, &est.mean, &rm, &head_c, option, opts.contrast_floor)?;
                        outputs.push((r.method, r.coeffs));
                    }
                }
                Method::Oracle => {}
            }
        }
        let mut summary = serde_json::Map::new();
        for (method, coeffs) in &outputs {
            let excluded: Vec<usize> = coeffs.iter().enumerate().filter(|(_, c)| c.is_none()).map(|(i, _)| i).collect();
            let images = coeffs
                .par_iter()
                .map(|c| match c {
                    Some(c) => inp.basis.evaluate(c).map(|img| img.scaled(inp.info.intensity_scale)),
                    None => Ok(Image::zeros(inp.basis.size())),
                })
                .collect::<Result<Vec<_>>>()?;
            for img in &images {
                check_finite(img.data(), &format!("restored images of {method}"))?;
            }
            write_mrc_stack(&images, inp.manifest.pixel_size, &dir.join(restored_file(*method)))?;
            summary.insert(method.name().into(), json!({ "excluded": excluded }));
        }
        let meta = json!({ "count": k, "methods": summary });
        write_file(&dir.join(RESTORE_FILE), serde_json::to_string_pretty(&meta)? + "\n")
    }

    fn evaluate(&self, point: &GridPoint, dir: &Path) -> Result<()> {
        let manifest = load_manifest(dir)?;
        let rows = read_contrasts(&dir.join(CONTRASTS_FILE))?;
        let mut table = MetricTable::new();
        let noise = point.noise.to_string();
        let push = |table: &mut MetricTable, method: &str, group: String, metric: &str, value: f64| {
            table.push(MetricRow {
                method: method.to_string(),
                snr: point.snr,
                n: point.n,
                noise: noise.clone(),
                group,
                metric: metric.to_string(),
                value,
            })
        };
        let defocus: Vec<f64> = manifest.images.iter().map(|r| manifest.ctfs[r.group].defocus).collect();
        let truth = manifest.contrasts();

        let mut by_method: BTreeMap<usize, (String, Vec<f64>)> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for r in &rows {
            if !order.contains(&r.method) {
                order.push(r.method.clone());
            }
            let pos = order.iter().position(|m| m == &r.method).expect("inserted");
            by_method.entry(pos).or_insert_with(|| (r.method.clone(), Vec::new())).1.push(r.c_hat);
        }
        if let Some(truth) = &truth {
            for (method, values) in by_method.values() {
                if values.len() != truth.len() {
                    return Err(Error::mismatch(truth.len(), values.len()));
                }
                let errs = contrast_errors(values, truth)?;
                push(&mut table, method, "all".into(), "e_c", errs.iter().sum::<f64>() / errs.len() as f64);
                let per_defocus = group_breakdown(&errs, &defocus, GroupAxis::Defocus)?;
                for g in &per_defocus {
                    push(&mut table, method, g.label.clone(), "e_c", g.mean);
                }
                if per_defocus.len() > 1 {
                    let rank: Vec<f64> = (0..per_defocus.len()).map(|i| i as f64).collect();
                    let means: Vec<f64> = per_defocus.iter().map(|g| g.mean).collect();
                    if let Ok(rho) = spearman(&rank, &means) {
                        push(&mut table, method, "all".into(), "defocus_spearman", rho);
                    }
                }
                for g in group_breakdown(&errs, truth, GroupAxis::ContrastDecile)? {
                    push(&mut table, method, g.label, "e_c", g.mean);
                }
            }
        }
        let gs = by_method.values().find(|(m, _)| m == "cwf-gs");
        let sdp = by_method.values().find(|(m, _)| m == "cwf-sdp");
        if let (Some((_, a)), Some((_, b))) = (gs, sdp) {
            let mut rel: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs())).collect();
            rel.sort_by(f64::total_cmp);
            push(&mut table, "gs-vs-sdp", "all".into(), "median_rel_diff", rel[rel.len() / 2]);
        }

        let restore_path = dir.join(RESTORE_FILE);
        let mut frc_rows: Vec<(String, usize, f64)> = Vec::new();
        if restore_path.exists() {
            let meta: serde_json::Value = serde_json::from_str(&read_file(&restore_path)?)?;
            let count = meta["count"].as_u64().unwrap_or(0) as usize;
            let phantom = manifest
                .phantom
                .clone()
                .ok_or_else(|| Error::invalid("NRMSE needs the phantom in the manifest"))?;
            let rotations = manifest
                .rotations()
                .ok_or_else(|| Error::invalid("NRMSE needs rotations in the manifest"))??;
            let clean: Vec<Image> = rotations[..count]
                .par_iter()
                .map(|r| project_phantom(&phantom, r, manifest.size))
                .collect();
            for method in RestoreMethod::ALL {
                let Some(entry) = meta["methods"].get(method.name()) else {
                    continue;
                };
                let excluded: Vec<usize> = entry["excluded"]
                    .as_array()
                    .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
                    .unwrap_or_default();
                let stack = read_mrc_stack(&dir.join(restored_file(method)))?;
                if stack.len() != count {
                    return Err(Error::mismatch(count, stack.len()));
                }
                let kept: Vec<usize> = (0..count).filter(|i| !excluded.contains(i)).collect();
                let errs = kept
                    .par_iter()
                    .map(|&i| nrmse(&stack.images[i], &clean[i]))
                    .collect::<Result<Vec<_>>>()?;
                push(&mut table, method.name(), "all".into(), "excluded", excluded.len() as f64);
                if kept.is_empty() {
                    continue;
                }
                push(&mut table, method.name(), "all".into(), "nrmse", errs.iter().sum::<f64>() / errs.len() as f64);
                let keys: Vec<f64> = kept.iter().map(|&i| defocus[i]).collect();
                for g in group_breakdown(&errs, &keys, GroupAxis::Defocus)? {
                    push(&mut table, method.name(), g.label, "nrmse", g.mean);
                }
                if let Some(truth) = &truth {
                    let keys: Vec<f64> = kept.iter().map(|&i| truth[i]).collect();
                    for g in group_breakdown(&errs, &keys, GroupAxis::ContrastDecile)? {
                        push(&mut table, method.name(), g.label, "nrmse", g.mean);
                    }
                }
                let curves = kept
                    .par_iter()
                    .map(|&i| frc(&stack.images[i], &clean[i]))
                    .collect::<Result<Vec<_>>>()?;
                for (r, v) in average_frc(&curves).into_iter().enumerate() {
                    if let Some(v) = v {
                        frc_rows.push((method.name().to_string(), r, v));
                    }
                }
            }
        }
        write_file(&dir.join(METRICS_FILE), table.to_csv_string()?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "radius", "frc"])?;
        for (m, r, v) in &frc_rows {
            check_finite(&[*v], "FRC")?;
            w.write_record([m.clone(), r.to_string(), v.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        write_file(&dir.join(FRC_FILE), bytes)
    }

    /// Concatenates the overall (`group = all`) metric rows of every point.
    fn write_summary(&self) -> Result<()> {
        let mut out = String::from("method,snr,n,noise,group,metric,value\n");
        for point in self.config.grid() {
            let text = read_file(&self.point_dir(&point).join(METRICS_FILE))?;
            for line in text.lines().skip(1) {
                if line.split(',').nth(4) == Some("all") {
                    out.push_str(line);
                    out.push('\n');
                }
            }
        }
        write_file(&self.config.output.join(SUMMARY_FILE), out)
    }
}

/// Noise variance after whitening.
const WHITE_NOISE_VARIANCE: f64 = 1.0;

/// How the stored whitened stack was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessInfo {
    pub mode: PreprocessMode,
    /// Factor that maps restored images back to the input intensity units.
    pub intensity_scale: f64,
    /// Per-image corner standard deviations the stack was divided by.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_scales: Vec<f64>,
}

struct WhitenedInputs {
    manifest: DatasetManifest,
    info: PreprocessInfo,
    basis: FBBasis,
    ops: Vec<BlockOperator>,
    ys: Vec<FBCoeffs>,
}

pub fn restored_file(method: RestoreMethod) -> String {
    format!("restored_{}.mrc", method.name())
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(&dir.join(MANIFEST_FILE))
}

fn load_stack(dir: &Path, manifest: &DatasetManifest, file: &str) -> Result<Vec<Image>> {
    let stack = read_mrc_stack(&dir.join(file))?;
    if stack.len() != manifest.n {
        return Err(Error::mismatch(
            format!("{} frames (manifest n)", manifest.n),
            format!("{} frames in {file}", stack.len()),
        ));
    }
    if stack.size() != manifest.size {
        return Err(Error::mismatch(manifest.size, stack.size()));
    }
    Ok(stack.images)
}

/// Per-group operators of `ctf(xi) * psd(xi)^{-1/2}`.
fn operators(dir: &Path, manifest: &DatasetManifest, info: &PreprocessInfo, basis: &FBBasis) -> Result<Vec<BlockOperator>> {
    match info.mode {
        PreprocessMode::KnownPsd => {
            let noise: NoiseModel = manifest
                .noise
                .clone()
                .ok_or_else(|| Error::invalid("manifest has no noise model"))?;
            let psd = noise.psd(manifest.size);
            Ok(manifest
                .ctfs
                .iter()
                .map(|p| ctf_whitened_operator(p, basis, &psd))
                .collect())
        }
        PreprocessMode::Corner => {
            let psds = read_psd(&dir.join(PSD_FILE), manifest.ctfs.len(), manifest.size)?;
            Ok(manifest
                .ctfs
                .iter()
                .zip(&psds)
                .map(|(p, psd)| ctf_whitened_operator(p, basis, |xi| psd.at(xi)))
                .collect())
        }
    }
}

fn ctf_whitened_operator(params: &CtfParams, basis: &FBBasis, psd: impl Fn(f64) -> f64) -> BlockOperator {
    radial_operator(basis, |xi| ctf_value_per_pixel(params, xi) / psd(xi).sqrt())
}

fn read_psd(path: &Path, ngroups: usize, size: usize) -> Result<Vec<NoisePSD>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut profiles: Vec<Vec<f64>> = vec![Vec::new(); ngroups];
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::invalid(format!("bad PSD row {rec:?}")))
        };
        let (r, v, g) = (parse(0)? as usize, parse(1)?, parse(2)? as usize);
        let profile = profiles
            .get_mut(g)
            .ok_or_else(|| Error::invalid(format!("PSD row for unknown group {g}")))?;
        if profile.len() != r {
            return Err(Error::invalid(format!("PSD rows of group {g} out of order at radius {r}")));
        }
        profile.push(v);
    }
    profiles
        .into_iter()
        .enumerate()
        .map(|(g, p)| NoisePSD::from_profile(g, size, p))
        .collect()
}

/// Clean projections `x_i` expanded to `nblocks` blocks.
fn clean_coefficients(manifest: &DatasetManifest, basis: &FBBasis, nblocks: usize) -> Result<Vec<FBCoeffs>> {
    let phantom = manifest
        .phantom
        .as_ref()
        .ok_or_else(|| Error::invalid("oracle methods need the phantom in the manifest"))?;
    let rotations = manifest
        .rotations()
        .ok_or_else(|| Error::invalid("oracle methods need rotations in the manifest"))??;
    rotations
        .par_iter()
        .map(|r| basis.expand_blocks(&project_phantom(phantom, r, manifest.size), nblocks))
        .collect()
}

/// One row of a contrast table.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastRow {
    pub image_id: usize,
    pub group_id: usize,
    pub c_hat: f64,
    pub c_true: Option<f64>,
    pub method: String,
}

pub fn read_contrasts(path: &Path) -> Result<Vec<ContrastRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = || Error::invalid(format!("bad contrast row {rec:?}"));
        let field = |i: usize| rec.get(i).ok_or_else(bad);
        let c_true = field(3)?;
        out.push(ContrastRow {
            image_id: field(0)?.parse().map_err(|_| bad())?,
            group_id: field(1)?.parse().map_err(|_| bad())?,
            c_hat: field(2)?.parse().map_err(|_| bad())?,
            c_true: if c_true.is_empty() {
                None
            } else {
                Some(c_true.parse().map_err(|_| bad())?)
            },
            method: field(4)?.to_string(),
        });
    }
    Ok(out)
}
