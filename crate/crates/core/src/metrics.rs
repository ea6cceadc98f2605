//! Evaluation metrics and per-group aggregation.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;

use crate::covariance::BlockCovariance;
use crate::error::{Error, Result};
use crate::image::{disk_mask, ring_index, Fft2, Image};

/// Mean relative contrast error `(1/n) sum |c_hat - c| / c`.
pub fn contrast_error(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::mismatch(truth.len(), estimate.len()));
    }
    if truth.is_empty() {
        return Err(Error::invalid("no contrasts to compare"));
    }
    let mut total = 0.0;
    for (e, &c) in estimate.iter().zip(truth) {
        if !(c > 0.0) {
            return Err(Error::invalid(format!("true contrast {c} must be > 0")));
        }
        total += (e - c).abs() / c;
    }
    Ok(total / truth.len() as f64)
}

/// Per-image relative contrast errors.
pub fn contrast_errors(estimate: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    if estimate.len() != truth.len() {
        return Err(Error::mismatch(truth.len(), estimate.len()));
    }
    estimate
        .iter()
        .zip(truth)
        .map(|(e, &c)| {
            if c > 0.0 {
                Ok((e - c).abs() / c)
            } else {
                Err(Error::invalid(format!("true contrast {c} must be > 0")))
            }
        })
        .collect()
}

/// `|S_hat - S|_F^2 / |S|_F^2` over the full matrix; blocks `k > 0` count
/// twice for their conjugate partners.
pub fn covariance_error(estimate: &BlockCovariance, truth: &BlockCovariance) -> Result<f64> {
    if estimate.block_sizes() != truth.block_sizes() {
        return Err(Error::mismatch(
            format!("{:?}", truth.block_sizes()),
            format!("{:?}", estimate.block_sizes()),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, (e, t)) in estimate.blocks.iter().zip(&truth.blocks).enumerate() {
        let w = if k == 0 { 1.0 } else { 2.0 };
        num += w * (e - t).norm_squared();
        den += w * t.norm_squared();
    }
    if den == 0.0 {
        return Err(Error::Degenerate("reference covariance is zero".into()));
    }
    Ok(num / den)
}

/// Masked NRMSE with a circular mask of radius `radius` pixels.
pub fn nrmse_with_radius(restored: &Image, clean: &Image, radius: f64) -> Result<f64> {
    let size = clean.size();
    restored.check_size(size)?;
    let mask = disk_mask(size, radius);
    let mut err = 0.0;
    let mut ref_power = 0.0;
    for ((r, c), &m) in restored.data().iter().zip(clean.data()).zip(&mask) {
        if m {
            err += (r - c) * (r - c);
            ref_power += c * c;
        }
    }
    if ref_power == 0.0 {
        return Err(Error::Degenerate("clean image is zero inside the mask".into()));
    }
    Ok((err / ref_power).sqrt())
}

/// Masked NRMSE with the default radius `L/2`.
pub fn nrmse(restored: &Image, clean: &Image) -> Result<f64> {
    nrmse_with_radius(restored, clean, clean.size() as f64 / 2.0)
}

/// Fourier ring correlation on unit-width annuli.
#[derive(Clone, Debug, PartialEq)]
pub struct FrcCurve {
    /// Correlation per integer radius; `None` where it is undefined.
    pub values: Vec<Option<f64>>,
    /// Number of Fourier pixels per annulus.
    pub counts: Vec<usize>,
}

impl FrcCurve {
    /// Radii whose correlation could not be computed.
    pub fn skipped(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(r, _)| r)
            .collect()
    }
}

/// FRC between two images; annulus `r` holds frequencies with
/// `round(|m|) = r`.
pub fn frc(a: &Image, b: &Image) -> Result<FrcCurve> {
    let size = a.size();
    b.check_size(size)?;
    let fft = Fft2::new(size);
    let fa = fft.forward(a);
    let fb = fft.forward(b);
    let idx = ring_index(size);
    let nbins = idx.iter().copied().max().unwrap_or(0) + 1;
    let mut cross = vec![0.0; nbins];
    let mut pa = vec![0.0; nbins];
    let mut pb = vec![0.0; nbins];
    let mut counts = vec![0usize; nbins];
    for ((x, y), &r) in fa.iter().zip(&fb).zip(&idx) {
        cross[r] += (x * y.conj()).re;
        pa[r] += x.norm_sqr();
        pb[r] += y.norm_sqr();
        counts[r] += 1;
    }
    let values = (0..nbins)
        .map(|r| {
            let d = (pa[r] * pb[r]).sqrt();
            if counts[r] == 0 || d == 0.0 {
                None
            } else {
                Some(cross[r] / d)
            }
        })
        .collect::<Vec<_>>();
    let curve = FrcCurve { values, counts };
    let skipped = curve.skipped();
    if !skipped.is_empty() {
        warn!("FRC undefined at radii {skipped:?}");
    }
    Ok(curve)
}

/// Per-radius average of several FRC curves, ignoring undefined entries.
pub fn average_frc(curves: &[FrcCurve]) -> Vec<Option<f64>> {
    let nbins = curves.iter().map(|c| c.values.len()).max().unwrap_or(0);
    (0..nbins)
        .map(|r| {
            let vals: Vec<f64> = curves
                .iter()
                .filter_map(|c| c.values.get(r).copied().flatten())
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::mismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::invalid("rank correlation needs at least two points"));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant input to rank correlation".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Grouping used by [`group_breakdown`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupAxis {
    /// One group per distinct defocus value.
    Defocus,
    /// Ten bins of true contrast with edges 0.5, 0.6, ..., 1.5.
    ContrastDecile,
}

/// Mean metric value over one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    /// Defocus value, or the lower contrast bin edge.
    pub key: f64,
    pub label: String,
    pub count: usize,
    pub mean: f64,
}

/// Mean of `values` per group of `keys` (defocus or true contrast), in
/// ascending order. Empty groups are omitted.
pub fn group_breakdown(values: &[f64], keys: &[f64], axis: GroupAxis) -> Result<Vec<GroupRow>> {
    if values.len() != keys.len() {
        return Err(Error::mismatch(keys.len(), values.len()));
    }
    let mut groups: BTreeMap<i64, (f64, String, usize, f64)> = BTreeMap::new();
    for (&v, &k) in values.iter().zip(keys) {
        if !v.is_finite() || !k.is_finite() {
            return Err(Error::NonFinite("group breakdown input".into()));
        }
        let (id, key, label) = match axis {
            GroupAxis::Defocus => {
                let id = (k * 1e9).round() as i64;
                (id, k, format!("defocus={k}"))
            }
            GroupAxis::ContrastDecile => {
                if !(0.5..=1.5).contains(&k) {
                    return Err(Error::invalid(format!("contrast {k} outside [0.5, 1.5]")));
                }
                let bin = (((k - 0.5) * 10.0).floor() as i64).min(9);
                let lo = 0.5 + bin as f64 / 10.0;
                (bin, lo, format!("contrast={:.1}-{:.1}", lo, lo + 0.1))
            }
        };
        let e = groups.entry(id).or_insert((key, label, 0, 0.0));
        e.2 += 1;
        e.3 += v;
    }
    if axis == GroupAxis::ContrastDecile {
        let missing: Vec<i64> = (0..10).filter(|b| !groups.contains_key(b)).collect();
        if !missing.is_empty() {
            warn!("empty contrast bins omitted: {missing:?}");
        }
    }
    Ok(groups
        .into_values()
        .map(|(key, label, count, total)| GroupRow {
            key,
            label,
            count,
            mean: total / count as f64,
        })
        .collect())
}

/// One line of a metric table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub snr: f64,
    pub n: usize,
    pub noise: String,
    pub group: String,
    pub metric: String,
    pub value: f64,
}

/// Metric rows written as `method,snr,n,noise,group,metric,value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn new() -> Self {
        MetricTable::default()
    }

    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Value of the first row matching `method`, `group` and `metric`.
    pub fn get(&self, method: &str, group: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.group == group && r.metric == metric)
            .map(|r| r.value)
    }

    /// Errors on the first non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.rows.iter().find(|r| !r.value.is_finite()) {
            Some(r) => Err(Error::NonFinite(format!(
                "metric {} of method {} in group {}",
                r.metric, r.method, r.group
            ))),
            None => Ok(()),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        self.check_finite()?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "snr", "n", "noise", "group", "metric", "value"])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.snr.to_string(),
                r.n.to_string(),
                r.noise.clone(),
                r.group.clone(),
                r.metric.clone(),
                r.value.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<metric table>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }
}
