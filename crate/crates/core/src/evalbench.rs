//! Benchmark harness: metric grids per method and dose, per-subject spread,
//! paired Wilcoxon signed-rank tests, difference maps and MIPs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::dose::Dose;
use crate::error::{ensure, Error, Result};
use crate::metrics::{psnr, rmse, ssim, MetricsRecord, SsimParams};
use crate::model::{Model, Variant};
use crate::rasterio::{read_raster, write_raster, DatasetManifest, RasterF32, Split};
use crate::trainer::{denoise, Checkpoint};

/// Method name of the raw low-dose input row.
pub const LDPET_METHOD: &str = "LDPET";

/// Anything that maps a low-dose image to an estimate of its reference.
pub trait Denoiser: Sync {
    fn name(&self) -> &str;

    fn supports(&self, _dose: Dose) -> bool {
        true
    }

    fn denoise(&self, x: &RasterF32, dose: Dose) -> Result<RasterF32>;
}

/// A single trained network; dose-embedded models receive the dose.
pub struct ModelMethod {
    name: String,
    model: Model,
}

impl ModelMethod {
    pub fn new(name: impl Into<String>, model: Model) -> Self {
        Self {
            name: name.into(),
            model,
        }
    }

    pub fn from_checkpoint(name: impl Into<String>, ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self::new(name, ckpt.model()?))
    }
}

impl Denoiser for ModelMethod {
    fn name(&self) -> &str {
        &self.name
    }

    fn denoise(&self, x: &RasterF32, dose: Dose) -> Result<RasterF32> {
        let d = (self.model.spec().variant == Variant::DoseEmbedded).then(|| dose.fraction());
        denoise(&self.model, x, d, true)
    }
}

/// One specialist network per dose; evaluated only at those doses.
pub struct PerDoseMethod {
    name: String,
    models: BTreeMap<Dose, Model>,
}

impl PerDoseMethod {
    pub fn new(name: impl Into<String>, models: BTreeMap<Dose, Model>) -> Result<Self> {
        for (d, m) in &models {
            if m.spec().variant == Variant::DoseEmbedded {
                return Err(Error::Usage(format!(
                    "per-dose model at {d} is dose_embedded; specialists take no dose input"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            models,
        })
    }
}

impl Denoiser for PerDoseMethod {
    fn name(&self) -> &str {
        &self.name
    }

    fn supports(&self, dose: Dose) -> bool {
        self.models.contains_key(&dose)
    }

    fn denoise(&self, x: &RasterF32, dose: Dose) -> Result<RasterF32> {
        let m = self
            .models
            .get(&dose)
            .ok_or_else(|| Error::Usage(format!("{} has no model for dose {dose}", self.name)))?;
        denoise(m, x, None, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Psnr,
    Ssim,
    Rmse,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Ssim, Metric::Rmse];

    pub fn of(self, r: &MetricsRecord) -> f64 {
        match self {
            Metric::Psnr => r.psnr,
            Metric::Ssim => r.ssim,
            Metric::Rmse => r.rmse,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Rmse => "rmse",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: String,
    pub dose: Dose,
    pub n: usize,
    pub psnr: Summary,
    pub ssim: Summary,
    pub rmse: Summary,
}

impl Aggregate {
    pub fn summary(&self, metric: Metric) -> Summary {
        match metric {
            Metric::Psnr => self.psnr,
            Metric::Ssim => self.ssim,
            Metric::Rmse => self.rmse,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub records: Vec<MetricsRecord>,
    pub aggregates: Vec<Aggregate>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for a single value.
fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn record_dose(r: &MetricsRecord) -> Result<Dose> {
    Dose::from_fraction(r.dose_fraction)
}

/// Records grouped by (method, dose), in first-appearance method order.
fn group(records: &[MetricsRecord]) -> Result<Vec<((String, Dose), Vec<&MetricsRecord>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(String, Dose), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        if !order.contains(&r.method) {
            order.push(r.method.clone());
        }
        groups.entry((r.method.clone(), record_dose(r)?)).or_default().push(r);
    }
    let mut out = Vec::new();
    for method in order {
        let keys: Vec<(String, Dose)> = groups.keys().filter(|(m, _)| *m == method).cloned().collect();
        for k in keys {
            let v = groups.remove(&k).expect("key taken from map");
            out.push((k, v));
        }
    }
    Ok(out)
}

/// Per (method, dose) means and sample standard deviations over subjects.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Vec<Aggregate>> {
    group(records)?
        .into_iter()
        .map(|((method, dose), rs)| {
            let summary = |m: Metric| {
                let v: Vec<f64> = rs.iter().map(|r| m.of(r)).collect();
                Summary {
                    mean: mean(&v),
                    std: sample_std(&v),
                }
            };
            Ok(Aggregate {
                method,
                dose,
                n: rs.len(),
                psnr: summary(Metric::Psnr),
                ssim: summary(Metric::Ssim),
                rmse: summary(Metric::Rmse),
            })
        })
        .collect()
}

/// Metric settings shared by every cell of a benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub dynamic_range: f64,
    pub ssim: SsimParams,
}

impl EvalConfig {
    pub fn for_manifest(manifest: &DatasetManifest) -> Self {
        Self {
            dynamic_range: manifest.suv_clip_max,
            ssim: SsimParams::new(manifest.suv_clip_max),
        }
    }
}

pub fn score(subject_id: &str, dose: Dose, method: &str, estimate: &RasterF32, reference: &RasterF32, cfg: &EvalConfig) -> Result<MetricsRecord> {
    Ok(MetricsRecord {
        subject_id: subject_id.to_string(),
        dose_fraction: dose.fraction(),
        method: method.to_string(),
        psnr: psnr(reference, estimate, cfg.dynamic_range)?,
        ssim: ssim(estimate, reference, &cfg.ssim)?,
        rmse: rmse(estimate, reference)?,
    })
}

/// Scores every method (plus the raw low-dose row) on every test subject
/// and dose. Records are ordered subject, dose, then LDPET followed by the
/// methods in the given order.
pub fn evaluate(methods: &[&dyn Denoiser], root: &Path, manifest: &DatasetManifest) -> Result<BenchmarkResult> {
    evaluate_with(methods, root, manifest, &EvalConfig::for_manifest(manifest))
}

pub fn evaluate_with(
    methods: &[&dyn Denoiser],
    root: &Path,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
) -> Result<BenchmarkResult> {
    manifest.validate()?;
    let subjects = manifest.subjects_in(Split::Test);
    ensure!(!subjects.is_empty(), "dataset has no test subjects");
    let mut names = BTreeSet::from([LDPET_METHOD]);
    for m in methods {
        ensure!(names.insert(m.name()), "duplicate method name '{}'", m.name());
    }
    let cells: Vec<(&str, Dose)> = subjects
        .iter()
        .flat_map(|&s| manifest.dose_levels.iter().map(move |&d| (s, d)))
        .collect();

    let run_cell = |&(subject, dose): &(&str, Dose)| -> Result<Vec<MetricsRecord>> {
        let reference = read_raster(&DatasetManifest::reference_path(root, subject))?;
        let x = read_raster(&DatasetManifest::low_dose_path(root, subject, dose))?;
        let mut out = vec![score(subject, dose, LDPET_METHOD, &x, &reference, cfg)?];
        for m in methods.iter().filter(|m| m.supports(dose)) {
            let est = m.denoise(&x, dose)?;
            out.push(score(subject, dose, m.name(), &est, &reference, cfg)?);
        }
        Ok(out)
    };
    #[cfg(feature = "parallel")]
    let per_cell: Vec<Result<Vec<MetricsRecord>>> = cells.par_iter().map(run_cell).collect();
    #[cfg(not(feature = "parallel"))]
    let per_cell: Vec<Result<Vec<MetricsRecord>>> = cells.iter().map(run_cell).collect();

    let mut records = Vec::new();
    for cell in per_cell {
        records.extend(cell?);
    }
    let aggregates = aggregate(&records)?;
    Ok(BenchmarkResult { records, aggregates })
}

/// Sample standard deviation of each metric across subjects, one row per
/// (method, dose).
pub fn per_subject_std(result: &BenchmarkResult) -> Result<Vec<Aggregate>> {
    let rows = aggregate(&result.records)?;
    for r in &rows {
        ensure!(
            r.n >= 2,
            "{} at {} has {} subject(s); a spread needs at least 2",
            r.method,
            r.dose,
            r.n
        );
    }
    Ok(rows)
}

/// Outcome of a two-sided Wilcoxon signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wilcoxon {
    /// Nonzero differences used.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    pub p_value: f64,
    /// Exact null enumeration rather than the normal approximation.
    pub exact: bool,
}

pub const EXACT_LIMIT: usize = 20;

/// Two-sided signed-rank test on paired differences. Zero differences are
/// dropped; tied magnitudes share their average rank.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<Wilcoxon> {
    ensure!(diffs.iter().all(|d| d.is_finite()), "differences must be finite");
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(Wilcoxon {
            n,
            w_plus: 0.0,
            p_value: 1.0,
            exact: true,
        });
    }
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // doubled ranks keep averaged ties integral
    let mut rank2 = vec![0u64; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        let r2 = (i + 1 + j + 1) as u64;
        rank2[i..=j].iter_mut().for_each(|r| *r = r2);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w2_plus: u64 = nz.iter().zip(&rank2).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_plus = w2_plus as f64 / 2.0;

    if n <= EXACT_LIMIT {
        let total2: u64 = rank2.iter().sum();
        // counts[s] = number of sign patterns with doubled W+ = s
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &rank2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] > 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let all = 2f64.powi(n as i32);
        let lower: u64 = counts[..=w2_plus as usize].iter().sum();
        let upper: u64 = counts[w2_plus as usize..].iter().sum();
        let p = (2.0 * lower.min(upper) as f64 / all).min(1.0);
        return Ok(Wilcoxon {
            n,
            w_plus,
            p_value: p,
            exact: true,
        });
    }

    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mu).abs() - 0.5).max(0.0) / var.sqrt();
        libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(Wilcoxon {
        n,
        w_plus,
        p_value: p,
        exact: false,
    })
}

/// `†` below 0.005, `*` below 0.05.
pub fn marker(p: f64) -> &'static str {
    if p < 0.005 {
        "†"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceRow {
    pub method: String,
    pub baseline: String,
    pub dose: Dose,
    pub metric: Metric,
    pub test: Wilcoxon,
}

impl SignificanceRow {
    pub fn marker(&self) -> &'static str {
        marker(self.test.p_value)
    }
}

/// Paired test of `method` against `baseline` per dose, pairing by subject.
/// Doses where either method is missing are skipped.
pub fn paired_significance(result: &BenchmarkResult, method: &str, baseline: &str, metric: Metric) -> Result<Vec<SignificanceRow>> {
    let index = |name: &str| -> Result<BTreeMap<(Dose, String), f64>> {
        let mut m = BTreeMap::new();
        for r in result.records.iter().filter(|r| r.method == name) {
            m.insert((record_dose(r)?, r.subject_id.clone()), metric.of(r));
        }
        Ok(m)
    };
    let a = index(method)?;
    let b = index(baseline)?;
    ensure!(!a.is_empty(), "no records for method '{method}'");
    ensure!(!b.is_empty(), "no records for baseline '{baseline}'");
    let doses: BTreeSet<Dose> = a.keys().map(|(d, _)| *d).filter(|d| b.keys().any(|(e, _)| e == d)).collect();
    let mut rows = Vec::new();
    for dose in doses {
        let subj_a: BTreeSet<&String> = a.keys().filter(|(d, _)| *d == dose).map(|(_, s)| s).collect();
        let subj_b: BTreeSet<&String> = b.keys().filter(|(d, _)| *d == dose).map(|(_, s)| s).collect();
        ensure!(
            subj_a == subj_b,
            "{method} and {baseline} cover different subjects at {dose}"
        );
        let diffs: Vec<f64> = subj_a
            .iter()
            .map(|s| a[&(dose, (*s).clone())] - b[&(dose, (*s).clone())])
            .collect();
        rows.push(SignificanceRow {
            method: method.to_string(),
            baseline: baseline.to_string(),
            dose,
            metric,
            test: wilcoxon_signed_rank(&diffs)?,
        });
    }
    Ok(rows)
}

pub fn difference_map(estimate: &RasterF32, reference: &RasterF32) -> Result<RasterF32> {
    estimate.zip_map(reference, |e, r| e - r)
}

/// Pixelwise maximum over a stack of equally sized images.
pub fn mip(stack: &[RasterF32]) -> Result<RasterF32> {
    ensure!(!stack.is_empty(), "MIP of an empty stack");
    let mut out = stack[0].clone();
    for img in &stack[1..] {
        out = out.zip_map(img, f32::max)?;
    }
    Ok(out)
}

pub const RECORDS_HEADER: &str = "subject_id,dose_fraction,method,psnr,ssim,rmse";
pub const AGGREGATES_HEADER: &str = "method,dose_fraction,n,psnr_mean,psnr_std,ssim_mean,ssim_std,rmse_mean,rmse_std";
pub const SIGNIFICANCE_HEADER: &str = "method,baseline,dose_fraction,metric,n,w_plus,p_value,test,marker";

pub fn records_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{RECORDS_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.subject_id, r.dose_fraction, r.method, r.psnr, r.ssim, r.rmse
        ));
    }
    out
}

pub fn aggregates_csv(rows: &[Aggregate]) -> String {
    let mut out = format!("{AGGREGATES_HEADER}\n");
    for a in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            a.method,
            a.dose.fraction(),
            a.n,
            a.psnr.mean,
            a.psnr.std,
            a.ssim.mean,
            a.ssim.std,
            a.rmse.mean,
            a.rmse.std
        ));
    }
    out
}

pub fn significance_csv(rows: &[SignificanceRow]) -> String {
    let mut out = format!("{SIGNIFICANCE_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.baseline,
            r.dose.fraction(),
            r.metric,
            r.test.n,
            r.test.w_plus,
            r.test.p_value,
            if r.test.exact { "exact" } else { "normal" },
            r.marker()
        ));
    }
    out
}

/// Table with one row per method and one column per dose: PSNR and SSIM
/// means, with significance markers from `significance` attached.
pub fn render_table(result: &BenchmarkResult, rows: &[&str], significance: &[SignificanceRow]) -> String {
    let doses: BTreeSet<Dose> = result.aggregates.iter().map(|a| a.dose).collect();
    let width = 12;
    let mut out = String::new();
    for metric in [Metric::Psnr, Metric::Ssim] {
        let digits = if metric == Metric::Psnr { 3 } else { 4 };
        out.push_str(&format!("{:<20}", metric.as_str().to_uppercase()));
        for d in &doses {
            out.push_str(&format!("{:>width$}", d.to_string()));
        }
        out.push('\n');
        for &method in rows {
            if !result.aggregates.iter().any(|a| a.method == method) {
                continue;
            }
            out.push_str(&format!("{method:<20}"));
            for d in &doses {
                let cell = match result.aggregates.iter().find(|a| a.method == method && a.dose == *d) {
                    Some(a) => {
                        let mark = significance
                            .iter()
                            .find(|s| s.method == method && s.dose == *d && s.metric == metric)
                            .map_or("", SignificanceRow::marker);
                        format!("{:.digits$}{mark}", a.summary(metric).mean)
                    }
                    None => "-".to_string(),
                };
                out.push_str(&format!("{cell:>width$}"));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    let exact = significance.iter().filter(|s| s.test.exact).count();
    if !significance.is_empty() {
        out.push_str(&format!(
            "markers: † p < 0.005, * p < 0.05 (two-sided Wilcoxon signed-rank vs {}; {} of {} tests exact)\n",
            significance[0].baseline,
            exact,
            significance.len()
        ));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `records.csv`, `aggregates.csv`, `significance.csv` and `table.txt` into `dir`.
pub fn write_results(dir: &Path, result: &BenchmarkResult, significance: &[SignificanceRow], rows: &[&str]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("records.csv"), &records_csv(&result.records))?;
    write_text(&dir.join("aggregates.csv"), &aggregates_csv(&result.aggregates))?;
    write_text(&dir.join("significance.csv"), &significance_csv(significance))?;
    write_text(&dir.join("table.txt"), &render_table(result, rows, significance))
}

/// Difference maps for the first test subject and per-method MIPs across
/// all test subjects, one set per dose.
pub fn write_figures(dir: &Path, methods: &[&dyn Denoiser], root: &Path, manifest: &DatasetManifest) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let subjects = manifest.subjects_in(Split::Test);
    ensure!(!subjects.is_empty(), "dataset has no test subjects");
    let mut written = 0;
    for &dose in &manifest.dose_levels {
        let mut stacks: BTreeMap<String, Vec<RasterF32>> = BTreeMap::new();
        for (i, &subject) in subjects.iter().enumerate() {
            let reference = read_raster(&DatasetManifest::reference_path(root, subject))?;
            let x = read_raster(&DatasetManifest::low_dose_path(root, subject, dose))?;
            let mut estimates = vec![(LDPET_METHOD.to_string(), x.clone())];
            for m in methods.iter().filter(|m| m.supports(dose)) {
                estimates.push((m.name().to_string(), m.denoise(&x, dose)?));
            }
            stacks.entry("reference".into()).or_default().push(reference.clone());
            for (name, est) in estimates {
                if i == 0 {
                    let path = dir.join(format!("{name}_{subject}_{}_diff.ptr", dose.file_stem()));
                    write_raster(&path, &difference_map(&est, &reference)?)?;
                    written += 1;
                }
                stacks.entry(name).or_default().push(est);
            }
        }
        for (name, stack) in stacks {
            write_raster(&dir.join(format!("{name}_{}_mip.ptr", dose.file_stem())), &mip(&stack)?)?;
            written += 1;
        }
    }
    Ok(written)
}
