use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crossdose::analysisdoc::{averaging_gap, gap_csv, two_scale_problem};
use crossdose::evalbench::{
    aggregate, aggregates_csv, evaluate as run_evaluation, paired_significance, per_subject_std, render_table,
    write_figures, write_results, BenchmarkResult, Denoiser, Metric, ModelMethod, PerDoseMethod, SignificanceRow,
    LDPET_METHOD, RECORDS_HEADER,
};
use crossdose::metrics::MetricsRecord;
use crossdose::model::{Model, Variant};
use crossdose::noisestats::{
    self, analyze_noise_masked, hot_region_mask, report_csv_row, residual, tail_histograms, REPORT_HEADER,
};
use crossdose::phantom::{build_dataset, standard_specs};
use crossdose::rasterio::{read_raster, scan_dataset, DatasetManifest, RasterF32, MANIFEST_FILE};
use crossdose::trainer::{last_checkpoint_dir, Checkpoint, DoseRegime, Trainer, META_FILE};
use crossdose::Dose;

use crate::config::RunConfig;
use crate::CliError;

/// Lesion proxy for file-based noise analysis: pixels at or above this
/// fraction of the reference maximum.
const HOT_FRACTION: f64 = 0.5;
const HISTOGRAM_BINS: usize = 32;
const CONFIG_COPY: &str = "config.toml";
const INDIVIDUAL: &str = "individual";

pub struct Context {
    pub out: PathBuf,
    pub cfg: RunConfig,
}

impl Context {
    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }

    fn results_dir(&self) -> PathBuf {
        self.out.join("results")
    }

    fn dataset(&self) -> Result<(PathBuf, DatasetManifest), CliError> {
        let root = self.data_dir();
        if !root.join(MANIFEST_FILE).exists() {
            return Err(CliError::Missing(format!(
                "no dataset at {}; run `crossdose generate` first",
                root.display()
            )));
        }
        let manifest = scan_dataset(&root)?;
        Ok((root, manifest))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn generate(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let root = ctx.data_dir();
    let specs = standard_specs(cfg.phantom.subjects, cfg.phantom.size, cfg.seed);
    let manifest = build_dataset(&specs, &cfg.dataset_config()?, &root)?;
    write(&ctx.out.join("generate.toml"), &cfg.to_toml())?;
    let train = manifest.subjects_in(crossdose::rasterio::Split::Train).len();
    println!(
        "dataset {}: {} subjects ({} train, {} test), {}x{} px, doses {}",
        root.display(),
        manifest.subject_ids.len(),
        train,
        manifest.subject_ids.len() - train,
        cfg.phantom.size,
        cfg.phantom.size,
        manifest.dose_levels.iter().map(Dose::to_string).collect::<Vec<_>>().join(" ")
    );
    Ok(())
}

pub fn analyze_noise(ctx: &Context) -> Result<(), CliError> {
    let (root, manifest) = ctx.dataset()?;
    let dir = ctx.out.join("noise");
    let mut whole = format!("{REPORT_HEADER}\n");
    let mut lesion = format!("{REPORT_HEADER}\n");
    let mut pooled: BTreeMap<Dose, Vec<f32>> = BTreeMap::new();
    for id in &manifest.subject_ids {
        let y = read_raster(&DatasetManifest::reference_path(&root, id))?;
        let mask = hot_region_mask(&y, HOT_FRACTION);
        for &dose in &manifest.dose_levels {
            let x = read_raster(&DatasetManifest::low_dose_path(&root, id, dose))?;
            whole.push_str(&report_csv_row(id, &noisestats::analyze_noise(&y, &x, dose.fraction())?));
            whole.push('\n');
            lesion.push_str(&report_csv_row(id, &analyze_noise_masked(&y, &x, dose.fraction(), &mask)?));
            lesion.push('\n');
            pooled.entry(dose).or_default().extend_from_slice(residual(&y, &x)?.data());
        }
    }
    write(&dir.join("noise_report.csv"), &whole)?;
    write(&dir.join("noise_report_lesion.csv"), &lesion)?;
    for (dose, values) in pooled {
        let n = RasterF32::new(1, values.len(), values)?;
        let (low, high) = tail_histograms(&n, HISTOGRAM_BINS)?;
        write(&dir.join(format!("tail_low_{}.csv", dose.file_stem())), &low.to_csv())?;
        write(&dir.join(format!("tail_high_{}.csv", dose.file_stem())), &high.to_csv())?;
    }
    println!(
        "noise reports for {} subjects x {} doses written to {}",
        manifest.subject_ids.len(),
        manifest.dose_levels.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let (root, manifest) = ctx.dataset()?;
    let cfg = &ctx.cfg;
    let spec = cfg.model_spec()?;
    let tcfg = cfg.train_config()?;
    let name = cfg.run_name()?;
    let dir = ctx.runs_dir().join(&name);
    let last = last_checkpoint_dir(&dir);

    let trainer = if last.join(META_FILE).exists() {
        let ckpt = Checkpoint::load(&last)?;
        if ckpt.config_digest != tcfg.digest() || ckpt.spec != spec {
            return Err(CliError::Config(format!(
                "{} holds a run with a different configuration; choose another --name or remove it",
                dir.display()
            )));
        }
        if ckpt.epoch >= tcfg.epochs {
            println!("run {name} already complete ({} epochs)", ckpt.epoch);
            return Ok(());
        }
        info!("resuming {name} after epoch {}", ckpt.epoch);
        Trainer::from_checkpoint(&ckpt, tcfg, &root, &manifest)?
    } else {
        Trainer::new(spec, tcfg, &root, &manifest)?
    };
    write(&dir.join(CONFIG_COPY), &cfg.to_toml())?;
    info!(
        "training {name}: {} parameters, {} steps per epoch",
        trainer.model().parameter_count(),
        trainer.steps_per_epoch()
    );
    let outcome = trainer.run(Some(&dir))?;
    if let Some(e) = outcome.trace.last() {
        println!(
            "run {name}: epoch {} loss {:.5} (mae {:.5}, ssim {:.5}) -> {}",
            e.epoch,
            e.mean_total,
            e.mean_mae,
            e.mean_ssim_loss,
            last.display()
        );
    }
    Ok(())
}

struct TrainedRun {
    name: String,
    variant: Variant,
    regime: DoseRegime,
    model: Model,
}

fn load_runs(ctx: &Context) -> Result<Vec<TrainedRun>, CliError> {
    let dir = ctx.runs_dir();
    let missing = || CliError::Missing(format!("no trained runs under {}; run `crossdose train` first", dir.display()));
    let Ok(entries) = fs::read_dir(&dir) else {
        return Err(missing());
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    let mut runs = Vec::new();
    for path in paths {
        let last = last_checkpoint_dir(&path);
        if !last.join(META_FILE).exists() || !path.join(CONFIG_COPY).exists() {
            continue;
        }
        let text = fs::read_to_string(path.join(CONFIG_COPY)).map_err(|e| io_err(&path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.join(CONFIG_COPY).display(), e.message())))?;
        let ckpt = Checkpoint::load(&last)?;
        if ckpt.epoch < cfg.train.epochs {
            warn!("{} stopped after epoch {} of {}", path.display(), ckpt.epoch, cfg.train.epochs);
        }
        runs.push(TrainedRun {
            name: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            variant: cfg.variant()?,
            regime: cfg.regime()?,
            model: ckpt.model()?,
        });
    }
    if runs.is_empty() {
        return Err(missing());
    }
    Ok(runs)
}

/// All-dose runs become one method each; single-dose runs are grouped per
/// variant into a per-dose method. Direct specialists form `individual`.
fn methods(runs: Vec<TrainedRun>) -> Result<Vec<Box<dyn Denoiser>>, CliError> {
    let mut singles: BTreeMap<String, BTreeMap<Dose, Model>> = BTreeMap::new();
    let mut all: Vec<Box<dyn Denoiser>> = Vec::new();
    for run in runs {
        match run.regime {
            DoseRegime::AllDosesUniform => all.push(Box::new(ModelMethod::new(run.name, run.model))),
            DoseRegime::SingleDose(d) => {
                let group = match run.variant {
                    Variant::Direct => INDIVIDUAL.to_string(),
                    v => format!("{INDIVIDUAL}_{v}"),
                };
                let slot = singles.entry(group.clone()).or_default();
                if slot.insert(d, run.model).is_some() {
                    return Err(CliError::Config(format!("two {group} runs at {d}; keep one")));
                }
            }
        }
    }
    let mut out: Vec<Box<dyn Denoiser>> = Vec::new();
    for (name, models) in singles {
        out.push(Box::new(PerDoseMethod::new(name, models)?));
    }
    out.extend(all);
    Ok(out)
}

fn table_rows(result: &BenchmarkResult) -> Vec<String> {
    let mut rows = vec![LDPET_METHOD.to_string()];
    for r in &result.records {
        if !rows.contains(&r.method) {
            rows.push(r.method.clone());
        }
    }
    rows
}

fn significance(result: &BenchmarkResult) -> Result<Vec<SignificanceRow>, CliError> {
    if !result.records.iter().any(|r| r.method == INDIVIDUAL) {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for method in table_rows(result).iter().filter(|m| *m != INDIVIDUAL) {
        for metric in [Metric::Psnr, Metric::Ssim, Metric::Rmse] {
            match paired_significance(result, method, INDIVIDUAL, metric) {
                Ok(r) => rows.extend(r),
                // too few subjects for a test
                Err(crossdose::Error::Validation(msg)) => warn!("no significance for {method}: {msg}"),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(rows)
}

pub fn evaluate(ctx: &Context) -> Result<(), CliError> {
    let (root, manifest) = ctx.dataset()?;
    let methods = methods(load_runs(ctx)?)?;
    let refs: Vec<&dyn Denoiser> = methods.iter().map(Box::as_ref).collect();
    info!(
        "evaluating {} on {} test subjects",
        refs.iter().map(|m| m.name()).collect::<Vec<_>>().join(", "),
        manifest.subjects_in(crossdose::rasterio::Split::Test).len()
    );
    let result = run_evaluation(&refs, &root, &manifest)?;
    let sig = significance(&result)?;
    let rows = table_rows(&result);
    let row_refs: Vec<&str> = rows.iter().map(String::as_str).collect();
    let dir = ctx.results_dir();
    write_results(&dir, &result, &sig, &row_refs)?;
    if ctx.cfg.eval.figures {
        let n = write_figures(&dir.join("figures"), &refs, &root, &manifest)?;
        info!("{n} figure rasters written");
    }
    print!("{}", render_table(&result, &row_refs, &sig));
    Ok(())
}

fn parse_records(path: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(RECORDS_HEADER) {
        return Err(CliError::Other(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = || CliError::Other(format!("{}: malformed line {}", path.display(), i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRecord {
                subject_id: f[0].to_string(),
                dose_fraction: num(f[1])?,
                method: f[2].to_string(),
                psnr: num(f[3])?,
                ssim: num(f[4])?,
                rmse: num(f[5])?,
            })
        })
        .collect()
}

pub fn report(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let records_path = ctx.results_dir().join("records.csv");
    if !records_path.exists() {
        return Err(CliError::Missing(format!(
            "no results at {}; run evaluate first (`crossdose evaluate`)",
            records_path.display()
        )));
    }
    let records = parse_records(&records_path)?;
    if records.is_empty() {
        return Err(CliError::Missing(format!("{} is empty; run evaluate first", records_path.display())));
    }
    let result = BenchmarkResult {
        aggregates: aggregate(&records)?,
        records,
    };
    let sig = significance(&result)?;
    let rows = table_rows(&result);
    let row_refs: Vec<&str> = rows.iter().map(String::as_str).collect();
    let dir = ctx.out.join("report");
    let table = render_table(&result, &row_refs, &sig);
    write(&dir.join("table.txt"), &table)?;
    match per_subject_std(&result) {
        Ok(stds) => write(&dir.join("per_subject_std.csv"), &aggregates_csv(&stds))?,
        Err(e) => warn!("per-subject spread skipped: {e}"),
    }

    let toy = two_scale_problem(cfg.report.toy_ratio, cfg.toy_loss()?, cfg.report.toy_samples, cfg.seed);
    let gap = averaging_gap(&toy)?;
    write(&dir.join("averaging_gap.csv"), &gap_csv(&toy, &gap))?;
    let summary = format!(
        "averaging gap ({} loss, scale ratio {}, {} samples): {:.6} = {:.2} standard errors\n",
        cfg.report.toy_loss,
        cfg.report.toy_ratio,
        cfg.report.toy_samples,
        gap.gap,
        gap.z()
    );
    write(&dir.join("averaging_gap.txt"), &summary)?;
    print!("{table}\n{summary}");
    Ok(())
}

pub fn describe(ctx: &Context) -> Result<(), CliError> {
    let model = Model::build(ctx.cfg.model_spec()?, ctx.cfg.seed)?;
    print!("# resolved configuration\n{}\n# model\n{}", ctx.cfg.to_toml(), model.describe());
    Ok(())
}
