//! Run configuration: defaults, then a TOML file, then command-line flags.
//!
//! Every leaf key of the file has exactly one flag, named after the key with
//! underscores turned into dashes. The flag set is generated from the default
//! configuration, so the two cannot drift apart.

use std::path::Path;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crossdose::analysisdoc::LossKind;
use crossdose::loss::LossConfig;
use crossdose::model::{ModelSpec, Variant};
use crossdose::phantom::DatasetConfig;
use crossdose::trainer::{DoseRegime, TrainConfig};
use crossdose::Dose;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub phantom: PhantomSection,
    pub dose: DoseSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub subjects: usize,
    pub size: usize,
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseSection {
    pub counts_per_suv: f64,
    /// Percent values.
    pub doses: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    pub depth: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub regime: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// 0 trains on whole images.
    pub patch_size: usize,
    pub samples_per_subject: usize,
    pub keep_epoch_checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub figures: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub toy_ratio: f64,
    pub toy_samples: usize,
    pub toy_loss: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let spec = ModelSpec::new(Variant::Residual);
        Self {
            name: "auto".into(),
            seed: 0,
            phantom: PhantomSection {
                subjects: 24,
                size: crossdose::phantom::DEFAULT_SIZE,
                train_fraction: DatasetConfig::default().train_fraction,
            },
            dose: DoseSection {
                counts_per_suv: crossdose::phantom::DEFAULT_COUNTS_PER_SUV,
                doses: Dose::STANDARD.iter().map(|d| d.percent()).collect(),
            },
            model: ModelSection {
                variant: spec.variant.to_string(),
                depth: spec.depth,
                base_channels: spec.base_channels,
                leaky_slope: spec.internal_leaky_slope,
                batch_norm: spec.batch_norm,
            },
            train: TrainSection {
                regime: train.dose_regime.to_string(),
                epochs: train.epochs,
                batch_size: train.batch_size,
                lr: train.lr_base,
                momentum: train.momentum,
                weight_decay: train.weight_decay,
                gamma: train.gamma,
                patch_size: 32,
                samples_per_subject: 16,
                keep_epoch_checkpoints: train.keep_epoch_checkpoints,
            },
            loss: LossSection {
                lambda: LossConfig::default().lambda,
            },
            eval: EvalSection { figures: true },
            report: ReportSection {
                toy_ratio: 10.0,
                toy_samples: 200_000,
                toy_loss: "mse".into(),
            },
        }
    }
}

/// Leaf key of the configuration: its section (empty for top level) and name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Key {
    pub section: String,
    pub name: String,
}

impl Key {
    pub fn flag(&self) -> String {
        self.name.replace('_', "-")
    }

    pub fn dotted(&self) -> String {
        if self.section.is_empty() {
            self.name.clone()
        } else {
            format!("{}.{}", self.section, self.name)
        }
    }
}

fn default_table() -> Table {
    Table::try_from(RunConfig::default()).expect("default config serializes")
}

/// Leaf keys in file order.
pub fn keys() -> Vec<(Key, Value)> {
    let mut out = Vec::new();
    for (k, v) in default_table() {
        match v {
            Value::Table(t) => {
                for (name, leaf) in t {
                    out.push((Key { section: k.clone(), name }, leaf));
                }
            }
            leaf => out.push((Key { section: String::new(), name: k }, leaf)),
        }
    }
    out
}

fn help_for(key: &str) -> &'static str {
    match key {
        "name" => "Run name under runs/; 'auto' derives it from variant and regime",
        "seed" => "Master seed for data, initialization and sampling",
        "subjects" => "Number of phantoms to generate",
        "size" => "Phantom side length in pixels",
        "train_fraction" => "Fraction of subjects in the training split",
        "counts_per_suv" => "Expected full-dose counts per SUV per pixel",
        "doses" => "Count levels in percent, comma separated",
        "variant" => "Network variant: residual, direct or dose_embedded",
        "depth" => "U-Net resolution levels",
        "base_channels" => "Channels at the first level",
        "leaky_slope" => "Negative slope of the internal LeakyReLU",
        "batch_norm" => "Batch normalization after internal convolutions",
        "regime" => "Training doses: 'all' or 'dose=<fraction>'",
        "epochs" => "Training epochs",
        "batch_size" => "Samples per SGD step",
        "lr" => "Base learning rate",
        "momentum" => "SGD momentum",
        "weight_decay" => "Decoupled weight decay",
        "gamma" => "Exponent of the polynomial learning-rate decay",
        "patch_size" => "Square training crop in pixels; 0 uses whole images",
        "samples_per_subject" => "Training items per subject and epoch",
        "keep_epoch_checkpoints" => "Keep a checkpoint for every epoch",
        "lambda" => "Weight of the SSIM term in the loss",
        "figures" => "Write difference maps and MIPs during evaluate",
        "toy_ratio" => "Noise-scale ratio of the averaging-gap toy problem",
        "toy_samples" => "Sample count of the averaging-gap toy problem",
        "toy_loss" => "Loss of the averaging-gap toy problem: mse or mae",
        _ => "",
    }
}

fn display_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(display_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// One global flag per configuration key.
pub fn register_flags(mut cmd: Command) -> Command {
    for (key, default) in keys() {
        let help = format!("{} [config: {}] [default: {}]", help_for(&key.name), key.dotted(), display_value(&default));
        cmd = cmd.arg(
            Arg::new(key.dotted())
                .long(key.flag())
                .value_name(key.name.to_uppercase())
                .help(help)
                .action(ArgAction::Set)
                .global(true),
        );
    }
    cmd
}

fn parse_flag(raw: &str, like: &Value, key: &Key) -> Result<Value, CliError> {
    let bad = |what: &str| CliError::Config(format!("--{}: expected {what}, got '{raw}'", key.flag()));
    Ok(match like {
        Value::Integer(_) => Value::Integer(raw.trim().parse().map_err(|_| bad("an integer"))?),
        Value::Float(_) => Value::Float(raw.trim().parse().map_err(|_| bad("a number"))?),
        Value::Boolean(_) => Value::Boolean(raw.trim().parse().map_err(|_| bad("true or false"))?),
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(|s| s.trim().parse::<i64>().map(Value::Integer).map_err(|_| bad("comma-separated integers")))
                .collect::<Result<_, _>>()?,
        ),
        _ => return Err(bad("a scalar")),
    })
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set(table: &mut Table, key: &Key, value: Value) {
    if key.section.is_empty() {
        table.insert(key.name.clone(), value);
    } else {
        let section = table
            .entry(key.section.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        if let Value::Table(t) = section {
            t.insert(key.name.clone(), value);
        }
    }
}

/// Defaults, overridden by the file (if any), overridden by flags.
pub fn resolve(file: Option<&Path>, matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut table = default_table();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let over: Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, over);
    }
    for (key, default) in keys() {
        if let Some(raw) = matches.get_one::<String>(&key.dotted()) {
            set(&mut table, &key, parse_flag(raw, &default, &key)?);
        }
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_err(e: crossdose::Error) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.doses()?;
        self.variant()?;
        self.regime()?;
        self.toy_loss()?;
        self.model_spec()?.validate().map_err(config_err)?;
        self.train_config()?.validate().map_err(config_err)?;
        if self.phantom.subjects == 0 {
            return Err(CliError::Config("subjects must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn doses(&self) -> Result<Vec<Dose>, CliError> {
        if self.dose.doses.is_empty() {
            return Err(CliError::Config("doses must not be empty".into()));
        }
        self.dose.doses.iter().map(|&p| Dose::from_percent(p).map_err(config_err)).collect()
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        self.model.variant.parse().map_err(config_err)
    }

    pub fn regime(&self) -> Result<DoseRegime, CliError> {
        self.train.regime.parse().map_err(config_err)
    }

    pub fn toy_loss(&self) -> Result<LossKind, CliError> {
        match self.report.toy_loss.as_str() {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            other => Err(CliError::Config(format!("toy_loss must be mse or mae, got '{other}'"))),
        }
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig, CliError> {
        Ok(DatasetConfig {
            counts_per_suv: self.dose.counts_per_suv,
            seed: self.seed,
            doses: self.doses()?,
            train_fraction: self.phantom.train_fraction,
        })
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let mut spec = ModelSpec::new(self.variant()?);
        spec.depth = self.model.depth;
        spec.base_channels = self.model.base_channels;
        spec.internal_leaky_slope = self.model.leaky_slope;
        spec.batch_norm = self.model.batch_norm;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        Ok(TrainConfig {
            lr_base: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            gamma: t.gamma,
            dose_regime: self.regime()?,
            loss: LossConfig {
                lambda: self.loss.lambda,
                ..LossConfig::default()
            },
            seed: self.seed,
            patch_size: (t.patch_size > 0).then_some(t.patch_size),
            samples_per_subject: t.samples_per_subject,
            keep_epoch_checkpoints: t.keep_epoch_checkpoints,
        })
    }

    /// Directory name under `runs/`.
    pub fn run_name(&self) -> Result<String, CliError> {
        if self.name != "auto" {
            if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
                return Err(CliError::Config(format!("invalid run name '{}'", self.name)));
            }
            return Ok(self.name.clone());
        }
        let regime = match self.regime()? {
            DoseRegime::AllDosesUniform => "all".to_string(),
            DoseRegime::SingleDose(d) => d.file_stem(),
        };
        Ok(format!("{}_{regime}", self.variant()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matches(args: &[&str]) -> ArgMatches {
        let cmd = register_flags(Command::new("t").subcommand(Command::new("x")));
        cmd.try_get_matches_from(std::iter::once("t").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
        assert_eq!(cfg.run_name().unwrap(), "residual_all");
    }

    #[test]
    fn flags_mirror_keys() {
        let ks = keys();
        let mut flags: Vec<String> = ks.iter().map(|(k, _)| k.flag()).collect();
        let n = flags.len();
        flags.sort();
        flags.dedup();
        assert_eq!(flags.len(), n, "two keys map to one flag");
        let cmd = register_flags(Command::new("t"));
        let longs: Vec<String> = cmd.get_arguments().filter_map(|a| a.get_long()).map(String::from).collect();
        assert_eq!(longs.len(), n);
        for f in &flags {
            assert!(longs.contains(f), "no flag for {f}");
        }
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 7\n[train]\nepochs = 3\nlr = 0.02\n").unwrap();
        let cfg = resolve(Some(&path), &matches(&["x", "--epochs", "5", "--doses", "1,5"])).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.lr, 0.02);
        assert_eq!(cfg.dose.doses, vec![1, 5]);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nepoch = 3\n").unwrap();
        assert!(matches!(resolve(Some(&path), &matches(&[])), Err(CliError::Config(_))));
        for args in [
            &["--epochs", "x"][..],
            &["--doses", "3"],
            &["--variant", "unet"],
            &["--regime", "dose=0.3"],
            &["--epochs", "0"],
            &["--toy-loss", "huber"],
        ] {
            assert!(matches!(resolve(None, &matches(args)), Err(CliError::Config(_))), "{args:?}");
        }
    }

    #[test]
    fn run_names() {
        let mut cfg = RunConfig::default();
        cfg.model.variant = "direct".into();
        cfg.train.regime = "dose=0.05".into();
        assert_eq!(cfg.run_name().unwrap(), "direct_d005");
        cfg.name = "../x".into();
        assert!(cfg.run_name().is_err());
    }
}
