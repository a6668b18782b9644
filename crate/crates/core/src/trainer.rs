//! Training loop: SGD with momentum and decoupled weight decay under a
//! polynomial learning-rate decay, mixed-dose or single-dose sampling, and
//! resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dose::Dose;
use crate::error::{ensure, Error, Result};
use crate::loss::{total_loss, BatchShape, LossConfig};
use crate::metrics::Window;
use crate::model::{Model, ModelSpec, Param, Variant};
use crate::nn::Tensor;
use crate::rasterio::{read_raster, read_tensor, write_tensor, DatasetManifest, RasterF32, Split, TensorBlob};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoseRegime {
    AllDosesUniform,
    SingleDose(Dose),
}

impl fmt::Display for DoseRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DoseRegime::AllDosesUniform => f.write_str("all"),
            DoseRegime::SingleDose(d) => write!(f, "dose={}", d.fraction()),
        }
    }
}

impl FromStr for DoseRegime {
    type Err = Error;

    /// `all`, or `dose=<d>` with `d` as a fraction, percentage or file stem.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "all" || s == "all_doses_uniform" {
            return Ok(DoseRegime::AllDosesUniform);
        }
        match s.strip_prefix("dose=") {
            Some(d) => Ok(DoseRegime::SingleDose(d.parse()?)),
            None => Err(Error::Validation(format!(
                "dose regime must be 'all' or 'dose=<d>', got '{s}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub dose_regime: DoseRegime,
    pub loss: LossConfig,
    pub seed: u64,
    /// Square training crop; `None` trains on whole images.
    pub patch_size: Option<usize>,
    /// Items per training subject in one epoch.
    pub samples_per_subject: usize,
    /// Keep a checkpoint directory per epoch in addition to `last/`.
    pub keep_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 16,
            gamma: 0.85,
            dose_regime: DoseRegime::AllDosesUniform,
            loss: LossConfig::default(),
            seed: 0,
            patch_size: None,
            samples_per_subject: 1,
            keep_epoch_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.gamma > 0.0 && self.gamma.is_finite(), "gamma must be positive");
        ensure!(self.lr_base > 0.0 && self.lr_base.is_finite(), "lr_base must be positive");
        ensure!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        ensure!(self.weight_decay >= 0.0, "weight_decay must be nonnegative");
        ensure!(self.samples_per_subject >= 1, "samples_per_subject must be at least 1");
        ensure!(self.loss.lambda >= 0.0, "loss lambda must be nonnegative");
        self.loss.ssim.validate()?;
        if let Some(p) = self.patch_size {
            ensure!(p >= self.loss.ssim.window.size(), "patch_size {p} is smaller than the SSIM window");
        }
        Ok(())
    }

    /// Hash of every field that shapes the optimization trajectory.
    pub fn digest(&self) -> String {
        let window = match self.loss.ssim.window {
            Window::Uniform { size } => format!("uniform:{size}"),
            Window::Gaussian { size, sigma } => format!("gaussian:{size}:{sigma}"),
        };
        let canonical = format!(
            "lr_base={}\nmomentum={}\nweight_decay={}\nepochs={}\nbatch_size={}\ngamma={}\nregime={}\n\
             lambda={}\nwindow={}\nk1={}\nk2={}\nrange={}\nseed={}\npatch={:?}\nsamples={}\n",
            self.lr_base,
            self.momentum,
            self.weight_decay,
            self.epochs,
            self.batch_size,
            self.gamma,
            self.dose_regime,
            self.loss.lambda,
            window,
            self.loss.ssim.k1,
            self.loss.ssim.k2,
            self.loss.ssim.dynamic_range,
            self.seed,
            self.patch_size,
            self.samples_per_subject,
        );
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `lr_base · (1 − n/M)^γ`.
pub fn lr_at(n_iter: usize, total: usize, lr_base: f64, gamma: f64) -> Result<f64> {
    ensure!(total > 0, "total iteration count must be positive");
    ensure!(n_iter <= total, "iteration {n_iter} exceeds total {total}");
    Ok(lr_base * (1.0 - n_iter as f64 / total as f64).powf(gamma))
}

/// One scalar update: `v ← μv + g`, `θ ← θ − lr·(v + wd·θ)`.
pub fn sgd_step(theta: &mut f64, velocity: &mut f64, grad: f64, lr: f64, momentum: f64, weight_decay: f64) {
    *velocity = momentum * *velocity + grad;
    *theta -= lr * (*velocity + weight_decay * *theta);
}

/// One training item: a subject, a dose and the top-left corner of its crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleItem {
    pub subject: usize,
    pub dose: Dose,
    pub row: usize,
    pub col: usize,
}

/// Deterministic per-epoch item order for a training split.
#[derive(Debug, Clone)]
pub struct Sampler {
    subjects: Vec<String>,
    doses: Vec<Dose>,
    seed: u64,
    samples_per_subject: usize,
    crop_range: (usize, usize),
}

pub fn make_sampler(manifest: &DatasetManifest, regime: DoseRegime, seed: u64) -> Result<Sampler> {
    let subjects: Vec<String> = manifest.subjects_in(Split::Train).into_iter().map(String::from).collect();
    ensure!(!subjects.is_empty(), "dataset has no training subjects");
    let doses = match regime {
        DoseRegime::AllDosesUniform => {
            ensure!(!manifest.dose_levels.is_empty(), "dataset has no dose levels");
            manifest.dose_levels.clone()
        }
        DoseRegime::SingleDose(d) => {
            ensure!(
                manifest.dose_levels.contains(&d),
                "requested dose {d} is not in the dataset"
            );
            vec![d]
        }
    };
    Ok(Sampler {
        subjects,
        doses,
        seed,
        samples_per_subject: 1,
        crop_range: (0, 0),
    })
}

impl Sampler {
    /// Several crops per subject per epoch, with corners drawn uniformly
    /// from every position where the patch fits.
    pub fn with_crops(mut self, image: (usize, usize), patch: (usize, usize), samples_per_subject: usize) -> Result<Self> {
        ensure!(
            patch.0 <= image.0 && patch.1 <= image.1,
            "patch {}x{} exceeds image {}x{}",
            patch.0,
            patch.1,
            image.0,
            image.1
        );
        ensure!(samples_per_subject >= 1, "samples_per_subject must be at least 1");
        self.samples_per_subject = samples_per_subject;
        self.crop_range = (image.0 - patch.0, image.1 - patch.1);
        Ok(self)
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn doses(&self) -> &[Dose] {
        &self.doses
    }

    pub fn items_per_epoch(&self) -> usize {
        self.subjects.len() * self.samples_per_subject
    }

    pub fn epoch(&self, epoch: usize) -> Vec<SampleItem> {
        let mut rng = stream(self.seed, &format!("sampler/epoch-{epoch}"));
        let mut order: Vec<usize> = (0..self.items_per_epoch()).map(|i| i % self.subjects.len()).collect();
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|subject| SampleItem {
                subject,
                dose: self.doses[rng.random_range(0..self.doses.len())],
                row: rng.random_range(0..=self.crop_range.0),
                col: rng.random_range(0..=self.crop_range.1),
            })
            .collect()
    }

    pub fn batches(&self, epoch: usize, batch_size: usize) -> Vec<Vec<SampleItem>> {
        self.epoch(epoch).chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
    }
}

/// Mean losses over one epoch's steps; `lr` is the rate used at its first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_mae: f64,
    pub mean_ssim_loss: f64,
    pub lr: f64,
}

pub const LOSS_TRACE_HEADER: &str = "epoch,mean_total,mean_mae,mean_ssim_loss,lr";

pub fn loss_trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = format!("{LOSS_TRACE_HEADER}\n");
    for e in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.mean_total, e.mean_mae, e.mean_ssim_loss, e.lr
        ));
    }
    out
}

pub const META_FILE: &str = "meta.txt";
const CHECKPOINT_FORMAT: &str = "crossdose-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    epoch: usize,
    config_digest: String,
    rng_seed: u64,
    model: SpecMetaOwned,
    params: Vec<String>,
    buffers: Vec<String>,
    #[serde(default)]
    trace: Vec<EpochLoss>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SpecMetaOwned {
    variant: String,
    depth: usize,
    base_channels: usize,
    internal_leaky_slope: f64,
    head_leaky_slope: f64,
    batch_norm: bool,
}

/// Model state plus everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
    pub buffers: Vec<Param>,
    pub momentum: Vec<Param>,
    /// Completed epochs.
    pub epoch: usize,
    pub config_digest: String,
    /// Per-epoch sampler streams derive from this seed and the epoch index.
    pub rng_seed: u64,
    pub trace: Vec<EpochLoss>,
}

fn blob_name(name: &str) -> String {
    format!("{name}.ptn")
}

fn write_params(dir: &Path, params: &[Param]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in params {
        let blob = TensorBlob {
            dims: p.dims.clone(),
            data: p.data.clone(),
        };
        write_tensor(&dir.join(blob_name(&p.name)), &blob)?;
    }
    Ok(())
}

fn read_params(dir: &Path, names: &[String]) -> Result<Vec<Param>> {
    names
        .iter()
        .map(|name| {
            let blob = read_tensor(&dir.join(blob_name(name)))?;
            Ok(Param {
                name: name.clone(),
                dims: blob.dims,
                data: blob.data,
            })
        })
        .collect()
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::build(self.spec, 0)?;
        m.load_state(self.params.clone(), self.buffers.clone())?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let staging = dir.with_extension("partial");
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        write_params(&staging.join("params"), &self.params)?;
        write_params(&staging.join("buffers"), &self.buffers)?;
        write_params(&staging.join("momentum"), &self.momentum)?;
        let meta = Meta {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            config_digest: self.config_digest.clone(),
            rng_seed: self.rng_seed,
            model: SpecMetaOwned {
                variant: self.spec.variant.as_str().into(),
                depth: self.spec.depth,
                base_channels: self.spec.base_channels,
                internal_leaky_slope: self.spec.internal_leaky_slope,
                head_leaky_slope: self.spec.head_leaky_slope,
                batch_norm: self.spec.batch_norm,
            },
            params: self.params.iter().map(|p| p.name.clone()).collect(),
            buffers: self.buffers.iter().map(|p| p.name.clone()).collect(),
            trace: self.trace.clone(),
        };
        let text = toml::to_string(&meta).expect("checkpoint meta serializes");
        let meta_path = staging.join(META_FILE);
        fs::write(&meta_path, format!("# crossdose checkpoint\n{text}")).map_err(|e| Error::io(&meta_path, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = toml::from_str(&text).map_err(|e| Error::format(&meta_path, "meta", e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::format(&meta_path, "format", format!("unexpected '{}'", meta.format)));
        }
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::format(&meta_path, "version", format!("unsupported {}", meta.version)));
        }
        let variant: Variant = meta
            .model
            .variant
            .parse()
            .map_err(|e: Error| Error::format(&meta_path, "model.variant", e.to_string()))?;
        let spec = ModelSpec {
            variant,
            depth: meta.model.depth,
            base_channels: meta.model.base_channels,
            internal_leaky_slope: meta.model.internal_leaky_slope,
            head_leaky_slope: meta.model.head_leaky_slope,
            batch_norm: meta.model.batch_norm,
        };
        let params = read_params(&dir.join("params"), &meta.params)?;
        let buffers = read_params(&dir.join("buffers"), &meta.buffers)?;
        let momentum = read_params(&dir.join("momentum"), &meta.params)?;
        let ckpt = Checkpoint {
            spec,
            params,
            buffers,
            momentum,
            epoch: meta.epoch,
            config_digest: meta.config_digest,
            rng_seed: meta.rng_seed,
            trace: meta.trace,
        };
        // shape and name agreement with the architecture
        ckpt.model()
            .map_err(|e| Error::format(&meta_path, "params", e.to_string()))?;
        for (p, m) in ckpt.params.iter().zip(&ckpt.momentum) {
            if p.dims != m.dims {
                return Err(Error::format(&meta_path, "momentum", format!("shape mismatch for {}", p.name)));
            }
        }
        Ok(ckpt)
    }
}

/// Training images held in memory: one reference and one image per sampled
/// dose for each training subject.
struct TrainingImages {
    references: Vec<RasterF32>,
    low_dose: Vec<BTreeMap<Dose, RasterF32>>,
    shape: (usize, usize),
}

impl TrainingImages {
    fn load(root: &Path, sampler: &Sampler) -> Result<Self> {
        let mut references = Vec::new();
        let mut low_dose = Vec::new();
        let mut shape = None;
        for id in sampler.subjects() {
            let y = read_raster(&DatasetManifest::reference_path(root, id))?;
            let mut per_dose = BTreeMap::new();
            for &d in sampler.doses() {
                let path = DatasetManifest::low_dose_path(root, id, d);
                let x = read_raster(&path)?;
                ensure!(x.shape() == y.shape(), "{} does not match its reference size", path.display());
                per_dose.insert(d, x);
            }
            match shape {
                None => shape = Some(y.shape()),
                Some(s) => ensure!(s == y.shape(), "training images differ in size"),
            }
            references.push(y);
            low_dose.push(per_dose);
        }
        Ok(Self {
            references,
            low_dose,
            shape: shape.expect("sampler has subjects"),
        })
    }
}

/// Stateful training run; [`train`] and [`resume`] wrap it.
pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    momentum: Vec<Vec<f32>>,
    images: TrainingImages,
    sampler: Sampler,
    patch: (usize, usize),
    epoch: usize,
    trace: Vec<EpochLoss>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<EpochLoss>,
}

impl Trainer {
    pub fn new(spec: ModelSpec, cfg: TrainConfig, root: &Path, manifest: &DatasetManifest) -> Result<Self> {
        cfg.validate()?;
        manifest.validate()?;
        let model = Model::build(spec, cfg.seed)?;
        Self::with_model(model, cfg, root, manifest)
    }

    fn with_model(model: Model, cfg: TrainConfig, root: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let sampler = make_sampler(manifest, cfg.dose_regime, cfg.seed)?;
        let images = TrainingImages::load(root, &sampler)?;
        let (h, w) = images.shape;
        let patch = match cfg.patch_size {
            Some(p) => (p, p),
            None => (h, w),
        };
        let multiple = model.spec().size_multiple();
        ensure!(
            patch.0 % multiple == 0 && patch.1 % multiple == 0,
            "training size {}x{} is not divisible by {multiple}",
            patch.0,
            patch.1
        );
        ensure!(
            patch.0 >= cfg.loss.ssim.window.size() && patch.1 >= cfg.loss.ssim.window.size(),
            "training size {}x{} is smaller than the SSIM window",
            patch.0,
            patch.1
        );
        let sampler = sampler.with_crops((h, w), patch, cfg.samples_per_subject)?;
        let momentum = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Ok(Self {
            model,
            cfg,
            momentum,
            images,
            sampler,
            patch,
            epoch: 0,
            trace: Vec::new(),
        })
    }

    /// Continues from a checkpoint written under the same configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig, root: &Path, manifest: &DatasetManifest) -> Result<Self> {
        cfg.validate()?;
        manifest.validate()?;
        ensure!(
            ckpt.config_digest == cfg.digest(),
            "checkpoint was written under a different training configuration"
        );
        ensure!(ckpt.rng_seed == cfg.seed, "checkpoint seed differs from the configuration");
        ensure!(ckpt.epoch <= cfg.epochs, "checkpoint is past the configured epoch count");
        let mut t = Self::with_model(ckpt.model()?, cfg, root, manifest)?;
        t.momentum = ckpt.momentum.iter().map(|m| m.data.clone()).collect();
        t.epoch = ckpt.epoch;
        t.trace = ckpt.trace.clone();
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn trace(&self) -> &[EpochLoss] {
        &self.trace
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.items_per_epoch().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: *self.model.spec(),
            params: self.model.params().to_vec(),
            buffers: self.model.buffers().to_vec(),
            momentum: self
                .model
                .params()
                .iter()
                .zip(&self.momentum)
                .map(|(p, m)| Param {
                    name: p.name.clone(),
                    dims: p.dims.clone(),
                    data: m.clone(),
                })
                .collect(),
            epoch: self.epoch,
            config_digest: self.cfg.digest(),
            rng_seed: self.cfg.seed,
            trace: self.trace.clone(),
        }
    }

    fn assemble(&self, batch: &[SampleItem]) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (ph, pw) = self.patch;
        let mut x = Vec::with_capacity(batch.len() * ph * pw);
        let mut y = Vec::with_capacity(batch.len() * ph * pw);
        let mut doses = Vec::with_capacity(batch.len());
        for item in batch {
            let low = &self.images.low_dose[item.subject][&item.dose];
            let reference = &self.images.references[item.subject];
            x.extend_from_slice(low.crop(item.row, item.col, ph, pw)?.data());
            y.extend(reference.crop(item.row, item.col, ph, pw)?.data().iter().map(|&v| f64::from(v)));
            doses.push(item.dose.fraction());
        }
        Ok((Tensor::from_data(1, batch.len(), ph, pw, x), y, doses))
    }

    /// Runs one epoch and returns its mean losses.
    pub fn run_epoch(&mut self) -> Result<EpochLoss> {
        ensure!(self.epoch < self.cfg.epochs, "all {} epochs already ran", self.cfg.epochs);
        let total = self.total_steps();
        let batches = self.sampler.batches(self.epoch, self.cfg.batch_size);
        let first_step = self.epoch * self.steps_per_epoch();
        let embed = self.model.spec().variant == Variant::DoseEmbedded;
        let (mut sum_total, mut sum_mae, mut sum_ssim) = (0.0, 0.0, 0.0);
        let mut first_lr = None;
        for (i, batch) in batches.iter().enumerate() {
            let step = first_step + i;
            let lr = lr_at(step, total, self.cfg.lr_base, self.cfg.gamma)?;
            first_lr.get_or_insert(lr);
            let (x, target, doses) = self.assemble(batch)?;
            let (out, cache) = self.model.forward_train(&x, embed.then_some(&doses[..]))?;
            let pred: Vec<f64> = out.data.iter().map(|&v| f64::from(v)).collect();
            let shape = BatchShape {
                n: out.n,
                h: out.h,
                w: out.w,
            };
            let terms = total_loss(&pred, &target, shape, &self.cfg.loss)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    lr,
                    total: terms.total,
                    mae: terms.mae,
                    ssim_loss: terms.ssim_loss,
                });
            }
            let grad_out = Tensor::from_data(1, out.n, out.h, out.w, terms.grad.iter().map(|&g| g as f32).collect());
            let grads = self.model.backward(&cache, &grad_out);
            self.apply_update(&grads, lr);
            sum_total += terms.total;
            sum_mae += terms.mae;
            sum_ssim += terms.ssim_loss;
        }
        let steps = batches.len() as f64;
        let record = EpochLoss {
            epoch: self.epoch + 1,
            mean_total: sum_total / steps,
            mean_mae: sum_mae / steps,
            mean_ssim_loss: sum_ssim / steps,
            lr: first_lr.unwrap_or(0.0),
        };
        self.epoch += 1;
        self.trace.push(record);
        Ok(record)
    }

    fn apply_update(&mut self, grads: &[Vec<f32>], lr: f64) {
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for ((p, v), g) in self.model.params_mut().iter_mut().zip(&mut self.momentum).zip(grads) {
            for ((theta, vel), &gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                let (mut t64, mut v64) = (f64::from(*theta), f64::from(*vel));
                sgd_step(&mut t64, &mut v64, f64::from(gi), lr, mu, wd);
                *theta = t64 as f32;
                *vel = v64 as f32;
            }
        }
    }

    /// Runs the remaining epochs. With `out`, writes `last/` after every
    /// epoch (plus `epoch-NNN/` when configured) and `loss_trace.csv`.
    pub fn run(mut self, out: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
            if let Some(dir) = out {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join("last"))?;
                if self.cfg.keep_epoch_checkpoints {
                    ckpt.save(&dir.join(format!("epoch-{:03}", self.epoch)))?;
                }
                let trace_path = dir.join("loss_trace.csv");
                fs::write(&trace_path, loss_trace_csv(&self.trace)).map_err(|e| Error::io(&trace_path, e))?;
            }
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            trace: self.trace,
        })
    }
}

pub fn train(
    spec: ModelSpec,
    cfg: &TrainConfig,
    root: &Path,
    manifest: &DatasetManifest,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    Trainer::new(spec, cfg.clone(), root, manifest)?.run(out)
}

pub fn resume(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    root: &Path,
    manifest: &DatasetManifest,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    Trainer::from_checkpoint(ckpt, cfg.clone(), root, manifest)?.run(out)
}

/// Default location of the final checkpoint under a training output directory.
pub fn last_checkpoint_dir(out: &Path) -> PathBuf {
    out.join("last")
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1).max(1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Whole-image inference with batch 1. Sizes that the network cannot take
/// directly are reflect-padded up to the next multiple and cropped back;
/// with `pad = false` they are rejected.
pub fn denoise(model: &Model, x: &RasterF32, dose: Option<f64>, pad: bool) -> Result<RasterF32> {
    let m = model.spec().size_multiple();
    let (h, w) = x.shape();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let doses = dose.map(|d| vec![d]);
    if (ph, pw) == (h, w) {
        return Ok(model.forward(std::slice::from_ref(x), doses.as_deref())?.remove(0));
    }
    if !pad {
        return Err(Error::Validation(format!("image {h}x{w} is not divisible by {m} and padding is off")));
    }
    ensure!(h >= 2 && w >= 2, "image {h}x{w} is too small to reflect-pad");
    let padded = RasterF32::from_fn(ph, pw, |r, c| x.get(reflect(r as isize, h), reflect(c as isize, w)))?;
    let out = model.forward(&[padded], doses.as_deref())?.remove(0);
    out.crop(0, 0, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_dataset, standard_specs, DatasetConfig};
    use tempfile::TempDir;

    #[test]
    fn lr_schedule_values() {
        assert_eq!(lr_at(0, 100, 0.01, 0.85).unwrap(), 0.01);
        assert_eq!(lr_at(100, 100, 0.01, 0.85).unwrap(), 0.0);
        assert!((lr_at(50, 100, 0.01, 0.85).unwrap() - 5.5479e-3).abs() < 1e-7);
        assert!(lr_at(101, 100, 0.01, 0.85).is_err());
        assert!(lr_at(0, 0, 0.01, 0.85).is_err());
    }

    #[test]
    fn sgd_matches_hand_stepped_quadratic() {
        // f(θ) = ½·a·θ², g = a·θ
        let (a, lr, mu, wd) = (3.0, 0.05, 0.9, 1e-4);
        let (mut theta, mut v) = (2.0, 0.0);
        let (mut t_ref, mut v_ref) = (2.0f64, 0.0f64);
        for _ in 0..25 {
            let g = a * theta;
            sgd_step(&mut theta, &mut v, g, lr, mu, wd);
            let g = a * t_ref;
            v_ref = mu * v_ref + g;
            t_ref = t_ref - lr * v_ref - lr * wd * t_ref;
            assert!((theta - t_ref).abs() < 1e-10);
        }
        // first step from rest: θ₁ = θ₀ − lr·(a + wd)·θ₀
        let (mut t1, mut v1) = (2.0, 0.0);
        sgd_step(&mut t1, &mut v1, a * 2.0, lr, mu, wd);
        assert!((t1 - (2.0 - lr * (a + wd) * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn regime_parsing() {
        assert_eq!("all".parse::<DoseRegime>().unwrap(), DoseRegime::AllDosesUniform);
        assert_eq!("dose=0.05".parse::<DoseRegime>().unwrap(), DoseRegime::SingleDose(Dose::P5));
        assert_eq!("dose=25%".parse::<DoseRegime>().unwrap(), DoseRegime::SingleDose(Dose::P25));
        assert!("dose=0.07".parse::<DoseRegime>().is_err());
        assert!("some".parse::<DoseRegime>().is_err());
        let r = DoseRegime::SingleDose(Dose::P10);
        assert_eq!(r.to_string().parse::<DoseRegime>().unwrap(), r);
    }

    #[test]
    fn config_validation_and_digest() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..cfg.clone() },
            TrainConfig { batch_size: 0, ..cfg.clone() },
            TrainConfig { gamma: 0.0, ..cfg.clone() },
            TrainConfig { lr_base: 0.0, ..cfg.clone() },
            TrainConfig { patch_size: Some(8), ..cfg.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert_eq!(cfg.digest(), TrainConfig::default().digest());
        assert_ne!(cfg.digest(), TrainConfig { seed: 1, ..cfg.clone() }.digest());
    }

    fn manifest(n_subjects: usize, doses: Vec<Dose>) -> DatasetManifest {
        let ids: Vec<String> = (0..n_subjects).map(crate::phantom::subject_id).collect();
        DatasetManifest {
            split: ids.iter().map(|id| (id.clone(), Split::Train)).collect(),
            subject_ids: ids,
            dose_levels: doses,
            seed: 0,
            suv_clip_max: 16.0,
        }
    }

    #[test]
    fn sampler_dose_frequencies_are_uniform() {
        let m = manifest(60, Dose::STANDARD.to_vec());
        let s = make_sampler(&m, DoseRegime::AllDosesUniform, 3)
            .unwrap()
            .with_crops((32, 32), (32, 32), 100)
            .unwrap();
        let items = s.epoch(0);
        assert_eq!(items.len(), 6000);
        for d in Dose::STANDARD {
            let count = items.iter().filter(|i| i.dose == d).count();
            assert!((850..=1150).contains(&count), "{d}: {count}");
        }
        // each subject appears exactly samples_per_subject times
        for subject in 0..60 {
            assert_eq!(items.iter().filter(|i| i.subject == subject).count(), 100);
        }
    }

    #[test]
    fn sampler_single_dose_and_determinism() {
        let m = manifest(5, Dose::STANDARD.to_vec());
        let s = make_sampler(&m, DoseRegime::SingleDose(Dose::P5), 9)
            .unwrap()
            .with_crops((64, 64), (32, 32), 4)
            .unwrap();
        let items = s.epoch(2);
        assert!(items.iter().all(|i| i.dose == Dose::P5));
        assert!(items.iter().all(|i| i.row <= 32 && i.col <= 32));
        assert_eq!(items, s.epoch(2));
        assert_ne!(items, s.epoch(3));
        assert_eq!(s.batches(2, 16).len(), 2);

        let partial = manifest(5, vec![Dose::P1, Dose::P50]);
        assert!(make_sampler(&partial, DoseRegime::SingleDose(Dose::P5), 0).is_err());
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    fn tiny_dataset(dir: &Path, subjects: usize) -> DatasetManifest {
        let specs = standard_specs(subjects, 32, 4);
        let cfg = DatasetConfig {
            train_fraction: 1.0,
            ..DatasetConfig::default()
        };
        build_dataset(&specs, &cfg, dir).unwrap()
    }

    fn small_spec(variant: Variant) -> ModelSpec {
        ModelSpec {
            depth: 2,
            base_channels: 8,
            ..ModelSpec::new(variant)
        }
    }

    #[test]
    fn one_epoch_on_32_slices_takes_two_steps() {
        let dir = TempDir::new().unwrap();
        let m = tiny_dataset(dir.path(), 8);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            patch_size: Some(16),
            samples_per_subject: 4,
            ..TrainConfig::default()
        };
        let t = Trainer::new(small_spec(Variant::Residual), cfg.clone(), dir.path(), &m).unwrap();
        assert_eq!(t.steps_per_epoch(), 2);
        let out = t.run(None).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].lr, 0.01);
        assert!(out.trace[0].mean_total.is_finite());
        assert_eq!(out.checkpoint.epoch, 1);
    }

    #[test]
    fn checkpoint_round_trip_and_resume_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let m = tiny_dataset(&data, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            patch_size: Some(16),
            samples_per_subject: 2,
            keep_epoch_checkpoints: true,
            seed: 5,
            ..TrainConfig::default()
        };
        let spec = small_spec(Variant::DoseEmbedded);
        let run_dir = dir.path().join("run");
        let full = train(spec, &cfg, &data, &m, Some(&run_dir)).unwrap();
        assert_eq!(Checkpoint::load(&run_dir.join("last")).unwrap(), full.checkpoint);

        let mid = Checkpoint::load(&run_dir.join("epoch-001")).unwrap();
        assert_eq!(mid.epoch, 1);
        let resumed = resume(&mid, &cfg, &data, &m, None).unwrap();
        assert_eq!(resumed.checkpoint, full.checkpoint);
        assert_eq!(resumed.trace, full.trace);
        let csv = fs::read_to_string(run_dir.join("loss_trace.csv")).unwrap();
        assert_eq!(csv, loss_trace_csv(&full.trace));
        assert_eq!(csv.lines().count(), 4);

        let other = TrainConfig { lr_base: 0.02, ..cfg };
        assert!(resume(&mid, &other, &data, &m, None).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let dir = TempDir::new().unwrap();
        let m = tiny_dataset(dir.path(), 2);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            patch_size: Some(16),
            lr_base: 1e30,
            samples_per_subject: 8,
            ..TrainConfig::default()
        };
        match train(small_spec(Variant::Direct), &cfg, dir.path(), &m, None) {
            Err(Error::NonFinite { step, lr, .. }) => {
                assert!(step >= 1);
                assert!(lr > 0.0);
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn denoise_pads_and_checks_arguments() {
        let model = Model::build(small_spec(Variant::Residual), 0).unwrap();
        let x = RasterF32::from_fn(13, 18, |r, c| (r + c) as f32 * 0.1).unwrap();
        let y = denoise(&model, &x, None, true).unwrap();
        assert_eq!(y.shape(), (13, 18));
        assert!(denoise(&model, &x, None, false).is_err());
        let even = RasterF32::filled(16, 16, 1.0);
        assert_eq!(denoise(&model, &even, None, false).unwrap(), model.forward(&[even.clone()], None).unwrap()[0]);
        let embedded = Model::build(small_spec(Variant::DoseEmbedded), 0).unwrap();
        assert!(matches!(denoise(&embedded, &even, None, true), Err(Error::Usage(_))));
        assert!(denoise(&embedded, &even, Some(0.05), true).is_ok());
    }
}
