//! Synthetic full-dose slices and low-count acquisitions by pixelwise Poisson thinning.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::dose::Dose;
use crate::error::{ensure, Error, Result};
use crate::rasterio::{write_raster, DatasetManifest, RasterF32, Split};
use crate::rng::{derive_seed, stream};

pub const DEFAULT_SUV_CLIP_MAX: f64 = 16.0;
pub const DEFAULT_COUNTS_PER_SUV: f64 = 50.0;
pub const DEFAULT_SMOOTHING_SIGMA: f64 = 1.0;
pub const DEFAULT_SIZE: usize = 128;
pub const MIN_SIZE: usize = 32;

/// Rotated ellipse in normalized coordinates: the image spans [-1, 1] on both axes,
/// `x` to the right and `y` downwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub rotation: f64,
}

impl Ellipse {
    /// Squared normalized radius; `<= 1` inside.
    fn rho2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.rho2(x, y) <= 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Organ {
    pub shape: Ellipse,
    pub suv: f64,
}

/// Uniform-uptake disk, painted over organs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lesion {
    pub center: (f64, f64),
    pub radius: f64,
    pub peak_suv: f64,
}

impl Lesion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.center.0).powi(2) + (y - self.center.1).powi(2) <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub body: Ellipse,
    pub background_suv: f64,
    pub organs: Vec<Organ>,
    pub lesions: Vec<Lesion>,
    /// Gaussian post-filter width in pixels; 0 disables it.
    pub smoothing_sigma: f64,
    /// Relative amplitude of a smooth multiplicative uptake texture inside the body.
    pub texture_amplitude: f64,
    pub suv_clip_max: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Body only: constant uptake inside a centred ellipse, nothing else.
    pub fn uniform(size: usize, background_suv: f64) -> Self {
        Self {
            size,
            body: Ellipse {
                center: (0.0, 0.0),
                axes: (0.85, 0.65),
                rotation: 0.0,
            },
            background_suv,
            organs: Vec::new(),
            lesions: Vec::new(),
            smoothing_sigma: 0.0,
            texture_amplitude: 0.0,
            suv_clip_max: DEFAULT_SUV_CLIP_MAX,
            seed: 0,
        }
    }

    /// Torso-like slice with randomized organs and one to four hot lesions.
    pub fn random(size: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "phantom-geometry");
        let mut jitter = |lo: f64, hi: f64| rng.random_range(lo..hi);

        let body = Ellipse {
            center: (jitter(-0.04, 0.04), jitter(-0.04, 0.04)),
            axes: (jitter(0.78, 0.9), jitter(0.58, 0.72)),
            rotation: jitter(-0.12, 0.12),
        };
        let background_suv = jitter(0.8, 1.2);
        let side = if jitter(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
        let mut organs = vec![
            // liver
            Organ {
                shape: Ellipse {
                    center: (side * jitter(0.25, 0.4), jitter(-0.1, 0.1)),
                    axes: (jitter(0.22, 0.32), jitter(0.18, 0.28)),
                    rotation: jitter(-0.6, 0.6),
                },
                suv: jitter(2.0, 3.0),
            },
            // lungs / cold region
            Organ {
                shape: Ellipse {
                    center: (-side * jitter(0.3, 0.45), jitter(-0.3, -0.1)),
                    axes: (jitter(0.12, 0.2), jitter(0.15, 0.25)),
                    rotation: jitter(-0.4, 0.4),
                },
                suv: jitter(0.3, 0.6),
            },
            // heart / bladder: small and hot
            Organ {
                shape: Ellipse {
                    center: (-side * jitter(0.05, 0.2), jitter(0.15, 0.35)),
                    axes: (jitter(0.08, 0.14), jitter(0.08, 0.14)),
                    rotation: jitter(-1.0, 1.0),
                },
                suv: jitter(4.0, 8.0),
            },
            // spine
            Organ {
                shape: Ellipse {
                    center: (jitter(-0.03, 0.03), jitter(0.42, 0.5)),
                    axes: (jitter(0.05, 0.08), jitter(0.05, 0.08)),
                    rotation: 0.0,
                },
                suv: jitter(1.5, 2.5),
            },
        ];
        for organ in &mut organs {
            organ.shape.center.0 += body.center.0;
            organ.shape.center.1 += body.center.1;
        }

        let n_lesions = rng.random_range(1..=4);
        let mut spec = Self {
            size,
            body,
            background_suv,
            organs,
            lesions: Vec::new(),
            smoothing_sigma: DEFAULT_SMOOTHING_SIGMA,
            texture_amplitude: 0.1,
            suv_clip_max: DEFAULT_SUV_CLIP_MAX,
            seed,
        };
        for _ in 0..n_lesions {
            let radius = rng.random_range(0.025..0.07);
            let peak_suv = rng.random_range(4.0..12.0);
            spec.lesions.push(spec.place_lesion(&mut rng, radius, peak_suv));
        }
        spec
    }

    /// Random slice with two or three larger, strongly hot lesions.
    pub fn hot_lesion(size: usize, seed: u64) -> Self {
        let mut spec = Self::random(size, seed);
        let mut rng = stream(seed, "hot-lesions");
        spec.lesions.clear();
        for _ in 0..rng.random_range(2..=3) {
            let radius = rng.random_range(0.07..0.11);
            let peak_suv = rng.random_range(6.0..10.0);
            spec.lesions.push(spec.place_lesion(&mut rng, radius, peak_suv));
        }
        spec
    }

    fn place_lesion(&self, rng: &mut impl Rng, radius: f64, peak_suv: f64) -> Lesion {
        loop {
            let center = (
                self.body.center.0 + rng.random_range(-0.7..0.7) * self.body.axes.0,
                self.body.center.1 + rng.random_range(-0.7..0.7) * self.body.axes.1,
            );
            let lesion = Lesion {
                center,
                radius,
                peak_suv,
            };
            if self.lesion_inside_body(&lesion) {
                return lesion;
            }
        }
    }

    fn lesion_inside_body(&self, lesion: &Lesion) -> bool {
        (0..32).all(|k| {
            let t = 2.0 * PI * k as f64 / 32.0;
            self.body.contains(
                lesion.center.0 + lesion.radius * t.cos(),
                lesion.center.1 + lesion.radius * t.sin(),
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.size >= MIN_SIZE, "phantom size {} is below {MIN_SIZE}", self.size);
        ensure!(
            self.body.axes.0 > 0.0 && self.body.axes.1 > 0.0,
            "body ellipse has zero area"
        );
        ensure!(self.background_suv >= 0.0, "background SUV must be nonnegative");
        ensure!(self.smoothing_sigma >= 0.0, "smoothing sigma must be nonnegative");
        ensure!(
            self.texture_amplitude >= 0.0 && self.texture_amplitude < 1.0,
            "texture amplitude must lie in [0, 1)"
        );
        ensure!(self.suv_clip_max > 0.0, "suv_clip_max must be positive");
        for (i, o) in self.organs.iter().enumerate() {
            ensure!(o.shape.axes.0 > 0.0 && o.shape.axes.1 > 0.0, "organ {i} has zero area");
            ensure!(o.suv >= 0.0, "organ {i} has negative SUV");
        }
        for (i, l) in self.lesions.iter().enumerate() {
            ensure!(l.radius > 0.0, "lesion {i} has zero radius");
            ensure!(l.peak_suv >= 0.0, "lesion {i} has negative SUV");
            ensure!(self.lesion_inside_body(l), "lesion {i} extends outside the body");
        }
        Ok(())
    }

    fn pixel_center(&self, idx: usize) -> (f64, f64) {
        let n = self.size as f64;
        (
            ((idx % self.size) as f64 + 0.5) / n * 2.0 - 1.0,
            ((idx / self.size) as f64 + 0.5) / n * 2.0 - 1.0,
        )
    }

    /// Pixels covered by any lesion disk, row-major.
    pub fn lesion_mask(&self) -> Vec<bool> {
        (0..self.size * self.size)
            .map(|i| {
                let (x, y) = self.pixel_center(i);
                self.lesions.iter().any(|l| l.contains(x, y))
            })
            .collect()
    }

    pub fn body_mask(&self) -> Vec<bool> {
        (0..self.size * self.size)
            .map(|i| {
                let (x, y) = self.pixel_center(i);
                self.body.contains(x, y)
            })
            .collect()
    }
}

/// Renders the clean reference slice: paint, texture, smooth, clip to `[0, suv_clip_max]`.
pub fn synthesize_reference(spec: &PhantomSpec) -> Result<RasterF32> {
    spec.validate()?;
    let n = spec.size;
    let body = spec.body_mask();
    let mut img: Vec<f64> = (0..n * n)
        .map(|i| {
            if !body[i] {
                return 0.0;
            }
            let (x, y) = spec.pixel_center(i);
            let mut v = spec.background_suv;
            for o in &spec.organs {
                if o.shape.contains(x, y) {
                    v = o.suv;
                }
            }
            v
        })
        .collect();

    if spec.texture_amplitude > 0.0 {
        let mut rng = stream(spec.seed, "phantom-texture");
        let white: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
        let mut field = gaussian_blur(&white, n, n, n as f64 / 24.0);
        let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
        if rms > 0.0 {
            field.iter_mut().for_each(|v| *v /= rms);
        }
        for (i, v) in img.iter_mut().enumerate() {
            if body[i] {
                *v *= (1.0 + spec.texture_amplitude * field[i]).max(0.0);
            }
        }
    }

    for (i, v) in img.iter_mut().enumerate() {
        let (x, y) = spec.pixel_center(i);
        for l in &spec.lesions {
            if l.contains(x, y) {
                *v = l.peak_suv;
            }
        }
    }

    if spec.smoothing_sigma > 0.0 {
        img = gaussian_blur(&img, n, n, spec.smoothing_sigma);
    }
    let data = img
        .into_iter()
        .map(|v| v.clamp(0.0, spec.suv_clip_max) as f32)
        .collect();
    RasterF32::new(n, n, data)
}

/// Separable Gaussian filter truncated at 3 sigma; borders repeat the edge pixel.
pub(crate) fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * img[r * w + clamp(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * tmp[clamp(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseSimConfig {
    pub dose_fraction: f64,
    /// Expected full-dose counts per SUV per pixel.
    pub counts_per_suv: f64,
    pub seed: u64,
}

impl DoseSimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.dose_fraction > 0.0 && self.dose_fraction <= 1.0,
            "dose fraction {} outside (0, 1]",
            self.dose_fraction
        );
        ensure!(
            self.counts_per_suv > 0.0 && self.counts_per_suv.is_finite(),
            "counts per SUV must be positive, got {}",
            self.counts_per_suv
        );
        Ok(())
    }
}

/// A noisy acquisition together with the count fraction it was simulated at.
#[derive(Debug, Clone, PartialEq)]
pub struct LowDoseImage {
    pub image: RasterF32,
    pub dose_fraction: f64,
}

/// Per pixel `x = Poisson(d·κ·y) / (d·κ)`: unbiased, with variance `y / (d·κ)`.
pub fn simulate_low_dose(y: &RasterF32, cfg: &DoseSimConfig) -> Result<LowDoseImage> {
    cfg.validate()?;
    ensure!(
        y.data().iter().all(|&v| v >= 0.0),
        "reference activity must be nonnegative"
    );
    let scale = cfg.dose_fraction * cfg.counts_per_suv;
    let mut rng = stream(cfg.seed, "poisson-thinning");
    let data = y
        .data()
        .iter()
        .map(|&v| {
            let lambda = scale * f64::from(v);
            if lambda <= 0.0 {
                return 0.0;
            }
            let counts: f64 = Poisson::new(lambda)
                .expect("positive finite rate")
                .sample(&mut rng);
            (counts / scale) as f32
        })
        .collect();
    Ok(LowDoseImage {
        image: RasterF32::new(y.height(), y.width(), data)?,
        dose_fraction: cfg.dose_fraction,
    })
}

/// Dataset-wide generation settings; per-file seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub counts_per_suv: f64,
    pub seed: u64,
    pub doses: Vec<Dose>,
    /// Fraction of subjects assigned to the training split.
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            counts_per_suv: DEFAULT_COUNTS_PER_SUV,
            seed: 0,
            doses: Dose::STANDARD.to_vec(),
            train_fraction: 0.75,
        }
    }
}

pub fn subject_id(index: usize) -> String {
    format!("s{index:03}")
}

/// The default subject population: `n` random torso slices, each seeded from
/// `(seed, subject id)`.
pub fn standard_specs(n: usize, size: usize, seed: u64) -> Vec<PhantomSpec> {
    (0..n)
        .map(|i| PhantomSpec::random(size, derive_seed(seed, &subject_id(i))))
        .collect()
}

/// Reference and all low-dose rasters for one subject, in memory.
pub fn simulate_subject(
    spec: &PhantomSpec,
    id: &str,
    cfg: &DatasetConfig,
) -> Result<(RasterF32, Vec<(Dose, RasterF32)>)> {
    let y = synthesize_reference(spec)?;
    let lows = cfg
        .doses
        .iter()
        .map(|&d| {
            let sim = DoseSimConfig {
                dose_fraction: d.fraction(),
                counts_per_suv: cfg.counts_per_suv,
                seed: derive_seed(cfg.seed, &format!("{id}/{}", d.file_stem())),
            };
            simulate_low_dose(&y, &sim).map(|x| (d, x.image))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((y, lows))
}

/// Writes one subject directory per spec plus `manifest.txt`.
pub fn build_dataset(specs: &[PhantomSpec], cfg: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    ensure!(!specs.is_empty(), "no phantom specs given");
    ensure!(!cfg.doses.is_empty(), "no dose levels requested");
    ensure!(
        (0.0..=1.0).contains(&cfg.train_fraction),
        "train fraction must lie in [0, 1]"
    );
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let ids: Vec<String> = (0..specs.len()).map(subject_id).collect();

    let write_subject = |(spec, id): (&PhantomSpec, &String)| -> Result<()> {
        let (y, lows) = simulate_subject(spec, id, cfg)?;
        let dir = root.join(id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_raster(&DatasetManifest::reference_path(root, id), &y)?;
        for (d, x) in &lows {
            write_raster(&DatasetManifest::low_dose_path(root, id, *d), x)?;
        }
        Ok(())
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        specs.par_iter().zip(ids.par_iter()).try_for_each(write_subject)?;
    }
    #[cfg(not(feature = "parallel"))]
    specs.iter().zip(ids.iter()).try_for_each(write_subject)?;

    let n_train = (cfg.train_fraction * specs.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.shuffle(&mut stream(cfg.seed, "split"));
    let mut split = BTreeMap::new();
    for (rank, &i) in order.iter().enumerate() {
        split.insert(ids[i].clone(), if rank < n_train { Split::Train } else { Split::Test });
    }
    let mut doses = cfg.doses.clone();
    doses.sort();
    doses.dedup();
    let manifest = DatasetManifest {
        subject_ids: ids,
        dose_levels: doses,
        split,
        seed: cfg.seed,
        suv_clip_max: specs[0].suv_clip_max,
    };
    manifest.validate()?;
    manifest.write(root)?;
    Ok(manifest)
}
