//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations are exposed: a phantom acquired at a chosen dose with its
//! residual-noise statistics, the learning-rate schedule, and the
//! averaging-gap toy problem.

use wasm_bindgen::prelude::*;

use crossdose::analysisdoc::{averaging_gap_binned, two_scale_problem, GapReport, LossKind};
use crossdose::noisestats::{analyze_noise, analyze_noise_masked, residual, Histogram, NoiseReport};
use crossdose::phantom::{simulate_low_dose, synthesize_reference, DoseSimConfig, PhantomSpec};
use crossdose::trainer::lr_at;
use crossdose::RasterF32;

fn js_err(e: crossdose::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A hot-lesion phantom, its low-dose acquisition and the residual `y − x`.
#[wasm_bindgen]
pub struct Simulation {
    size: usize,
    reference: RasterF32,
    low_dose: RasterF32,
    residual: RasterF32,
    whole: NoiseReport,
    lesion: NoiseReport,
}

impl Simulation {
    pub fn run(size: usize, dose_fraction: f64, counts_per_suv: f64, seed: u64) -> crossdose::Result<Self> {
        let spec = PhantomSpec::hot_lesion(size, seed);
        let reference = synthesize_reference(&spec)?;
        let low_dose = simulate_low_dose(
            &reference,
            &DoseSimConfig {
                dose_fraction,
                counts_per_suv,
                seed: seed.wrapping_add(1),
            },
        )?
        .image;
        let residual = residual(&reference, &low_dose)?;
        let whole = analyze_noise(&reference, &low_dose, dose_fraction)?;
        let lesion = analyze_noise_masked(&reference, &low_dose, dose_fraction, &spec.lesion_mask())?;
        Ok(Self {
            size,
            reference,
            low_dose,
            residual,
            whole,
            lesion,
        })
    }

    pub fn whole(&self) -> &NoiseReport {
        &self.whole
    }

    pub fn lesion(&self) -> &NoiseReport {
        &self.lesion
    }

    pub fn residual_histogram(&self, bins: usize) -> crossdose::Result<Histogram> {
        let values: Vec<f64> = self.residual.data().iter().map(|&v| f64::from(v)).collect();
        let (lo, hi) = (f64::from(self.residual.min()), f64::from(self.residual.max()));
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Histogram::new(&values, lo, hi, bins)
    }
}

#[wasm_bindgen]
impl Simulation {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, dose_fraction: f64, counts_per_suv: f64, seed: u32) -> Result<Simulation, JsError> {
        Self::run(size, dose_fraction, counts_per_suv, u64::from(seed)).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn reference_pixels(&self) -> Vec<f32> {
        self.reference.data().to_vec()
    }

    pub fn low_dose_pixels(&self) -> Vec<f32> {
        self.low_dose.data().to_vec()
    }

    pub fn residual_pixels(&self) -> Vec<f32> {
        self.residual.data().to_vec()
    }

    /// `[q05, q95, skewness, frac_negative, max_ld, max_fd]`, whole image
    /// or lesion only.
    pub fn stats(&self, lesion: bool) -> Vec<f64> {
        let r = if lesion { &self.lesion } else { &self.whole };
        vec![r.q05, r.q95, r.skewness, r.frac_negative, r.max_ld, r.max_fd]
    }

    /// Bin edges followed by counts: `bins + 1` edges, then `bins` counts.
    pub fn histogram(&self, bins: usize) -> Result<Vec<f64>, JsError> {
        let h = self.residual_histogram(bins).map_err(js_err)?;
        Ok(h.edges.iter().copied().chain(h.counts.iter().map(|&c| c as f64)).collect())
    }
}

/// Learning rate at `points` evenly spaced iterations of a run of `total` steps.
pub fn schedule(total: usize, lr_base: f64, gamma: f64, points: usize) -> crossdose::Result<Vec<f64>> {
    let points = points.max(2);
    (0..points)
        .map(|i| lr_at(i * total / (points - 1), total, lr_base, gamma))
        .collect()
}

#[wasm_bindgen]
pub fn lr_schedule(total: usize, lr_base: f64, gamma: f64, points: usize) -> Result<Vec<f64>, JsError> {
    schedule(total, lr_base, gamma, points).map_err(js_err)
}

pub fn gap_report(ratio: f64, mae: bool, samples: usize, bins: usize, seed: u64) -> crossdose::Result<GapReport> {
    let loss = if mae { LossKind::Mae } else { LossKind::Mse };
    averaging_gap_binned(&two_scale_problem(ratio, loss, samples, seed), bins)
}

/// Averaging-gap toy result: `[gap, standard_error, z]`, then per bin
/// `[x_mid, mixed, low_noise_optimum, high_noise_optimum]` (NaN where a dose
/// has too few samples in the bin).
#[wasm_bindgen]
pub fn averaging_gap(ratio: f64, mae: bool, samples: usize, bins: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    let r = gap_report(ratio, mae, samples, bins, u64::from(seed)).map_err(js_err)?;
    let mut out = vec![r.gap, r.standard_error, r.z()];
    for b in &r.bins {
        out.push(0.5 * (b.x_lo + b.x_hi));
        out.push(b.mixed);
        for d in 0..2 {
            out.push(b.per_dose.get(d).copied().flatten().unwrap_or(f64::NAN));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulation_is_deterministic_and_consistent() {
        let a = Simulation::run(64, 0.01, 50.0, 4).unwrap();
        let b = Simulation::run(64, 0.01, 50.0, 4).unwrap();
        assert_eq!(a.low_dose_pixels(), b.low_dose_pixels());
        assert_eq!(a.reference_pixels().len(), 64 * 64);
        for ((y, x), n) in a.reference_pixels().iter().zip(a.low_dose_pixels()).zip(a.residual_pixels()) {
            assert_eq!(y - x, n);
        }
        let s = a.stats(true);
        assert_eq!(s.len(), 6);
        assert!(s[4] > s[5], "lesion max of the 1% image should exceed the reference");
        let h = a.histogram(16).unwrap();
        assert_eq!(h.len(), 17 + 16);
        assert_eq!(h[17..].iter().sum::<f64>(), (64 * 64) as f64);
    }

    #[test]
    fn higher_dose_means_less_noise() {
        let lo = Simulation::run(64, 0.01, 50.0, 9).unwrap().stats(false);
        let hi = Simulation::run(64, 0.5, 50.0, 9).unwrap().stats(false);
        assert!(hi[1] - hi[0] < lo[1] - lo[0]);
        assert!(Simulation::run(64, 0.0, 50.0, 9).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = schedule(1000, 0.01, 0.85, 11).unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s[0], 0.01);
        assert_eq!(s[10], 0.0);
        assert!(s.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn gap_layout() {
        let r = gap_report(10.0, false, 20_000, 8, 1).unwrap();
        assert_eq!(r.bins.len(), 8);
        assert!(r.z() > 5.0);
        assert!(gap_report(10.0, false, 10, 8, 1).is_err());
    }
}
