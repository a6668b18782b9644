//! Residual-noise statistics: `n = y − x`, its tails, skewness and the
//! maximum-intensity comparison between low-dose and reference images.

use crate::error::{ensure, Result};
use crate::rasterio::RasterF32;

pub fn residual(y: &RasterF32, x: &RasterF32) -> Result<RasterF32> {
    y.zip_map(x, |a, b| a - b)
}

/// Linear interpolation between order statistics at rank `p·(n − 1)`.
/// `sorted` must be ascending and nonempty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Standardized third central moment; `None` when the variance is zero.
pub fn skewness(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (m2, m3) = values.iter().fold((0.0, 0.0), |(m2, m3), v| {
        let d = v - mean;
        (m2 + d * d, m3 + d * d * d)
    });
    let (m2, m3) = (m2 / n, m3 / n);
    // relative floor so that float noise on a constant input reads as zero
    if m2 <= f64::EPSILON * mean.abs().max(1.0).powi(2) {
        return None;
    }
    Some(m3 / m2.powf(1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Whole,
    Lesion,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Whole => "whole",
            Region::Lesion => "lesion",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReport {
    pub dose_fraction: f64,
    pub region: Region,
    pub pixels: usize,
    pub q05: f64,
    pub q95: f64,
    /// 0 when `zero_variance` is set.
    pub skewness: f64,
    pub zero_variance: bool,
    pub frac_negative: f64,
    pub max_ld: f64,
    pub max_fd: f64,
}

/// Whole-image statistics.
pub fn analyze_noise(y: &RasterF32, x: &RasterF32, dose_fraction: f64) -> Result<NoiseReport> {
    y.ensure_same_shape(x, "noise analysis")?;
    let all = vec![true; y.len()];
    report(y, x, dose_fraction, &all, Region::Whole)
}

/// Statistics restricted to `mask` (row-major, same size as the images).
pub fn analyze_noise_masked(y: &RasterF32, x: &RasterF32, dose_fraction: f64, mask: &[bool]) -> Result<NoiseReport> {
    y.ensure_same_shape(x, "noise analysis")?;
    ensure!(mask.len() == y.len(), "mask has {} entries for {} pixels", mask.len(), y.len());
    ensure!(mask.iter().any(|&m| m), "mask selects no pixels");
    report(y, x, dose_fraction, mask, Region::Lesion)
}

fn report(y: &RasterF32, x: &RasterF32, dose_fraction: f64, mask: &[bool], region: Region) -> Result<NoiseReport> {
    let n = residual(y, x)?;
    let mut values: Vec<f64> = n
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| f64::from(v))
        .collect();
    let masked_max = |img: &RasterF32| {
        img.data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| f64::from(v))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let skew = skewness(&values);
    let negatives = values.iter().filter(|&&v| v < 0.0).count();
    values.sort_by(f64::total_cmp);
    Ok(NoiseReport {
        dose_fraction,
        region,
        pixels: values.len(),
        q05: percentile(&values, 0.05),
        q95: percentile(&values, 0.95),
        skewness: skew.unwrap_or(0.0),
        zero_variance: skew.is_none(),
        frac_negative: negatives as f64 / values.len() as f64,
        max_ld: masked_max(x),
        max_fd: masked_max(y),
    })
}

/// Pixels at or above `fraction` of the image maximum; a lesion proxy when
/// the phantom description is not at hand.
pub fn hot_region_mask(y: &RasterF32, fraction: f64) -> Vec<bool> {
    let threshold = f64::from(y.max()) * fraction;
    y.data().iter().map(|&v| f64::from(v) >= threshold).collect()
}

pub const REPORT_HEADER: &str = "subject_id,dose_fraction,region,pixels,q05,q95,skewness,zero_variance,frac_negative,max_ld,max_fd";

pub fn report_csv_row(subject_id: &str, r: &NoiseReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        subject_id,
        r.dose_fraction,
        r.region.as_str(),
        r.pixels,
        r.q05,
        r.q95,
        r.skewness,
        r.zero_variance,
        r.frac_negative,
        r.max_ld,
        r.max_fd
    )
}

/// Fixed-width histogram over `[lo, hi]`; the last bin is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        ensure!(bins >= 1, "histogram needs at least one bin");
        ensure!(lo.is_finite() && hi.is_finite() && hi > lo, "histogram range must be finite and nonempty");
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            if v < lo || v > hi || !v.is_finite() {
                continue;
            }
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

/// Histograms of the bottom and top 5 % of residual values.
pub fn tail_histograms(n: &RasterF32, bins: usize) -> Result<(Histogram, Histogram)> {
    let mut v: Vec<f64> = n.data().iter().map(|&a| f64::from(a)).collect();
    v.sort_by(f64::total_cmp);
    let (q05, q95) = (percentile(&v, 0.05), percentile(&v, 0.95));
    let (min, max) = (v[0], v[v.len() - 1]);
    let lower: Vec<f64> = v.iter().copied().filter(|&a| a <= q05).collect();
    let upper: Vec<f64> = v.iter().copied().filter(|&a| a >= q95).collect();
    let span = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let (l0, l1) = span(min, q05);
    let (u0, u1) = span(q95, max);
    Ok((Histogram::new(&lower, l0, l1, bins)?, Histogram::new(&upper, u0, u1, bins)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{simulate_low_dose, synthesize_reference, DoseSimConfig, PhantomSpec};

    #[test]
    fn residual_cases() {
        let y = RasterF32::new(1, 1, vec![2.0]).unwrap();
        let x = RasterF32::new(1, 1, vec![3.5]).unwrap();
        assert_eq!(residual(&y, &x).unwrap().data(), &[-1.5]);
        assert!(residual(&y, &y).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(residual(&y, &RasterF32::zeros(1, 2)).is_err());
    }

    #[test]
    fn percentile_matches_linear_convention() {
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.05), 0.5);
        assert_eq!(percentile(&v, 0.95), 9.5);
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 1.0), 10.0);
        assert_eq!(percentile(&[3.0], 0.3), 3.0);
        // numpy.percentile([1, 2, 4, 8], 25) == 1.75
        assert_eq!(percentile(&[1.0, 2.0, 4.0, 8.0], 0.25), 1.75);
    }

    #[test]
    fn skewness_cases() {
        assert_eq!(skewness(&[1.0, 1.0, 1.0]), None);
        assert!(skewness(&[1.0, 2.0, 3.0]).unwrap().abs() < 1e-12);
        // {0, 0, 3}: mean 1, m2 = 2, m3 = 2 → 2 / 2^1.5
        let s = skewness(&[0.0, 0.0, 3.0]).unwrap();
        assert!((s - 2.0 / 2f64.powf(1.5)).abs() < 1e-12);
        assert!(skewness(&[0.0, 3.0, 3.0]).unwrap() < 0.0);
    }

    #[test]
    fn identical_images_give_flagged_zero_report() {
        let y = RasterF32::from_fn(8, 8, |r, c| (r * c) as f32).unwrap();
        let r = analyze_noise(&y, &y, 0.5).unwrap();
        assert_eq!((r.q05, r.q95, r.skewness), (0.0, 0.0, 0.0));
        assert!(r.zero_variance);
        assert_eq!(r.frac_negative, 0.0);
        assert_eq!(r.max_ld, r.max_fd);
    }

    #[test]
    fn low_dose_residual_is_negatively_biased_in_lesions() {
        let spec = PhantomSpec::hot_lesion(64, 3);
        let y = synthesize_reference(&spec).unwrap();
        let x = simulate_low_dose(
            &y,
            &DoseSimConfig {
                dose_fraction: 0.01,
                counts_per_suv: 50.0,
                seed: 1,
            },
        )
        .unwrap()
        .image;
        let whole = analyze_noise(&y, &x, 0.01).unwrap();
        assert!(whole.frac_negative > 0.0);
        assert!(whole.q05 <= whole.q95);
        let lesion = analyze_noise_masked(&y, &x, 0.01, &spec.lesion_mask()).unwrap();
        assert_eq!(lesion.region, Region::Lesion);
        assert!(lesion.max_ld > lesion.max_fd);
        assert!(analyze_noise_masked(&y, &x, 0.01, &vec![false; y.len()]).is_err());
    }

    #[test]
    fn histograms_count_every_tail_value() {
        let n = RasterF32::from_fn(20, 20, |r, c| (r as f32 - 10.0) * 0.3 + c as f32 * 0.01).unwrap();
        let (lo, hi) = tail_histograms(&n, 8).unwrap();
        assert_eq!(lo.counts.len(), 8);
        assert_eq!(lo.edges.len(), 9);
        let mut v: Vec<f64> = n.data().iter().map(|&a| f64::from(a)).collect();
        v.sort_by(f64::total_cmp);
        let below = v.iter().filter(|&&a| a <= percentile(&v, 0.05)).count() as u64;
        assert_eq!(lo.counts.iter().sum::<u64>(), below);
        assert!(hi.counts.iter().sum::<u64>() >= 20);
        assert!(hi.to_csv().starts_with("bin_lo,bin_hi,count\n"));
        assert!(Histogram::new(&[1.0], 1.0, 1.0, 4).is_err());
    }

    #[test]
    fn hot_mask_threshold() {
        let y = RasterF32::new(1, 4, vec![0.0, 5.0, 9.0, 10.0]).unwrap();
        assert_eq!(hot_region_mask(&y, 0.5), vec![false, true, true, true]);
    }
}
