//! Scalar model of the averaging effect.
//!
//! Clean values `y` are observed as `x = y + σ_j·ε` under one of several
//! noise scales ("doses"). A predictor trained on the pooled pairs converges,
//! per bin of `x`, to the optimum of the pooled loss, while a dose-aware
//! predictor reaches the optimum of each dose separately. When the
//! conditional laws `p(y | x, j)` differ across doses, the pooled optimum
//! sits between the per-dose optima and [`averaging_gap`] measures how far.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result};
use crate::rng::stream;

pub const MIN_SAMPLES: usize = 10_000;
pub const DEFAULT_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyProblem {
    pub clean_values: Vec<f64>,
    pub noise_scales: Vec<f64>,
    pub loss: LossKind,
    pub n_samples: usize,
    pub seed: u64,
}

impl ToyProblem {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.clean_values.is_empty(), "toy problem needs clean values");
        ensure!(
            self.clean_values.iter().all(|v| v.is_finite()),
            "clean values must be finite"
        );
        ensure!(self.noise_scales.len() >= 2, "toy problem needs at least two noise scales");
        ensure!(
            self.noise_scales.iter().all(|s| *s > 0.0 && s.is_finite()),
            "noise scales must be positive"
        );
        ensure!(
            self.n_samples >= MIN_SAMPLES,
            "n_samples must be at least {MIN_SAMPLES}, got {}",
            self.n_samples
        );
        Ok(())
    }

    /// Draws `(x, y, dose index)` triples; clean values and doses are uniform.
    pub fn sample(&self) -> Result<ToySamples> {
        self.validate()?;
        let mut rng = stream(self.seed, "toy");
        let mut s = ToySamples {
            x: Vec::with_capacity(self.n_samples),
            y: Vec::with_capacity(self.n_samples),
            dose: Vec::with_capacity(self.n_samples),
        };
        for _ in 0..self.n_samples {
            let y = self.clean_values[rng.random_range(0..self.clean_values.len())];
            let j = rng.random_range(0..self.noise_scales.len());
            let e: f64 = StandardNormal.sample(&mut rng);
            s.x.push(y + self.noise_scales[j] * e);
            s.y.push(y);
            s.dose.push(j);
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySamples {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub dose: Vec<usize>,
}

/// Splits sample indices into `bins` groups of consecutive `x`, as equal in
/// size as possible.
pub fn equal_mass_bins(x: &[f64], bins: usize) -> Result<Vec<Vec<usize>>> {
    ensure!(bins >= 1, "need at least one bin");
    ensure!(x.len() >= bins, "{} samples cannot fill {bins} bins", x.len());
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    Ok((0..bins)
        .map(|b| order[b * x.len() / bins..(b + 1) * x.len() / bins].to_vec())
        .collect())
}

/// Sign of `L(a) − L(b)` accumulated term by term, so that comparisons stay
/// exact near the minimum where both totals agree to many digits.
fn loss_difference(loss: LossKind, a: f64, b: f64, ys: &[f64]) -> f64 {
    match loss {
        LossKind::Mse => {
            let s: f64 = ys.iter().map(|y| a + b - 2.0 * y).sum();
            (a - b) * s
        }
        LossKind::Mae => ys.iter().map(|y| (a - y).abs() - (b - y).abs()).sum(),
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Minimizer of the empirical loss over `ys` by golden-section search on
/// `[min ys, max ys]`.
pub fn empirical_optimum(ys: &[f64], loss: LossKind) -> Result<f64> {
    ensure!(!ys.is_empty(), "empty bin");
    ensure!(ys.iter().all(|y| y.is_finite()), "bin contains non-finite values");
    let (mut lo, mut hi) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| (l.min(y), h.max(y)));
    let tol = 1e-13 * lo.abs().max(hi.abs()).max(1.0);
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    while hi - lo > tol {
        if loss_difference(loss, c, d, ys) < 0.0 {
            hi = d;
            d = c;
            c = hi - INV_PHI * (hi - lo);
        } else {
            lo = c;
            c = d;
            d = lo + INV_PHI * (hi - lo);
        }
        if c >= d {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-bin optima: pooled over doses and conditioned on each dose.
#[derive(Debug, Clone, PartialEq)]
pub struct BinOptima {
    pub x_lo: f64,
    pub x_hi: f64,
    pub count: usize,
    pub mixed: f64,
    /// `None` where a dose has fewer than two samples in the bin.
    pub per_dose: Vec<Option<f64>>,
    pub per_dose_count: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// Mean over (bin, dose) cells of |pooled optimum − dose optimum|.
    pub gap: f64,
    /// Mean over cells of the standard error of that difference when all
    /// doses share one conditional law.
    pub standard_error: f64,
    pub cells: usize,
    pub bins: Vec<BinOptima>,
}

impl GapReport {
    /// `gap / standard_error`.
    pub fn z(&self) -> f64 {
        self.gap / self.standard_error
    }
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn averaging_gap(tp: &ToyProblem) -> Result<GapReport> {
    averaging_gap_binned(tp, DEFAULT_BINS)
}

pub fn averaging_gap_binned(tp: &ToyProblem, bins: usize) -> Result<GapReport> {
    let s = tp.sample()?;
    let groups = equal_mass_bins(&s.x, bins)?;
    let doses = tp.noise_scales.len();
    // a median's standard error exceeds the mean's by √(π/2) under normality
    let se_factor = match tp.loss {
        LossKind::Mse => 1.0,
        LossKind::Mae => (std::f64::consts::PI / 2.0).sqrt(),
    };
    let (mut gap_sum, mut se_sum, mut cells) = (0.0, 0.0, 0usize);
    let mut out = Vec::with_capacity(groups.len());
    for idx in groups {
        let ys: Vec<f64> = idx.iter().map(|&i| s.y[i]).collect();
        let mixed = empirical_optimum(&ys, tp.loss)?;
        let spread = sample_std(&ys);
        let mut per_dose = Vec::with_capacity(doses);
        let mut per_dose_count = Vec::with_capacity(doses);
        for j in 0..doses {
            let yj: Vec<f64> = idx.iter().filter(|&&i| s.dose[i] == j).map(|&i| s.y[i]).collect();
            per_dose_count.push(yj.len());
            if yj.len() < 2 {
                per_dose.push(None);
                continue;
            }
            let opt = empirical_optimum(&yj, tp.loss)?;
            gap_sum += (mixed - opt).abs();
            se_sum += se_factor * spread * (1.0 / yj.len() as f64 - 1.0 / ys.len() as f64).max(0.0).sqrt();
            cells += 1;
            per_dose.push(Some(opt));
        }
        out.push(BinOptima {
            x_lo: s.x[idx[0]],
            x_hi: s.x[idx[idx.len() - 1]],
            count: idx.len(),
            mixed,
            per_dose,
            per_dose_count,
        });
    }
    ensure!(cells > 0, "no bin holds two samples of any dose");
    let standard_error = se_sum / cells as f64;
    Ok(GapReport {
        gap: gap_sum / cells as f64,
        // a degenerate clean prior leaves no spread; keep the ratio finite
        standard_error: if standard_error > 0.0 { standard_error } else { f64::MIN_POSITIVE },
        cells,
        bins: out,
    })
}

pub const GAP_HEADER: &str = "bin,x_lo,x_hi,count,dose_index,noise_scale,dose_count,mixed_optimum,dose_optimum";

pub fn gap_csv(tp: &ToyProblem, report: &GapReport) -> String {
    let mut out = format!("{GAP_HEADER}\n");
    for (b, bin) in report.bins.iter().enumerate() {
        for (j, opt) in bin.per_dose.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                b,
                bin.x_lo,
                bin.x_hi,
                bin.count,
                j,
                tp.noise_scales[j],
                bin.per_dose_count[j],
                bin.mixed,
                opt.map_or(String::new(), |v| v.to_string())
            ));
        }
    }
    out
}

/// The standard two-scale problem: eight evenly spaced clean levels and noise
/// scales `base` and `base·ratio`.
pub fn two_scale_problem(ratio: f64, loss: LossKind, n_samples: usize, seed: u64) -> ToyProblem {
    let base = 0.2;
    ToyProblem {
        clean_values: (0..8).map(|i| f64::from(i) * 0.5).collect(),
        noise_scales: vec![base, base * ratio],
        loss,
        n_samples,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_draws(n: usize, mean: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                mean + sd * e
            })
            .collect()
    }

    #[test]
    fn validation() {
        let ok = two_scale_problem(10.0, LossKind::Mse, MIN_SAMPLES, 0);
        assert!(ok.validate().is_ok());
        assert!(ToyProblem { n_samples: 100, ..ok.clone() }.validate().is_err());
        assert!(ToyProblem { noise_scales: vec![1.0], ..ok.clone() }.validate().is_err());
        assert!(ToyProblem { noise_scales: vec![1.0, 0.0], ..ok.clone() }.validate().is_err());
        assert!(ToyProblem { clean_values: vec![], ..ok }.validate().is_err());
        assert!(empirical_optimum(&[], LossKind::Mse).is_err());
    }

    #[test]
    fn mse_optimum_is_the_sample_mean() {
        for seed in 0..5 {
            let ys = normal_draws(5000, 3.0, 2.0, seed);
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            let opt = empirical_optimum(&ys, LossKind::Mse).unwrap();
            assert!((opt - mean).abs() < 1e-9, "{opt} vs {mean}");
        }
    }

    #[test]
    fn mae_optimum_is_a_sample_median() {
        for (seed, n) in [(0, 5001), (1, 5000), (2, 17)] {
            let mut ys = normal_draws(n, -1.0, 0.5, seed);
            let opt = empirical_optimum(&ys, LossKind::Mae).unwrap();
            ys.sort_by(f64::total_cmp);
            let (lo, hi) = if n % 2 == 1 {
                (ys[n / 2], ys[n / 2])
            } else {
                (ys[n / 2 - 1], ys[n / 2])
            };
            let spacing = ys.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
            assert!(opt >= lo - spacing && opt <= hi + spacing, "{opt} not near [{lo}, {hi}]");
        }
    }

    #[test]
    fn unbiased_noise_recovers_clean_value() {
        let n = 20_000;
        let ys = normal_draws(n, 2.5, 1.0, 9);
        let se = 1.0 / (n as f64).sqrt();
        assert!((empirical_optimum(&ys, LossKind::Mse).unwrap() - 2.5).abs() < 3.0 * se);
        assert!((empirical_optimum(&ys, LossKind::Mae).unwrap() - 2.5).abs() < 3.0 * 1.2533 * se);
    }

    #[test]
    fn median_differs_from_mean_on_skewed_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        // exponential(1): mean 1, median ln 2
        let ys: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let mean = empirical_optimum(&ys, LossKind::Mse).unwrap();
        let median = empirical_optimum(&ys, LossKind::Mae).unwrap();
        let se = 1.0 / (n as f64).sqrt();
        assert!((mean - median).abs() > 3.0 * se);
        assert!((median - std::f64::consts::LN_2).abs() < 0.03);
    }

    #[test]
    fn pooled_optimum_lies_between_dose_optima() {
        let tp = two_scale_problem(10.0, LossKind::Mse, 40_000, 3);
        let r = averaging_gap(&tp).unwrap();
        let mut strict = 0;
        for bin in &r.bins {
            if let [Some(a), Some(b)] = bin.per_dose[..] {
                let (lo, hi) = (a.min(b), a.max(b));
                assert!(bin.mixed >= lo - 1e-12 && bin.mixed <= hi + 1e-12);
                strict += usize::from(bin.mixed > lo && bin.mixed < hi);
            }
        }
        assert!(strict > 0);
    }

    #[test]
    fn gap_separates_heterogeneous_from_identical_scales() {
        let het = averaging_gap(&two_scale_problem(10.0, LossKind::Mse, 40_000, 1)).unwrap();
        assert!(het.z() > 5.0, "z = {}", het.z());
        let same = averaging_gap(&two_scale_problem(1.0, LossKind::Mse, 40_000, 1)).unwrap();
        assert!(same.z() < 3.0, "z = {}", same.z());
        let same_mae = averaging_gap(&two_scale_problem(1.0, LossKind::Mae, 40_000, 1)).unwrap();
        assert!(same_mae.z() < 3.0, "z = {}", same_mae.z());
    }

    #[test]
    fn gap_shrinks_as_scales_converge() {
        let gaps: Vec<f64> = [10.0, 4.0, 1.5]
            .iter()
            .map(|&r| averaging_gap(&two_scale_problem(r, LossKind::Mse, 40_000, 2)).unwrap().gap)
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn gap_is_shift_invariant() {
        let tp = two_scale_problem(5.0, LossKind::Mse, 20_000, 6);
        let shifted = ToyProblem {
            clean_values: tp.clean_values.iter().map(|v| v + 0.75).collect(),
            ..tp.clone()
        };
        let (a, b) = (averaging_gap(&tp).unwrap(), averaging_gap(&shifted).unwrap());
        assert!((a.gap - b.gap).abs() < 1e-9, "{} vs {}", a.gap, b.gap);
        assert_eq!(a.cells, b.cells);
    }

    #[test]
    fn bins_have_equal_mass() {
        let x: Vec<f64> = (0..100).rev().map(f64::from).collect();
        let b = equal_mass_bins(&x, 32).unwrap();
        assert_eq!(b.len(), 32);
        assert!(b.iter().all(|g| g.len() == 3 || g.len() == 4));
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 100);
        assert!(b.windows(2).all(|w| x[*w[0].last().unwrap()] < x[w[1][0]]));
        let r = averaging_gap(&two_scale_problem(3.0, LossKind::Mae, MIN_SAMPLES, 0)).unwrap();
        assert!(gap_csv(&two_scale_problem(3.0, LossKind::Mae, MIN_SAMPLES, 0), &r).lines().count() == 1 + 64);
    }
}
