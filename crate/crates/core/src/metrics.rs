//! PSNR, SSIM and RMSE. SSIM also exposes its gradient for the training loss.

use crate::error::{ensure, Result};
use crate::rasterio::RasterF32;

/// Per-(subject, dose, method) scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub subject_id: String,
    pub dose_fraction: f64,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    Uniform { size: usize },
    Gaussian { size: usize, sigma: f64 },
}

impl Window {
    pub fn size(&self) -> usize {
        match *self {
            Window::Uniform { size } | Window::Gaussian { size, .. } => size,
        }
    }

    /// Normalized 1-D taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        match *self {
            Window::Uniform { size } => vec![1.0 / size as f64; size],
            Window::Gaussian { size, sigma } => {
                let c = (size as f64 - 1.0) / 2.0;
                let raw: Vec<f64> = (0..size)
                    .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / total).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: Window,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` in SUV.
    pub dynamic_range: f64,
}

impl SsimParams {
    pub fn new(dynamic_range: f64) -> Self {
        Self {
            window: Window::Uniform { size: 11 },
            k1: 0.01,
            k2: 0.03,
            dynamic_range,
        }
    }

    pub fn gaussian(dynamic_range: f64) -> Self {
        Self {
            window: Window::Gaussian { size: 11, sigma: 1.5 },
            ..Self::new(dynamic_range)
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.k1 > 0.0 && self.k2 > 0.0, "SSIM constants must be positive");
        ensure!(self.dynamic_range > 0.0, "SSIM dynamic range must be positive");
        let size = self.window.size();
        ensure!(size % 2 == 1, "SSIM window must be odd-sized, got {size}");
        if let Window::Gaussian { sigma, .. } = self.window {
            ensure!(sigma > 0.0, "Gaussian window sigma must be positive");
        }
        Ok(())
    }
}

pub fn rmse(a: &RasterF32, b: &RasterF32) -> Result<f64> {
    a.ensure_same_shape(b, "rmse")?;
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2))
        .sum();
    Ok((sq / a.len() as f64).sqrt())
}

/// `20·log10(L / rmse)`; `f64::INFINITY` when the images are identical.
pub fn psnr(reference: &RasterF32, estimate: &RasterF32, dynamic_range: f64) -> Result<f64> {
    ensure!(dynamic_range > 0.0, "PSNR dynamic range must be positive");
    let e = rmse(reference, estimate)?;
    Ok(if e == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (dynamic_range / e).log10()
    })
}

pub fn ssim(a: &RasterF32, b: &RasterF32, p: &SsimParams) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let a64: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
    let b64: Vec<f64> = b.data().iter().map(|&v| f64::from(v)).collect();
    ssim_f64(&a64, &b64, a.height(), a.width(), p)
}

pub(crate) fn check_ssim_shape(h: usize, w: usize, p: &SsimParams) -> Result<()> {
    p.validate()?;
    let k = p.window.size();
    ensure!(h >= k && w >= k, "image {h}x{w} is smaller than the {k}x{k} SSIM window");
    Ok(())
}

/// Mean SSIM over all valid window positions (no padding).
pub fn ssim_f64(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> Result<f64> {
    check_ssim_shape(h, w, p)?;
    let stats = LocalStats::compute(a, b, h, w, p);
    let (c1, c2) = (p.c1(), p.c2());
    let total: f64 = (0..stats.len())
        .map(|i| stats.index(i, c1, c2).value)
        .sum();
    Ok(total / stats.len() as f64)
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> Result<(f64, Vec<f64>)> {
    check_ssim_shape(h, w, p)?;
    let stats = LocalStats::compute(a, b, h, w, p);
    let (c1, c2) = (p.c1(), p.c2());
    let n = stats.len() as f64;
    let mut value = 0.0;
    let mut g_mu = vec![0.0; stats.len()];
    let mut g_aa = vec![0.0; stats.len()];
    let mut g_ab = vec![0.0; stats.len()];
    for i in 0..stats.len() {
        let s = stats.index(i, c1, c2);
        value += s.value;
        g_mu[i] = s.d_mu_a / n;
        g_aa[i] = s.d_e_aa / n;
        g_ab[i] = s.d_e_ab / n;
    }
    let taps = p.window.taps();
    let back_mu = valid_filter_adjoint(&g_mu, h, w, &taps);
    let back_aa = valid_filter_adjoint(&g_aa, h, w, &taps);
    let back_ab = valid_filter_adjoint(&g_ab, h, w, &taps);
    let grad = (0..h * w)
        .map(|q| back_mu[q] + 2.0 * a[q] * back_aa[q] + b[q] * back_ab[q])
        .collect();
    Ok((value / n, grad))
}

/// Window moments at every valid position.
struct LocalStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

/// SSIM at one position plus its partials w.r.t. the raw moments
/// `mu_a`, `E[a²]` and `E[ab]` (everything else is constant in `a`).
struct LocalSsim {
    value: f64,
    d_mu_a: f64,
    d_e_aa: f64,
    d_e_ab: f64,
}

impl LocalStats {
    fn compute(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> Self {
        let taps = p.window.taps();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        Self {
            mu_a: valid_filter(a, h, w, &taps),
            mu_b: valid_filter(b, h, w, &taps),
            e_aa: valid_filter(&aa, h, w, &taps),
            e_bb: valid_filter(&bb, h, w, &taps),
            e_ab: valid_filter(&ab, h, w, &taps),
        }
    }

    fn len(&self) -> usize {
        self.mu_a.len()
    }

    fn index(&self, i: usize, c1: f64, c2: f64) -> LocalSsim {
        let (ma, mb) = (self.mu_a[i], self.mu_b[i]);
        let var_a = self.e_aa[i] - ma * ma;
        let var_b = self.e_bb[i] - mb * mb;
        let cov = self.e_ab[i] - ma * mb;
        let a1 = 2.0 * ma * mb + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = var_a + var_b + c2;
        let value = (a1 * a2) / (b1 * b2);
        LocalSsim {
            value,
            d_mu_a: value * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2),
            d_e_aa: -value / b2,
            d_e_ab: 2.0 * value / a2,
        }
    }
}

/// Separable correlation keeping only positions where the window fits.
fn valid_filter(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &img[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = src[c..c + k].iter().zip(taps).map(|(v, t)| v * t).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (j, t) in taps.iter().enumerate() {
            let src = &rows[(r + j) * ow..(r + j + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Transpose of [`valid_filter`]: scatters a valid-sized map back to `h`x`w`.
fn valid_filter_adjoint(g: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..oh {
        for (j, t) in taps.iter().enumerate() {
            let dst = &mut rows[(r + j) * ow..(r + j + 1) * ow];
            for (d, v) in dst.iter_mut().zip(&g[r * ow..(r + 1) * ow]) {
                *d += t * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let dst = &mut out[r * w..(r + 1) * w];
        for c in 0..ow {
            let v = rows[r * ow + c];
            for (d, t) in dst[c..c + k].iter_mut().zip(taps) {
                *d += t * v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raster(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RasterF32 {
        RasterF32::from_fn(h, w, |_, _| rng.random_range(0.0..16.0)).unwrap()
    }

    #[test]
    fn rmse_cases() {
        let z = RasterF32::zeros(2, 2);
        assert_eq!(rmse(&z, &z).unwrap(), 0.0);
        assert_eq!(rmse(&z, &RasterF32::filled(2, 2, 1.0)).unwrap(), 1.0);
        let b = RasterF32::new(2, 2, vec![0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(rmse(&z, &b).unwrap(), 1.0);
        assert!(rmse(&z, &RasterF32::zeros(2, 3)).is_err());
    }

    #[test]
    fn psnr_cases() {
        let z = RasterF32::zeros(4, 4);
        assert_eq!(psnr(&z, &z, 16.0).unwrap(), f64::INFINITY);
        let one = RasterF32::filled(4, 4, 1.0);
        assert!((psnr(&z, &one, 16.0).unwrap() - 24.082_399_653_118_5).abs() < 1e-9);
        let sixteen = RasterF32::filled(4, 4, 16.0);
        assert!(psnr(&z, &sixteen, 16.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = RasterF32::filled(16, 16, 1.0);
        let b = RasterF32::filled(16, 16, 2.0);
        let v = ssim(&a, &b, &SsimParams::new(16.0)).unwrap();
        assert!((v - 4.0256 / 5.0256).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for params in [SsimParams::new(16.0), SsimParams::gaussian(16.0)] {
            let a = random_raster(&mut rng, 24, 20);
            let b = random_raster(&mut rng, 24, 20);
            assert!((ssim(&a, &a, &params).unwrap() - 1.0).abs() < 1e-12);
            let ab = ssim(&a, &b, &params).unwrap();
            let ba = ssim(&b, &a, &params).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab.abs() <= 1.0);
        }
    }

    #[test]
    fn ssim_rejects_small_images_and_bad_params() {
        let a = RasterF32::zeros(10, 30);
        assert!(ssim(&a, &a, &SsimParams::new(16.0)).is_err());
        let mut p = SsimParams::new(16.0);
        p.window = Window::Uniform { size: 10 };
        let big = RasterF32::zeros(16, 16);
        assert!(ssim(&big, &big, &p).is_err());
        assert!(ssim(&big, &big, &SsimParams::new(0.0)).is_err());
    }

    #[test]
    fn adjoint_matches_transpose() {
        // <F x, g> == <x, F^T g>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w) = (14, 17);
        let taps = Window::Gaussian { size: 5, sigma: 1.2 }.taps();
        let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..(h - 4) * (w - 4)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fx = valid_filter(&x, h, w, &taps);
        let ftg = valid_filter_adjoint(&g, h, w, &taps);
        let lhs: f64 = fx.iter().zip(&g).map(|(p, q)| p * q).sum();
        let rhs: f64 = x.iter().zip(&ftg).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
