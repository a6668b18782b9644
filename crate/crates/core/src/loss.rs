//! Composite objective `MAE + λ·(1 − SSIM)` on denoised estimates.
//!
//! Batches are flat `f64` buffers of `n` slices, each `h`x`w` row-major.
//! SSIM is evaluated per slice and averaged; MAE averages over every pixel.

use crate::error::{ensure, Result};
use crate::metrics::{check_ssim_shape, ssim_f64, ssim_with_grad, SsimParams};
use crate::phantom::DEFAULT_SUV_CLIP_MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub ssim: SsimParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            ssim: SsimParams::new(DEFAULT_SUV_CLIP_MAX),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl BatchShape {
    pub fn len(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, pred: &[f64], target: &[f64]) -> Result<()> {
        ensure!(!self.is_empty(), "empty batch");
        ensure!(
            pred.len() == self.len() && target.len() == self.len(),
            "batch buffers ({} / {}) do not match shape {}x{}x{}",
            pred.len(),
            target.len(),
            self.n,
            self.h,
            self.w
        );
        Ok(())
    }
}

/// Loss value, its parts, and the gradient w.r.t. the prediction.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: f64,
    pub mae: f64,
    pub ssim_loss: f64,
    pub grad: Vec<f64>,
}

pub fn mae_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    ensure!(
        pred.len() == target.len() && !pred.is_empty(),
        "MAE: shape mismatch ({} vs {})",
        pred.len(),
        target.len()
    );
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

pub fn ssim_loss(pred: &[f64], target: &[f64], shape: BatchShape, p: &SsimParams) -> Result<f64> {
    shape.check(pred, target)?;
    check_ssim_shape(shape.h, shape.w, p)?;
    let px = shape.h * shape.w;
    let mut acc = 0.0;
    for (a, b) in pred.chunks_exact(px).zip(target.chunks_exact(px)) {
        acc += 1.0 - ssim_f64(a, b, shape.h, shape.w, p)?;
    }
    Ok(acc / shape.n as f64)
}

/// `mae + λ·ssim_loss` with its gradient. The MAE subgradient at zero is 0.
pub fn total_loss(pred: &[f64], target: &[f64], shape: BatchShape, cfg: &LossConfig) -> Result<LossTerms> {
    shape.check(pred, target)?;
    ensure!(cfg.lambda >= 0.0, "loss lambda must be nonnegative");
    let count = shape.len() as f64;
    let mut grad: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                1.0 / count
            } else if d < 0.0 {
                -1.0 / count
            } else {
                0.0
            }
        })
        .collect();
    let mae = mae_loss(pred, target)?;

    let mut ssim_part = 0.0;
    if cfg.lambda > 0.0 {
        check_ssim_shape(shape.h, shape.w, &cfg.ssim)?;
        let px = shape.h * shape.w;
        let scale = cfg.lambda / shape.n as f64;
        for (i, (a, b)) in pred.chunks_exact(px).zip(target.chunks_exact(px)).enumerate() {
            let (s, g) = ssim_with_grad(a, b, shape.h, shape.w, &cfg.ssim)?;
            ssim_part += 1.0 - s;
            for (dst, gs) in grad[i * px..(i + 1) * px].iter_mut().zip(g) {
                *dst -= scale * gs;
            }
        }
        ssim_part /= shape.n as f64;
    }
    Ok(LossTerms {
        total: mae + cfg.lambda * ssim_part,
        mae,
        ssim_loss: ssim_part,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ssim;
    use crate::rasterio::RasterF32;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ONE: BatchShape = BatchShape { n: 1, h: 16, w: 16 };

    #[test]
    fn mae_cases() {
        let t = vec![1.0; 8];
        assert_eq!(mae_loss(&t, &t).unwrap(), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v + 0.5).collect();
        assert_eq!(mae_loss(&shifted, &t).unwrap(), 0.5);
        assert_eq!(mae_loss(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(mae_loss(&[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn ssim_loss_constant_pair() {
        let a = vec![1.0; 256];
        let b = vec![2.0; 256];
        let v = ssim_loss(&a, &b, ONE, &SsimParams::new(16.0)).unwrap();
        assert!((v - 0.198_981_2).abs() < 1e-6, "{v}");
        assert_eq!(ssim_loss(&a, &a, ONE, &SsimParams::new(16.0)).unwrap(), 0.0);
    }

    #[test]
    fn ssim_loss_agrees_with_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SsimParams::new(16.0);
        for _ in 0..5 {
            let a = RasterF32::from_fn(16, 16, |_, _| rng.random_range(0.0..16.0)).unwrap();
            let b = RasterF32::from_fn(16, 16, |_, _| rng.random_range(0.0..16.0)).unwrap();
            let af: Vec<f64> = a.data().iter().map(|&v| v.into()).collect();
            let bf: Vec<f64> = b.data().iter().map(|&v| v.into()).collect();
            let l = ssim_loss(&af, &bf, ONE, &p).unwrap();
            assert!((l - (1.0 - ssim(&a, &b, &p).unwrap())).abs() < 1e-6);
        }
    }

    #[test]
    fn total_loss_cases() {
        let cfg = LossConfig {
            lambda: 0.5,
            ssim: SsimParams::new(16.0),
        };
        let a = vec![1.0; 256];
        let b = vec![2.0; 256];
        let t = total_loss(&a, &b, ONE, &cfg).unwrap();
        assert!((t.total - 1.099_490_6).abs() < 1e-6, "{}", t.total);
        assert_eq!(total_loss(&a, &a, ONE, &cfg).unwrap().total, 0.0);

        let mae_only = LossConfig { lambda: 0.0, ..cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..4.0)).collect();
        assert_eq!(
            total_loss(&p, &b, ONE, &mae_only).unwrap().total,
            mae_loss(&p, &b).unwrap()
        );
    }

    #[test]
    fn batch_loss_averages_slices() {
        let cfg = LossConfig::default();
        let shape = BatchShape { n: 2, h: 16, w: 16 };
        let mut pred = vec![1.0; 256];
        pred.extend(vec![3.0; 256]);
        let target = vec![2.0; 512];
        let t = total_loss(&pred, &target, shape, &cfg).unwrap();
        let s1 = ssim_loss(&pred[..256], &target[..256], ONE, &cfg.ssim).unwrap();
        let s2 = ssim_loss(&pred[256..], &target[256..], ONE, &cfg.ssim).unwrap();
        assert!((t.ssim_loss - (s1 + s2) / 2.0).abs() < 1e-12);
        assert_eq!(t.mae, 1.0);
    }
}
