//! Minimal CPU layers with hand-written backward passes.
//!
//! Activations use a channel-major `[C][N][H][W]` layout so that a whole batch
//! convolves with one GEMM and channel concatenation is a plain append.

use matrixmultiply::sgemm;

/// Activation tensor in `[C][N][H][W]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn from_data(c: usize, n: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "tensor data does not match its shape");
        Self { c, n, h, w, data }
    }

    /// Values per channel (`N·H·W`).
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Appends `other`'s channels after this tensor's.
    pub fn concat_channels(mut self, other: &Tensor) -> Tensor {
        assert_eq!((self.n, self.h, self.w), (other.n, other.h, other.w));
        self.data.extend_from_slice(&other.data);
        self.c += other.c;
        self
    }

    /// Splits into the first `c` channels and the rest.
    pub fn split_channels(mut self, c: usize) -> (Tensor, Tensor) {
        let rest = self.data.split_off(c * self.plane());
        let other = Tensor::from_data(self.c - c, self.n, self.h, self.w, rest);
        self.c = c;
        (self, other)
    }
}

/// Unfolds `k`x`k` neighbourhoods (zero padding `k/2`) into a
/// `(C·k·k) x (N·H·W)` matrix.
fn im2col(x: &Tensor, k: usize) -> Vec<f32> {
    let pad = (k / 2) as isize;
    let (h, w) = (x.h as isize, x.w as isize);
    let plane = x.plane();
    let mut col = vec![0.0f32; x.c * k * k * plane];
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w - dx).min(w).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for n in 0..x.n {
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let d0 = (n * x.h + y as usize) * x.w;
                        let s0 = (n * x.h + sy as usize) * x.w;
                        let sx_lo = (x_lo as isize + dx) as usize;
                        dst[d0 + x_lo..d0 + x_hi]
                            .copy_from_slice(&src[s0 + sx_lo..s0 + sx_lo + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input grid.
fn col2im(col: &[f32], c: usize, n: usize, h: usize, w: usize, k: usize) -> Tensor {
    let pad = (k / 2) as isize;
    let (hi, wi) = (h as isize, w as isize);
    let mut out = Tensor::zeros(c, n, h, w);
    let plane = out.plane();
    for ci in 0..c {
        let dst = &mut out.data[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (wi - dx).min(wi).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for b in 0..n {
                    for y in 0..hi {
                        let sy = y + dy;
                        if sy < 0 || sy >= hi {
                            continue;
                        }
                        let s0 = (b * h + y as usize) * w;
                        let d0 = (b * h + sy as usize) * w;
                        let dx_lo = (x_lo as isize + dx) as usize;
                        for (d, s) in dst[d0 + dx_lo..d0 + dx_lo + (x_hi - x_lo)]
                            .iter_mut()
                            .zip(&src[s0 + x_lo..s0 + x_hi])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `C = A·B` for row-major `A: m x k`, `B: k x n`.
fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square convolution with "same" zero padding, weights `[cout][cin][k][k]`.
pub fn conv2d_forward(x: &Tensor, weight: &[f32], bias: Option<&[f32]>, cout: usize, k: usize) -> Tensor {
    let kk = x.c * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight size");
    let plane = x.plane();
    let mut out = Tensor::zeros(cout, x.n, x.h, x.w);
    if k == 1 {
        matmul(cout, kk, plane, weight, &x.data, &mut out.data);
    } else {
        let col = im2col(x, k);
        matmul(cout, kk, plane, weight, &col, &mut out.data);
    }
    if let Some(b) = bias {
        for (co, bv) in b.iter().enumerate() {
            out.data[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn conv2d_backward(x: &Tensor, weight: &[f32], grad_out: &Tensor, k: usize, need_input_grad: bool) -> ConvGrads {
    let cout = grad_out.c;
    let kk = x.c * k * k;
    let plane = x.plane();
    let owned_col;
    let col: &[f32] = if k == 1 {
        &x.data
    } else {
        owned_col = im2col(x, k);
        &owned_col
    };

    // dW = dY · colᵀ
    let mut grad_w = vec![0.0f32; cout * kk];
    unsafe {
        sgemm(
            cout,
            plane,
            kk,
            1.0,
            grad_out.data.as_ptr(),
            plane as isize,
            1,
            col.as_ptr(),
            1,
            plane as isize,
            0.0,
            grad_w.as_mut_ptr(),
            kk as isize,
            1,
        );
    }
    let grad_b = (0..cout)
        .map(|co| grad_out.channel(co).iter().sum())
        .collect();

    let input = need_input_grad.then(|| {
        // dcol = Wᵀ · dY
        let mut grad_col = vec![0.0f32; kk * plane];
        unsafe {
            sgemm(
                kk,
                cout,
                plane,
                1.0,
                weight.as_ptr(),
                1,
                kk as isize,
                grad_out.data.as_ptr(),
                plane as isize,
                1,
                0.0,
                grad_col.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
        if k == 1 {
            Tensor::from_data(x.c, x.n, x.h, x.w, grad_col)
        } else {
            col2im(&grad_col, x.c, x.n, x.h, x.w, k)
        }
    });
    ConvGrads {
        input,
        weight: grad_w,
        bias: grad_b,
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

pub struct BatchNormCache {
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Training-mode batch norm over `N·H·W` per channel. Updates running
/// statistics (unbiased variance) in place.
pub fn batchnorm_forward_train(
    x: &mut Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
) -> BatchNormCache {
    let plane = x.plane();
    let m = plane as f64;
    let mut x_hat = vec![0.0f32; x.data.len()];
    let mut inv_std = vec![0.0f32; x.c];
    for c in 0..x.c {
        let v = &mut x.data[c * plane..(c + 1) * plane];
        let mean = v.iter().map(|&a| f64::from(a)).sum::<f64>() / m;
        let var = v.iter().map(|&a| (f64::from(a) - mean).powi(2)).sum::<f64>() / m;
        let istd = 1.0 / (var + f64::from(BN_EPS)).sqrt();
        inv_std[c] = istd as f32;
        let xh = &mut x_hat[c * plane..(c + 1) * plane];
        for (o, a) in xh.iter_mut().zip(v.iter_mut()) {
            *o = ((f64::from(*a) - mean) * istd) as f32;
            *a = gamma[c] * *o + beta[c];
        }
        let unbiased = if plane > 1 { var * m / (m - 1.0) } else { var };
        running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * mean as f32;
        running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * unbiased as f32;
    }
    BatchNormCache { x_hat, inv_std }
}

pub fn batchnorm_forward_eval(x: &mut Tensor, gamma: &[f32], beta: &[f32], running_mean: &[f32], running_var: &[f32]) {
    let plane = x.plane();
    for c in 0..x.c {
        let scale = gamma[c] / (running_var[c] + BN_EPS).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        x.data[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = *v * scale + shift);
    }
}

/// Returns `(d_input, d_gamma, d_beta)`; `grad` is overwritten with `d_input`.
pub fn batchnorm_backward(grad: &mut Tensor, cache: &BatchNormCache, gamma: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let plane = grad.plane();
    let m = plane as f64;
    let mut d_gamma = vec![0.0f32; grad.c];
    let mut d_beta = vec![0.0f32; grad.c];
    for c in 0..grad.c {
        let g = &mut grad.data[c * plane..(c + 1) * plane];
        let xh = &cache.x_hat[c * plane..(c + 1) * plane];
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for (gv, xv) in g.iter().zip(xh) {
            sum_g += f64::from(*gv);
            sum_gx += f64::from(*gv) * f64::from(*xv);
        }
        d_gamma[c] = sum_gx as f32;
        d_beta[c] = sum_g as f32;
        let k = f64::from(gamma[c]) * f64::from(cache.inv_std[c]) / m;
        for (gv, xv) in g.iter_mut().zip(xh) {
            *gv = (k * (m * f64::from(*gv) - sum_g - f64::from(*xv) * sum_gx)) as f32;
        }
    }
    (d_gamma, d_beta)
}

pub fn leaky_relu(v: f32, slope: f32) -> f32 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

/// Derivative with respect to the pre-activation; 1 at zero.
pub fn leaky_relu_grad(pre: f32, slope: f32) -> f32 {
    if pre >= 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn leaky_relu_inplace(x: &mut Tensor, slope: f32) {
    x.data.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
}

/// Backward through LeakyReLU given its output (sign is preserved for positive slopes).
pub fn leaky_relu_backward(grad: &mut Tensor, output: &Tensor, slope: f32) {
    for (g, o) in grad.data.iter_mut().zip(&output.data) {
        *g *= leaky_relu_grad(*o, slope);
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the argmax
/// offset (0..4) of every output cell.
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for cn in 0..x.c * x.n {
        let src = &x.data[cn * x.h * x.w..(cn + 1) * x.h * x.w];
        for r in 0..oh {
            for c in 0..ow {
                let base = 2 * r * x.w + 2 * c;
                let cands = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cands[i] > cands[best] {
                        best = i;
                    }
                }
                let o = cn * oh * ow + r * ow + c;
                out.data[o] = cands[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &Tensor, arg: &[u8], h: usize, w: usize) -> Tensor {
    let mut grad = Tensor::zeros(grad_out.c, grad_out.n, h, w);
    let (oh, ow) = (grad_out.h, grad_out.w);
    for cn in 0..grad_out.c * grad_out.n {
        for r in 0..oh {
            for c in 0..ow {
                let o = cn * oh * ow + r * ow + c;
                let a = arg[o] as usize;
                let (dr, dc) = (a / 2, a % 2);
                grad.data[cn * h * w + (2 * r + dr) * w + 2 * c + dc] += grad_out.data[o];
            }
        }
    }
    grad
}

pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, x.n, oh, ow);
    for cn in 0..x.c * x.n {
        for r in 0..oh {
            let src = &x.data[cn * x.h * x.w + (r / 2) * x.w..][..x.w];
            let dst = &mut out.data[cn * oh * ow + r * ow..][..ow];
            for (c, d) in dst.iter_mut().enumerate() {
                *d = src[c / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (h, w) = (grad_out.h / 2, grad_out.w / 2);
    let mut grad = Tensor::zeros(grad_out.c, grad_out.n, h, w);
    for cn in 0..grad_out.c * grad_out.n {
        for r in 0..grad_out.h {
            let src = &grad_out.data[cn * grad_out.h * grad_out.w + r * grad_out.w..][..grad_out.w];
            let dst = &mut grad.data[cn * h * w + (r / 2) * w..][..w];
            for (c, s) in src.iter().enumerate() {
                dst[c / 2] += s;
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, n: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * n * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_data(c, n, h, w, data)
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
    }

    // Direct nested-loop convolution used as an independent reference.
    fn conv_reference(x: &Tensor, weight: &[f32], cout: usize, k: usize) -> Tensor {
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(cout, x.n, x.h, x.w);
        for co in 0..cout {
            for n in 0..x.n {
                for r in 0..x.h {
                    for c in 0..x.w {
                        let mut acc = 0.0f64;
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sr = r as isize + ky as isize - pad;
                                    let sc = c as isize + kx as isize - pad;
                                    if sr < 0 || sc < 0 || sr >= x.h as isize || sc >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((ci * x.n + n) * x.h + sr as usize) * x.w + sc as usize];
                                    let wv = weight[((co * x.c + ci) * k + ky) * k + kx];
                                    acc += f64::from(xv) * f64::from(wv);
                                }
                            }
                        }
                        out.data[((co * x.n + n) * x.h + r) * x.w + c] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [1, 3] {
            let x = random_tensor(&mut rng, 3, 2, 5, 7);
            let w: Vec<f32> = (0..4 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv2d_forward(&x, &w, None, 4, k);
            let slow = conv_reference(&x, &w, 4, k);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    // <conv(x), g> is bilinear, so its gradients must satisfy the adjoint identities.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 2, 3, 6, 5);
        let w: Vec<f32> = (0..4 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = random_tensor(&mut rng, 4, 3, 6, 5);
        let y = conv2d_forward(&x, &w, None, 4, 3);
        let grads = conv2d_backward(&x, &w, &g, 3, true);
        let lhs = dot(&y.data, &g.data);
        assert!((lhs - dot(&x.data, &grads.input.unwrap().data)).abs() < 1e-3);
        assert!((lhs - dot(&w, &grads.weight)).abs() < 1e-3);
        let bias_grad: Vec<f32> = (0..4).map(|c| g.channel(c).iter().sum()).collect();
        assert_eq!(grads.bias, bias_grad);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 2, 2, 3, 3);
        let g = random_tensor(&mut rng, 2, 2, 3, 3);
        let gamma = [1.3f32, -0.7];
        let beta = [0.2f32, 0.1];
        let objective = |x: &Tensor| {
            let mut y = x.clone();
            let (mut rm, mut rv) = ([0.0; 2], [1.0; 2]);
            batchnorm_forward_train(&mut y, &gamma, &beta, &mut rm, &mut rv);
            dot(&y.data, &g.data)
        };
        let mut y = x.clone();
        let (mut rm, mut rv) = ([0.0; 2], [1.0; 2]);
        let cache = batchnorm_forward_train(&mut y, &gamma, &beta, &mut rm, &mut rv);
        let mut grad = g.clone();
        let (dg, db) = batchnorm_backward(&mut grad, &cache, &gamma);
        for i in [0, 5, 11, 17, 30] {
            let eps = 1e-2;
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * f64::from(eps));
            assert!((fd - f64::from(grad.data[i])).abs() < 2e-3, "i={i}: {fd} vs {}", grad.data[i]);
        }
        let d_beta: Vec<f32> = (0..2).map(|c| g.channel(c).iter().sum()).collect();
        for c in 0..2 {
            assert!((db[c] - d_beta[c]).abs() < 1e-5);
            let gx: f64 = cache.x_hat[c * 18..(c + 1) * 18]
                .iter()
                .zip(g.channel(c))
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum();
            assert!((f64::from(dg[c]) - gx).abs() < 1e-4);
        }
        assert!(rm.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, 2, 4, 6);
        let (p, arg) = maxpool2_forward(&x);
        assert_eq!((p.h, p.w), (2, 3));
        let g = random_tensor(&mut rng, 2, 2, 2, 3);
        let back = maxpool2_backward(&g, &arg, 4, 6);
        assert!((dot(&g.data, &g.data) - dot(&back.data, &back.data)).abs() < 1e-6);
        assert!(p.data.iter().all(|v| x.data.contains(v)));

        let u = upsample2_forward(&p);
        assert_eq!((u.h, u.w), (4, 6));
        let gu = random_tensor(&mut rng, 2, 2, 4, 6);
        let back = upsample2_backward(&gu);
        assert!((dot(&u.data, &gu.data) - dot(&p.data, &back.data)).abs() < 1e-4);
    }

    #[test]
    fn leaky_relu_head_values() {
        assert_eq!(leaky_relu(-1.0, 0.01), -0.01);
        assert_eq!(leaky_relu(2.0, 0.01), 2.0);
        assert_eq!(leaky_relu(0.0, 0.01), 0.0);
        assert_eq!(leaky_relu_grad(-3.0, 0.01), 0.01);
        assert_eq!(leaky_relu_grad(0.0, 0.01), 1.0);
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_tensor(&mut rng, 2, 2, 3, 3);
        let b = random_tensor(&mut rng, 3, 2, 3, 3);
        let (a2, b2) = a.clone().concat_channels(&b).split_channels(2);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
