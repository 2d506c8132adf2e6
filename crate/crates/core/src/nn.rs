//! Layers with hand-written backward passes.
//!
//! Every layer exposes a cache-free `forward` for inference and a
//! `forward_cached`/`backward` pair for training. Backward passes accumulate
//! into [`Param::grad`]; callers zero gradients between steps.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, gemm_tn_into, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Param::new(Tensor::from_vec(shape, data).expect("shape matches"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.numel());
        n
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(prefix, &mut |name, _| names.push(name.to_string()));
        names
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// Uniform init in `±sqrt(gain / fan_in)`, zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (gain / fan_in).sqrt();
        Conv2d {
            weight: Param::uniform(&[out_channels, in_channels, kernel, kernel], bound, rng),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        ensure!(x.shape().len() == 4, "conv input must be 4-d, got {:?}", x.shape());
        let (_, c, h, w) = x.dims4();
        ensure!(
            c == self.in_channels,
            "conv expects {} input channels, got {}",
            self.in_channels,
            c
        );
        ensure!(
            h + 2 * self.padding >= self.kernel && w + 2 * self.padding >= self.kernel,
            "input {}x{} smaller than kernel {}",
            h,
            w,
            self.kernel
        );
        Ok(())
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kj − pad` lies inside `[0, w)`.
    fn valid_range(&self, kj: usize, w: usize, ow: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = p.saturating_sub(kj).div_ceil(s);
        let hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, col: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n = oh * ow;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_range(kj, w, ow);
                    for oy in 0..oh {
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        let iy = oy * s + ki;
                        if iy < p || iy - p >= h {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[(iy - p) * w..(iy - p + 1) * w];
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        if s == 1 {
                            let x0 = lo + kj - p;
                            out[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (ox, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                                *o = src[ox * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, col: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n = oh * ow;
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &col[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_range(kj, w, ow);
                    for oy in 0..oh {
                        let iy = oy * s + ki;
                        if iy < p || iy - p >= h {
                            continue;
                        }
                        let dst = &mut plane[(iy - p) * w..(iy - p + 1) * w];
                        let g = &src[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            dst[ox * s + kj - p] += g[ox];
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor, keep_cols: bool) -> Result<(Tensor, Option<ConvCache>)> {
        self.check_input(x)?;
        let (b, c, h, w) = x.dims4();
        let (oh, ow) = self.output_hw(h, w);
        let kk = c * self.kernel * self.kernel;
        let n = oh * ow;
        let oc = self.out_channels;
        let mut out = Tensor::zeros(&[b, oc, oh, ow]);
        let mut cols = if keep_cols { vec![0.0; b * kk * n] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; kk * n] };
        let weight = self.weight.value.data();
        let bias = self.bias.value.data();
        for bi in 0..b {
            let xs = &x.data()[bi * c * h * w..(bi + 1) * c * h * w];
            let col: &mut [f64] = if keep_cols {
                &mut cols[bi * kk * n..(bi + 1) * kk * n]
            } else {
                &mut scratch
            };
            self.im2col(xs, c, h, w, oh, ow, col);
            let ys = &mut out.data_mut()[bi * oc * n..(bi + 1) * oc * n];
            for (o, &bv) in bias.iter().enumerate() {
                ys[o * n..(o + 1) * n].fill(bv);
            }
            gemm_nn(weight, col, ys, oc, kk, n);
        }
        let cache = keep_cols.then_some(ConvCache { cols, in_shape: (b, c, h, w), out_hw: (oh, ow) });
        Ok((out, cache))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let (y, cache) = self.run(x, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (b, c, h, w) = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let n = oh * ow;
        let kk = c * self.kernel * self.kernel;
        let oc = self.out_channels;
        assert_eq!(dy.shape(), &[b, oc, oh, ow], "conv backward shape mismatch");
        let mut dx = need_dx.then(|| Tensor::zeros(&[b, c, h, w]));
        let mut dcol = vec![0.0; kk * n];
        for bi in 0..b {
            let dys = &dy.data()[bi * oc * n..(bi + 1) * oc * n];
            let col = &cache.cols[bi * kk * n..(bi + 1) * kk * n];
            gemm_nt(dys, col, self.weight.grad.data_mut(), oc, n, kk);
            for (o, g) in self.bias.grad.data_mut().iter_mut().enumerate() {
                *g += dys[o * n..(o + 1) * n].iter().sum::<f64>();
            }
            if let Some(dx) = dx.as_mut() {
                gemm_tn_into(self.weight.value.data(), dys, &mut dcol, kk, oc, n);
                let dxs = &mut dx.data_mut()[bi * c * h * w..(bi + 1) * c * h * w];
                self.col2im(&dcol, c, h, w, oh, ow, dxs);
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::new(Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ensure!(
            x.shape().len() == 2 && x.shape()[1] == self.in_features,
            "linear expects (B, {}), got {:?}",
            self.in_features,
            x.shape()
        );
        let b = x.shape()[0];
        let mut y = Tensor::zeros(&[b, self.out_features]);
        for r in 0..b {
            y.data_mut()[r * self.out_features..(r + 1) * self.out_features]
                .copy_from_slice(self.bias.value.data());
        }
        gemm_nt(x.data(), self.weight.value.data(), y.data_mut(), b, self.in_features, self.out_features);
        Ok(y)
    }

    /// `x` is the forward input.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let b = x.shape()[0];
        let (i, o) = (self.in_features, self.out_features);
        gemm_tn(dy.data(), x.data(), self.weight.grad.data_mut(), o, b, i);
        for r in 0..b {
            for (g, d) in self.bias.grad.data_mut().iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[b, i]);
        gemm_nn(dy.data(), self.weight.value.data(), dx.data_mut(), b, o, i);
        dx
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    y.zip_map(dy, |yv, d| if yv > 0.0 { d } else { 0.0 })
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `(B, C, H, W) -> (B, C)`
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let hw = h * w;
    let data = x.data().chunks(hw).map(|plane| plane.iter().sum::<f64>() / hw as f64).collect();
    Tensor::from_vec(&[b, c], data).expect("pool shape")
}

pub fn global_avg_pool_backward(dy: &Tensor, in_shape: (usize, usize, usize, usize)) -> Tensor {
    let (b, c, h, w) = in_shape;
    let hw = h * w;
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        plane.fill(g / hw as f64);
    }
    dx
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_nearest(x: &Tensor, fh: usize, fw: usize) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let (oh, ow) = (h * fh, w * fw);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let src = x.data();
    for (plane, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = s[(y / fh) * w + xx / fw];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &Tensor, fh: usize, fw: usize) -> Tensor {
    let (b, c, oh, ow) = dy.dims4();
    let (h, w) = (oh / fh, ow / fw);
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    let src = dy.data();
    for (plane, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let s = &src[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / fh) * w + xx / fw] += s[y * ow + xx];
            }
        }
    }
    dx
}

/// Channel concatenation of two `(B, ·, H, W)` tensors.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shape mismatch");
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for bi in 0..n {
        data.extend_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    Tensor::from_vec(&[n, ca + cb, h, w], data).expect("concat shape")
}

pub fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let cb = c - ca;
    let hw = h * w;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for bi in 0..n {
        let s = &x.data()[bi * c * hw..(bi + 1) * c * hw];
        a.extend_from_slice(&s[..ca * hw]);
        b.extend_from_slice(&s[ca * hw..]);
    }
    (
        Tensor::from_vec(&[n, ca, h, w], a).expect("split shape"),
        Tensor::from_vec(&[n, cb, h, w], b).expect("split shape"),
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct convolution, independent of im2col.
    fn conv_direct(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (b, c, h, w) = x.dims4();
        let (oh, ow) = conv.output_hw(h, w);
        let k = conv.kernel;
        let mut out = Tensor::zeros(&[b, conv.out_channels, oh, ow]);
        for bi in 0..b {
            for o in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value.data()[o];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                        continue;
                                    }
                                    acc += conv.weight.value.data()[((o * c + ci) * k + ki) * k + kj]
                                        * x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * conv.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let mut conv = Conv2d::new(3, 4, k, s, p, 1.0, &mut rng);
            conv.bias = Param::uniform(&[4], 0.5, &mut rng);
            let x = random(&[2, 3, 6, 6], &mut rng);
            let fast = conv.forward(&x).unwrap();
            let slow = conv_direct(&conv, &x);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, 1.0, &mut rng);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let r = random(&[1, 3, 3, 3], &mut rng);
        let readout = |c: &Conv2d, x: &Tensor| -> f64 {
            c.forward(x).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv.forward_cached(&x).unwrap();
        let dx = conv.backward(&cache, &r, true).unwrap();
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (readout(&conv, &xp) - readout(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7);
        }
        for i in 0..conv.weight.value.numel() {
            let mut cp = conv.clone();
            cp.weight.value.data_mut()[i] += h;
            let mut cm = conv.clone();
            cm.weight.value.data_mut()[i] -= h;
            let fd = (readout(&cp, &x) - readout(&cm, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x = random(&[2, 4], &mut rng);
        let r = random(&[2, 3], &mut rng);
        let readout = |l: &Linear, x: &Tensor| -> f64 {
            l.forward(x).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let dx = lin.backward(&x, &r);
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (readout(&lin, &xp) - readout(&lin, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-8);
        }
        for i in 0..lin.weight.value.numel() {
            let mut lp = lin.clone();
            lp.weight.value.data_mut()[i] += h;
            let mut lm = lin.clone();
            lm.weight.value.data_mut()[i] -= h;
            let fd = (readout(&lp, &x) - readout(&lm, &x)) / (2.0 * h);
            assert!((fd - lin.weight.grad.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 2, 2, 3], &mut rng);
        let y = random(&[1, 2, 4, 6], &mut rng);
        let lhs: f64 = upsample_nearest(&x, 2, 2).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(upsample_nearest_backward(&y, 2, 2).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[2, 3, 2, 2], &mut rng);
        let b = random(&[2, 1, 2, 2], &mut rng);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
