//! Differentiable layers with explicit forward/backward pairs. Each layer
//! caches what its backward needs; backward accumulates parameter
//! gradients and returns the input gradient.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Param, Parameterized, Tensor};
use crate::{Error, Result};

/// DCGAN-style init: weights N(0, 0.02), biases zero.
const WEIGHT_STD: f32 = 0.02;

fn conv_out(size: usize, k: usize, s: usize, p: usize) -> usize {
    (size + 2 * p - k) / s + 1
}

/// Unfolds (c, h, w) into (c*k*k, ho*wo) patch columns.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Array2<f32> {
    let ho = conv_out(h, k, s, p);
    let wo = conv_out(w, k, s, p);
    let mut cols = Array2::<f32>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * wo + ox)] =
                            x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into (c, h, w).
fn col2im(cols: &Array2<f32>, c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Vec<f32> {
    let ho = conv_out(h, k, s, p);
    let wo = conv_out(w, k, s, p);
    let mut x = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oy in 0..ho {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci * h + iy as usize) * w + ix as usize] +=
                            cols[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    x
}

/// Strided 2D convolution, NCHW, square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Conv2d {
            name: name.to_string(),
            weight: Param::new(Tensor::randn([cout, cin, kernel, kernel], WEIGHT_STD, rng)),
            bias: Param::new(Tensor::zeros([cout, 1, 1, 1])),
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [n, cin, h, w] = x.shape;
        let [cout, wcin, k, _] = self.weight.value.shape;
        if cin != wcin {
            return Err(Error::Shape(format!(
                "{}: input has {cin} channels, weight expects {wcin}",
                self.name
            )));
        }
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return Err(Error::Shape(format!(
                "{}: {h}x{w} input smaller than {k}x{k} kernel",
                self.name
            )));
        }
        let ho = conv_out(h, k, self.stride, self.pad);
        let wo = conv_out(w, k, self.stride, self.pad);
        let w2 = ArrayView2::from_shape((cout, cin * k * k), &self.weight.value.data)
            .expect("contiguous weight");
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for i in 0..n {
            let cols = im2col(x.sample(i), cin, h, w, k, self.stride, self.pad);
            let y = w2.dot(&cols);
            let dst = out.sample_mut(i);
            for co in 0..cout {
                let b = self.bias.value.data[co];
                for l in 0..ho * wo {
                    dst[co * ho * wo + l] = y[(co, l)] + b;
                }
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dout: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| {
            Error::Shape(format!("{}: backward before forward", self.name))
        })?;
        let [n, cin, h, w] = x.shape;
        let [cout, _, k, _] = self.weight.value.shape;
        let [dn, dcout, ho, wo] = dout.shape;
        if dn != n || dcout != cout {
            return Err(Error::Shape(format!(
                "{}: gradient shape {:?} does not match output",
                self.name, dout.shape
            )));
        }
        let w2 = ArrayView2::from_shape((cout, cin * k * k), &self.weight.value.data)
            .expect("contiguous weight");
        let mut dw = Array2::<f32>::zeros((cout, cin * k * k));
        let mut dx = Tensor::zeros(x.shape);
        for i in 0..n {
            let cols = im2col(x.sample(i), cin, h, w, k, self.stride, self.pad);
            let g = ArrayView2::from_shape((cout, ho * wo), dout.sample(i))
                .expect("contiguous grad");
            dw = dw + g.dot(&cols.t());
            let dcols = w2.t().dot(&g);
            let dxi = col2im(&dcols, cin, h, w, k, self.stride, self.pad);
            dx.sample_mut(i).copy_from_slice(&dxi);
            for co in 0..cout {
                let mut s = 0.0;
                for l in 0..ho * wo {
                    s += g[(co, l)];
                }
                self.bias.grad.data[co] += s;
            }
        }
        for (slot, v) in self.weight.grad.data.iter_mut().zip(dw.iter()) {
            *slot += v;
        }
        Ok(dx)
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

/// Transposed convolution (fractionally strided), the upsampling mirror of
/// [`Conv2d`]: forward scatters patch columns, backward gathers them.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub name: String,
    /// Weight laid out (cin, cout, k, k), matching the convolution whose
    /// data-gradient this layer computes.
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvTranspose2d {
            name: name.to_string(),
            weight: Param::new(Tensor::randn([cin, cout, kernel, kernel], WEIGHT_STD, rng)),
            bias: Param::new(Tensor::zeros([cout, 1, 1, 1])),
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size - 1) * self.stride + self.kernel - 2 * self.pad
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [n, cin, h, w] = x.shape;
        let [wcin, cout, k, _] = self.weight.value.shape;
        if cin != wcin {
            return Err(Error::Shape(format!(
                "{}: input has {cin} channels, weight expects {wcin}",
                self.name
            )));
        }
        let ho = self.out_size(h);
        let wo = self.out_size(w);
        // The scatter geometry must invert cleanly or positions are lost.
        if conv_out(ho, k, self.stride, self.pad) != h
            || conv_out(wo, k, self.stride, self.pad) != w
        {
            return Err(Error::Shape(format!(
                "{}: {h}x{w} input is not a stride-consistent grid",
                self.name
            )));
        }
        let w2 = ArrayView2::from_shape((cin, cout * k * k), &self.weight.value.data)
            .expect("contiguous weight");
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for i in 0..n {
            let xi = ArrayView2::from_shape((cin, h * w), x.sample(i)).expect("contiguous");
            let cols = w2.t().dot(&xi);
            let y = col2im(&cols, cout, ho, wo, k, self.stride, self.pad);
            let dst = out.sample_mut(i);
            dst.copy_from_slice(&y);
            for co in 0..cout {
                let b = self.bias.value.data[co];
                for v in &mut dst[co * ho * wo..(co + 1) * ho * wo] {
                    *v += b;
                }
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dout: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| {
            Error::Shape(format!("{}: backward before forward", self.name))
        })?;
        let [n, cin, h, w] = x.shape;
        let [_, cout, k, _] = self.weight.value.shape;
        let [dn, dcout, ho, wo] = dout.shape;
        if dn != n || dcout != cout || ho != self.out_size(h) || wo != self.out_size(w) {
            return Err(Error::Shape(format!(
                "{}: gradient shape {:?} does not match output",
                self.name, dout.shape
            )));
        }
        let w2 = ArrayView2::from_shape((cin, cout * k * k), &self.weight.value.data)
            .expect("contiguous weight");
        let mut dw = Array2::<f32>::zeros((cin, cout * k * k));
        let mut dx = Tensor::zeros(x.shape);
        for i in 0..n {
            let dcols = im2col(dout.sample(i), cout, ho, wo, k, self.stride, self.pad);
            let xi = ArrayView2::from_shape((cin, h * w), x.sample(i)).expect("contiguous");
            dw = dw + xi.dot(&dcols.t());
            let dxi = w2.dot(&dcols);
            for (slot, v) in dx.sample_mut(i).iter_mut().zip(dxi.iter()) {
                *slot = *v;
            }
            let g = dout.sample(i);
            for co in 0..cout {
                let mut s = 0.0;
                for v in &g[co * ho * wo..(co + 1) * ho * wo] {
                    s += v;
                }
                self.bias.grad.data[co] += s;
            }
        }
        for (slot, v) in self.weight.grad.data.iter_mut().zip(dw.iter()) {
            *slot += v;
        }
        Ok(dx)
    }
}

impl Parameterized for ConvTranspose2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}

/// Per-channel batch normalization over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    pub momentum: f32,
    pub train: bool,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x: Tensor,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        let mut gamma = Tensor::zeros([channels, 1, 1, 1]);
        gamma.fill(1.0);
        let mut running_var = Tensor::zeros([channels, 1, 1, 1]);
        running_var.fill(1.0);
        BatchNorm2d {
            name: name.to_string(),
            gamma: Param::new(gamma),
            beta: Param::new(Tensor::zeros([channels, 1, 1, 1])),
            running_mean: Tensor::zeros([channels, 1, 1, 1]),
            running_var,
            eps: 1e-5,
            momentum: 0.1,
            train: true,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.shape;
        if c != self.gamma.value.data.len() {
            return Err(Error::Shape(format!(
                "{}: input has {c} channels, norm expects {}",
                self.name,
                self.gamma.value.data.len()
            )));
        }
        let m = (n * h * w) as f64;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        if self.train {
            // f64 accumulators: per-channel sums span the whole batch and
            // f32 accumulation noise leaks straight into the gradients.
            for ci in 0..c {
                let mut acc = 0.0f64;
                for i in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            acc += x.at(i, ci, hi, wi) as f64;
                        }
                    }
                }
                mean[ci] = (acc / m) as f32;
                let mut sq = 0.0f64;
                for i in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let d = x.at(i, ci, hi, wi) as f64 - mean[ci] as f64;
                            sq += d * d;
                        }
                    }
                }
                var[ci] = (sq / m) as f32;
            }
            for ci in 0..c {
                self.running_mean.data[ci] =
                    (1.0 - self.momentum) * self.running_mean.data[ci] + self.momentum * mean[ci];
                self.running_var.data[ci] =
                    (1.0 - self.momentum) * self.running_var.data[ci] + self.momentum * var[ci];
            }
        } else {
            mean.copy_from_slice(&self.running_mean.data);
            var.copy_from_slice(&self.running_var.data);
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = Tensor::zeros(x.shape);
        for i in 0..n {
            for ci in 0..c {
                let g = self.gamma.value.data[ci];
                let b = self.beta.value.data[ci];
                for hi in 0..h {
                    for wi in 0..w {
                        let xhat = (x.at(i, ci, hi, wi) - mean[ci]) * inv_std[ci];
                        *out.at_mut(i, ci, hi, wi) = g * xhat + b;
                    }
                }
            }
        }
        self.cache = Some(BnCache {
            x: x.clone(),
            mean,
            inv_std,
        });
        Ok(out)
    }

    pub fn backward(&mut self, dout: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::Shape(format!("{}: backward before forward", self.name))
        })?;
        let x = &cache.x;
        let [n, c, h, w] = x.shape;
        let m = (n * h * w) as f32;
        let mut dx = Tensor::zeros(x.shape);
        for ci in 0..c {
            let mean = cache.mean[ci];
            let inv_std = cache.inv_std[ci];
            let g = self.gamma.value.data[ci];
            let mut dy_acc = 0.0f64;
            let mut dy_xhat_acc = 0.0f64;
            for i in 0..n {
                for hi in 0..h {
                    for wi in 0..w {
                        let dy = dout.at(i, ci, hi, wi) as f64;
                        let xhat = ((x.at(i, ci, hi, wi) - mean) * inv_std) as f64;
                        dy_acc += dy;
                        dy_xhat_acc += dy * xhat;
                    }
                }
            }
            let sum_dy = dy_acc as f32;
            let sum_dy_xhat = dy_xhat_acc as f32;
            self.beta.grad.data[ci] += sum_dy;
            self.gamma.grad.data[ci] += sum_dy_xhat;
            if self.train {
                for i in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let dy = dout.at(i, ci, hi, wi);
                            let xhat = (x.at(i, ci, hi, wi) - mean) * inv_std;
                            *dx.at_mut(i, ci, hi, wi) = g * inv_std / m
                                * (m * dy - sum_dy - xhat * sum_dy_xhat);
                        }
                    }
                }
            } else {
                for i in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            *dx.at_mut(i, ci, hi, wi) = g * inv_std * dout.at(i, ci, hi, wi);
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

impl Parameterized for BatchNorm2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{}.running_mean", self.name), &mut self.running_mean);
        f(&format!("{}.running_var", self.name), &mut self.running_var);
    }
}

/// max(x, slope*x); slope 0 is plain ReLU.
#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f32,
    cache: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        LeakyRelu { slope, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v *= self.slope;
            }
        }
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dout: &Tensor) -> Tensor {
        let x = self.cache.as_ref().expect("backward before forward");
        let mut dx = dout.clone();
        for (d, &v) in dx.data.iter_mut().zip(&x.data) {
            if v < 0.0 {
                *d *= self.slope;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tanh {
    cache: Option<Tensor>,
}

impl Tanh {
    pub fn new() -> Self {
        Tanh { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        self.cache = Some(out.clone());
        out
    }

    pub fn backward(&mut self, dout: &Tensor) -> Tensor {
        let y = self.cache.as_ref().expect("backward before forward");
        let mut dx = dout.clone();
        for (d, &v) in dx.data.iter_mut().zip(&y.data) {
            *d *= 1.0 - v * v;
        }
        dx
    }
}

/// Fully connected layer on flattened (N, F, 1, 1) tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(name: &str, features: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            name: name.to_string(),
            weight: Param::new(Tensor::randn([out, features, 1, 1], WEIGHT_STD, rng)),
            bias: Param::new(Tensor::zeros([out, 1, 1, 1])),
            cache: None,
        }
    }

    /// Flattens (N, C, H, W) to (N, C*H*W) rows.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.n();
        let f = x.numel() / n;
        let [o, wf, _, _] = self.weight.value.shape;
        if f != wf {
            return Err(Error::Shape(format!(
                "{}: input flattens to {f} features, weight expects {wf}",
                self.name
            )));
        }
        let w2 = ArrayView2::from_shape((o, f), &self.weight.value.data).expect("contiguous");
        let xv = ArrayView2::from_shape((n, f), &x.data).expect("contiguous");
        let y = xv.dot(&w2.t());
        let mut out = Tensor::zeros([n, o, 1, 1]);
        for i in 0..n {
            for j in 0..o {
                out.data[i * o + j] = y[(i, j)] + self.bias.value.data[j];
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dout: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| {
            Error::Shape(format!("{}: backward before forward", self.name))
        })?;
        let n = x.n();
        let f = x.numel() / n;
        let [o, _, _, _] = self.weight.value.shape;
        let g = ArrayView2::from_shape((n, o), &dout.data).expect("contiguous");
        let xv = ArrayView2::from_shape((n, f), &x.data).expect("contiguous");
        let dw = g.t().dot(&xv);
        for (slot, v) in self.weight.grad.data.iter_mut().zip(dw.iter()) {
            *slot += v;
        }
        for j in 0..o {
            let mut s = 0.0;
            for i in 0..n {
                s += g[(i, j)];
            }
            self.bias.grad.data[j] += s;
        }
        let w2 = ArrayView2::from_shape((o, f), &self.weight.value.data).expect("contiguous");
        let dxv = g.dot(&w2);
        let mut dx = Tensor::zeros(x.shape);
        dx.data.copy_from_slice(dxv.as_slice().expect("contiguous"));
        Ok(dx)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{}.weight", self.name), &mut self.weight);
        f(&format!("{}.bias", self.name), &mut self.bias);
    }
}
