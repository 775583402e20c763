//! Dense float32 tensors in NCHW layout, plus the parameter bundle
//! (value, gradient, Adam moments) every layer hangs its weights on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Row-major (batch, channels, height, width) buffer. Vectors and scalars
/// use trailing 1-dims so every op speaks one shape language.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "buffer of {} floats cannot fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Gaussian init, Box-Muller over the seeded stream.
    pub fn randn(shape: [usize; 4], std: f32, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
            let u2: f32 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let t = std::f32::consts::TAU * u2;
            data.push(r * t.cos() * std);
            if data.len() < n {
                data.push(r * t.sin() * std);
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let [_, cc, hh, ww] = self.shape;
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f32 {
        let [_, cc, hh, ww] = self.shape;
        &mut self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// One sample's contiguous slice.
    pub fn sample(&self, n: usize) -> &[f32] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * stride..(n + 1) * stride]
    }

    /// NaN guard required after every forward/backward step.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn fill(&mut self, v: f32) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// self += other, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.n() != b.n() || a.h() != b.h() || a.w() != b.w() {
            return Err(Error::Shape(format!(
                "concat of {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let [n, ca, h, w] = a.shape;
        let cb = b.c();
        let mut out = Tensor::zeros([n, ca + cb, h, w]);
        let plane = h * w;
        for i in 0..n {
            let dst = out.sample_mut(i);
            dst[..ca * plane].copy_from_slice(a.sample(i));
            dst[ca * plane..].copy_from_slice(b.sample(i));
        }
        Ok(out)
    }

    /// Splits a channel-concatenated gradient back into the two parts.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let [n, c, h, w] = self.shape;
        let cb = c - ca;
        let mut a = Tensor::zeros([n, ca, h, w]);
        let mut b = Tensor::zeros([n, cb, h, w]);
        let plane = h * w;
        for i in 0..n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..ca * plane]);
            b.sample_mut(i).copy_from_slice(&src[ca * plane..]);
        }
        (a, b)
    }
}

/// A learnable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape;
        Param {
            value,
            grad: Tensor::zeros(shape),
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns parameters exposes them by stable name, the single
/// registry serving the optimizer and the checkpoint writer.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    /// Non-trainable state that checkpoints must still carry
    /// (normalization running statistics).
    fn visit_state(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor)) {}
}

/// Collects (name, param) pairs by cloning names, for checkpointing.
pub fn param_names<P: Parameterized>(module: &mut P) -> Vec<String> {
    let mut names = Vec::new();
    module.visit_params(&mut |name, _| names.push(name.to_string()));
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn indexing_matches_layout() {
        let t = Tensor::from_vec([1, 2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(0, 1, 1, 1), 10.0);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn([2, 3, 4, 4], 1.0, &mut rng);
        let b = Tensor::randn([2, 5, 4, 4], 1.0, &mut rng);
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape, [2, 8, 4, 4]);
        let (a2, b2) = cat.split_channels(3);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn randn_is_seed_deterministic_and_roughly_standard() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn([1, 1, 32, 32], 1.0, &mut r1);
        let b = Tensor::randn([1, 1, 32, 32], 1.0, &mut r2);
        assert_eq!(a, b);
        let mean: f32 = a.data.iter().sum::<f32>() / a.numel() as f32;
        let var: f32 = a.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>()
            / a.numel() as f32;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.15, "var {var}");
    }

    #[test]
    fn finite_guard_catches_nan() {
        let mut t = Tensor::zeros([1, 1, 2, 2]);
        assert!(t.ensure_finite("ok").is_ok());
        t.data[3] = f32::NAN;
        assert!(t.ensure_finite("bad").is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let a = Tensor::zeros([1, 2, 2, 2]);
        let b = Tensor::zeros([1, 2, 3, 2]);
        assert!(Tensor::concat_channels(&a, &b).is_err());
    }
}
