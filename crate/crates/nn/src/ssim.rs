//! Multi-scale structural dissimilarity: MS-DSSIM = (1 - MS-SSIM) / 2,
//! computed per channel and averaged. Valid-region 11x11 Gaussian windows
//! (sigma 1.5), 2x2 average-pool between scales, standard scale weights
//! renormalized to the scale count. All internal arithmetic is f64 so the
//! forward agrees with a direct per-definition evaluation to well under
//! 1e-6; inputs and gradients are f32 tensors.

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
/// Data range of [-1, 1] signals.
pub const RANGE: f64 = 2.0;
/// Wang et al. five-scale weights; a shorter pyramid takes a prefix and
/// renormalizes.
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Per-scale means are clamped here before the weighted geometric mean;
/// anticorrelated windows can drive cs negative where powers are undefined.
pub const CS_FLOOR: f64 = 1e-4;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0f64; WINDOW];
    let half = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Valid-region separable Gaussian blur of an (h, w) image.
fn blur(img: &[f64], h: usize, w: usize, win: &[f64; WINDOW]) -> Vec<f64> {
    let hw = w - WINDOW + 1;
    let mut rows = vec![0.0f64; h * hw];
    for y in 0..h {
        for x in 0..hw {
            let mut s = 0.0;
            for k in 0..WINDOW {
                s += win[k] * img[y * w + x + k];
            }
            rows[y * hw + x] = s;
        }
    }
    let hh = h - WINDOW + 1;
    let mut out = vec![0.0f64; hh * hw];
    for y in 0..hh {
        for x in 0..hw {
            let mut s = 0.0;
            for k in 0..WINDOW {
                s += win[k] * rows[(y + k) * hw + x];
            }
            out[y * hw + x] = s;
        }
    }
    out
}

fn avg_pool2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let ho = h / 2;
    let wo = w / 2;
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = 0.25
                * (img[2 * y * w + 2 * x]
                    + img[2 * y * w + 2 * x + 1]
                    + img[(2 * y + 1) * w + 2 * x]
                    + img[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, ho, wo)
}

/// Adjoint of [`avg_pool2`]: spreads each coarse gradient over its 2x2 block.
fn avg_pool2_back(g: &[f64], ho: usize, wo: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    for y in 0..ho {
        for x in 0..wo {
            let v = 0.25 * g[y * wo + x];
            out[2 * y * w + 2 * x] += v;
            out[2 * y * w + 2 * x + 1] += v;
            out[(2 * y + 1) * w + 2 * x] += v;
            out[(2 * y + 1) * w + 2 * x + 1] += v;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct MsSsim {
    pub scales: usize,
    pub weights: Vec<f64>,
    win: [f64; WINDOW],
    c1: f64,
    c2: f64,
}

struct ScaleStats {
    x: Vec<f64>,
    y: Vec<f64>,
    h: usize,
    w: usize,
    mx: Vec<f64>,
    my: Vec<f64>,
    cs_map: Vec<f64>,
    b: Vec<f64>,
    q: Vec<f64>,
    l_map: Vec<f64>,
    cs_mean: f64,
    ssim_mean: f64,
}

impl MsSsim {
    pub fn new(scales: usize) -> Result<Self> {
        if scales == 0 || scales > SCALE_WEIGHTS.len() {
            return Err(Error::Config(format!(
                "ms-ssim supports 1..=5 scales, got {scales}"
            )));
        }
        let total: f64 = SCALE_WEIGHTS[..scales].iter().sum();
        Ok(MsSsim {
            scales,
            weights: SCALE_WEIGHTS[..scales].iter().map(|w| w / total).collect(),
            win: gaussian_window(),
            c1: (0.01 * RANGE) * (0.01 * RANGE),
            c2: (0.03 * RANGE) * (0.03 * RANGE),
        })
    }

    fn check(&self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if pred.shape != target.shape {
            return Err(Error::Shape(format!(
                "ms-dssim: prediction {:?} vs target {:?}",
                pred.shape, target.shape
            )));
        }
        let [_, _, h, w] = pred.shape;
        let reach = 1usize << (self.scales - 1);
        if h / reach < 16 || w / reach < 16 {
            return Err(Error::Config(format!(
                "ms-dssim: {h}x{w} image leaves the coarsest of {} scales under 16px",
                self.scales
            )));
        }
        Ok(())
    }

    fn channel_stats(&self, x0: Vec<f64>, y0: Vec<f64>, h0: usize, w0: usize) -> Vec<ScaleStats> {
        let mut stats = Vec::with_capacity(self.scales);
        let (mut x, mut y, mut h, mut w) = (x0, y0, h0, w0);
        for s in 0..self.scales {
            let last = s + 1 == self.scales;
            let mx = blur(&x, h, w, &self.win);
            let my = blur(&y, h, w, &self.win);
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
            let sxx = blur(&xx, h, w, &self.win);
            let syy = blur(&yy, h, w, &self.win);
            let sxy = blur(&xy, h, w, &self.win);
            let npos = mx.len();
            let mut cs_map = vec![0.0f64; npos];
            let mut b = vec![0.0f64; npos];
            let mut q = vec![0.0f64; npos];
            let mut l_map = vec![0.0f64; npos];
            let mut cs_sum = 0.0f64;
            let mut ssim_sum = 0.0f64;
            for i in 0..npos {
                let vx = sxx[i] - mx[i] * mx[i];
                let vy = syy[i] - my[i] * my[i];
                let cov = sxy[i] - mx[i] * my[i];
                let bb = vx + vy + self.c2;
                let cs = (2.0 * cov + self.c2) / bb;
                cs_map[i] = cs;
                b[i] = bb;
                cs_sum += cs;
                if last {
                    let qq = mx[i] * mx[i] + my[i] * my[i] + self.c1;
                    let l = (2.0 * mx[i] * my[i] + self.c1) / qq;
                    q[i] = qq;
                    l_map[i] = l;
                    ssim_sum += l * cs;
                }
            }
            stats.push(ScaleStats {
                x: x.clone(),
                y: y.clone(),
                h,
                w,
                mx,
                my,
                cs_map,
                b,
                q,
                l_map,
                cs_mean: cs_sum / npos as f64,
                ssim_mean: ssim_sum / npos as f64,
            });
            if !last {
                let (xd, hd, wd) = avg_pool2(&x, h, w);
                let (yd, _, _) = avg_pool2(&y, h, w);
                x = xd;
                y = yd;
                h = hd;
                w = wd;
            }
        }
        stats
    }

    /// MS-SSIM of one channel plus, per scale, d(ms-ssim)/d(scale mean).
    fn channel_msssim(&self, stats: &[ScaleStats]) -> (f64, Vec<f64>) {
        let mut ms = 1.0f64;
        let mut clamped_means = Vec::with_capacity(self.scales);
        for (s, st) in stats.iter().enumerate() {
            let last = s + 1 == self.scales;
            let mean = if last { st.ssim_mean } else { st.cs_mean };
            let cm = mean.max(CS_FLOOR);
            ms *= cm.powf(self.weights[s]);
            clamped_means.push((mean, cm));
        }
        let dms: Vec<f64> = clamped_means
            .iter()
            .enumerate()
            .map(|(s, &(mean, cm))| {
                if mean < CS_FLOOR {
                    0.0
                } else {
                    ms * self.weights[s] / cm
                }
            })
            .collect();
        (ms, dms)
    }

    /// Mean MS-DSSIM over batch and channels.
    pub fn value(&self, pred: &Tensor, target: &Tensor) -> Result<f32> {
        Ok(self.value_f64(pred, target)? as f32)
    }

    /// Full-precision readout; finite-difference probes need the loss at
    /// better than f32 granularity.
    pub fn value_f64(&self, pred: &Tensor, target: &Tensor) -> Result<f64> {
        self.check(pred, target)?;
        let [n, c, h, w] = pred.shape;
        let mut total = 0.0f64;
        for i in 0..n {
            for ci in 0..c {
                let x: Vec<f64> = chan(pred, i, ci).iter().map(|&v| v as f64).collect();
                let y: Vec<f64> = chan(target, i, ci).iter().map(|&v| v as f64).collect();
                let stats = self.channel_stats(x, y, h, w);
                let (ms, _) = self.channel_msssim(&stats);
                total += (1.0 - ms) / 2.0;
            }
        }
        Ok(total / (n * c) as f64)
    }

    /// Loss and its gradient with respect to `pred`.
    pub fn value_and_grad(&self, pred: &Tensor, target: &Tensor) -> Result<(f32, Tensor)> {
        self.check(pred, target)?;
        let [n, c, h, w] = pred.shape;
        let mut total = 0.0f64;
        let mut grad = Tensor::zeros(pred.shape);
        let denom = (n * c) as f64;
        for i in 0..n {
            for ci in 0..c {
                let x: Vec<f64> = chan(pred, i, ci).iter().map(|&v| v as f64).collect();
                let y: Vec<f64> = chan(target, i, ci).iter().map(|&v| v as f64).collect();
                let stats = self.channel_stats(x, y, h, w);
                let (ms, dms) = self.channel_msssim(&stats);
                total += (1.0 - ms) / 2.0;
                // d(loss)/d(ms-ssim) = -1 / (2 * N * C)
                let scale_coeff: Vec<f64> = dms.iter().map(|d| -d / (2.0 * denom)).collect();
                let gx = self.backward_channel(&stats, &scale_coeff);
                let dst = chan_mut(&mut grad, i, ci);
                for (slot, v) in dst.iter_mut().zip(gx.iter()) {
                    *slot += *v as f32;
                }
            }
        }
        Ok(((total / denom) as f32, grad))
    }

    /// Accumulates d(loss)/dx for one channel; `coeff[s]` multiplies the
    /// gradient of scale s's mean statistic. Work runs coarsest-first so
    /// each scale's image gradient is un-pooled exactly once.
    fn backward_channel(&self, stats: &[ScaleStats], coeff: &[f64]) -> Vec<f64> {
        let mut carried: Vec<f64> = Vec::new();
        for s in (0..self.scales).rev() {
            let st = &stats[s];
            let last = s + 1 == self.scales;
            let mut gx = vec![0.0f64; st.h * st.w];
            if coeff[s] != 0.0 {
                let hw = st.w - WINDOW + 1;
                let hh = st.h - WINDOW + 1;
                let npos = hh * hw;
                let per_pos = coeff[s] / npos as f64;
                for qy in 0..hh {
                    for qx in 0..hw {
                        let qi = qy * hw + qx;
                        let cs = st.cs_map[qi];
                        let b = st.b[qi];
                        let (dcs_scale, dl_scale) = if last {
                            (per_pos * st.l_map[qi], per_pos * cs)
                        } else {
                            (per_pos, 0.0)
                        };
                        let lum = if last {
                            2.0 / st.q[qi] * (st.my[qi] - st.l_map[qi] * st.mx[qi]) * dl_scale
                        } else {
                            0.0
                        };
                        for ky in 0..WINDOW {
                            let py = qy + ky;
                            for kx in 0..WINDOW {
                                let px = qx + kx;
                                let wk = self.win[ky] * self.win[kx];
                                let pi = py * st.w + px;
                                let dcs = 2.0 / b
                                    * ((st.y[pi] - st.my[qi]) - cs * (st.x[pi] - st.mx[qi]));
                                gx[pi] += wk * (dcs * dcs_scale + lum);
                            }
                        }
                    }
                }
            }
            if !carried.is_empty() {
                let up = avg_pool2_back(&carried, st.h / 2, st.w / 2, st.h, st.w);
                for (a, bb) in gx.iter_mut().zip(up.iter()) {
                    *a += bb;
                }
            }
            carried = gx;
        }
        carried
    }
}

fn chan(t: &Tensor, n: usize, c: usize) -> &[f32] {
    let [_, cc, h, w] = t.shape;
    let base = (n * cc + c) * h * w;
    &t.data[base..base + h * w]
}

fn chan_mut(t: &mut Tensor, n: usize, c: usize) -> &mut [f32] {
    let [_, cc, h, w] = t.shape;
    let base = (n * cc + c) * h * w;
    &mut t.data[base..base + h * w]
}
