//! Encoder/decoder generator with skip connections. Stride-2 conv blocks
//! halve resolution down to 1x1; transposed-conv blocks mirror the way up,
//! each concatenated with the encoder activation of matching size. The
//! first and innermost encoder blocks skip normalization — the innermost
//! runs at 1x1 where batch statistics degenerate — and the output head is
//! a bare transposed conv into tanh.

use rand_chacha::ChaCha8Rng;

use crate::layers::{BatchNorm2d, Conv2d, ConvTranspose2d, LeakyRelu, Tanh};
use crate::tensor::{Param, Parameterized, Tensor};
use crate::{Error, Result};

/// Depth is the number of halvings: capped by the paper architecture at 7
/// and by the input at log2(resolution).
pub fn depth_for(resolution: usize) -> usize {
    (resolution.trailing_zeros() as usize).min(7)
}

struct EncBlock {
    act: LeakyRelu,
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

struct DecBlock {
    act: LeakyRelu,
    conv: ConvTranspose2d,
    norm: Option<BatchNorm2d>,
}

pub struct UNet {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub depth: usize,
    /// Multiplies every skip activation at its concat; 1.0 in normal use,
    /// 0.0 ablates the skips without touching the weights.
    pub skip_scale: f32,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    out_act: Tanh,
    enc_acts: Vec<Tensor>,
}

impl UNet {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        width: usize,
        resolution: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 16 {
            return Err(Error::Config(format!(
                "generator resolution must be a power of two >= 16, got {resolution}"
            )));
        }
        if width == 0 {
            return Err(Error::Config("generator width must be positive".into()));
        }
        let depth = depth_for(resolution);
        let ch: Vec<usize> = (0..depth).map(|i| width << i.min(3)).collect();
        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { in_channels } else { ch[i - 1] };
            let name = format!("enc{}", i + 1);
            let conv = Conv2d::new(&name, cin, ch[i], 4, 2, 1, rng);
            let inner = i + 1 == depth;
            let norm = if i == 0 || inner {
                None
            } else {
                Some(BatchNorm2d::new(&name, ch[i]))
            };
            enc.push(EncBlock {
                act: LeakyRelu::new(0.2),
                conv,
                norm,
            });
        }
        let mut dec = Vec::with_capacity(depth);
        for j in 0..depth {
            let cin = if j == 0 { ch[depth - 1] } else { 2 * ch[depth - 1 - j] };
            let last = j + 1 == depth;
            let cout = if last { out_channels } else { ch[depth - 2 - j] };
            let name = format!("dec{}", j + 1);
            let conv = ConvTranspose2d::new(&name, cin, cout, 4, 2, 1, rng);
            let norm = if last {
                None
            } else {
                Some(BatchNorm2d::new(&name, cout))
            };
            dec.push(DecBlock {
                // Decoder activations are plain ReLU.
                act: LeakyRelu::new(0.0),
                conv,
                norm,
            });
        }
        Ok(UNet {
            in_channels,
            out_channels,
            width,
            depth,
            skip_scale: 1.0,
            enc,
            dec,
            out_act: Tanh::new(),
            enc_acts: Vec::new(),
        })
    }

    /// Turns every piecewise activation into the identity. FD composition
    /// checks need a kink-free function; the activations' own gradients
    /// are verified standalone where inputs can be held off the kink.
    #[cfg(test)]
    pub(crate) fn flatten_kinks(&mut self) {
        for b in &mut self.enc {
            b.act.slope = 1.0;
        }
        for b in &mut self.dec {
            b.act.slope = 1.0;
        }
    }

    pub fn set_train(&mut self, train: bool) {
        for b in &mut self.enc {
            if let Some(n) = &mut b.norm {
                n.train = train;
            }
        }
        for b in &mut self.dec {
            if let Some(n) = &mut b.norm {
                n.train = train;
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.c() != self.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {}",
                self.in_channels,
                x.c()
            )));
        }
        self.enc_acts.clear();
        let mut cur = x.clone();
        for (i, b) in self.enc.iter_mut().enumerate() {
            // First block consumes the raw input; later blocks activate
            // the previous feature map first.
            let fed = if i == 0 { cur.clone() } else { b.act.forward(&cur) };
            let mut e = b.conv.forward(&fed)?;
            if let Some(n) = &mut b.norm {
                e = n.forward(&e)?;
            }
            self.enc_acts.push(e.clone());
            cur = e;
        }
        for (j, b) in self.dec.iter_mut().enumerate() {
            let fed = if j == 0 {
                cur.clone()
            } else {
                let mut skip = self.enc_acts[self.depth - 1 - j].clone();
                skip.scale(self.skip_scale);
                Tensor::concat_channels(&cur, &skip)?
            };
            let a = b.act.forward(&fed);
            let mut d = b.conv.forward(&a)?;
            if let Some(n) = &mut b.norm {
                d = n.forward(&d)?;
            }
            cur = d;
        }
        Ok(self.out_act.forward(&cur))
    }

    /// Backpropagates the output gradient, accumulating parameter
    /// gradients; returns the input gradient.
    pub fn backward(&mut self, dout: &Tensor) -> Result<Tensor> {
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; self.depth];
        let mut g = self.out_act.backward(dout);
        for j in (0..self.depth).rev() {
            let b = &mut self.dec[j];
            if let Some(n) = &mut b.norm {
                g = n.backward(&g)?;
            }
            g = b.conv.backward(&g)?;
            g = b.act.backward(&g);
            if j > 0 {
                let skip_ch = self.enc_acts[self.depth - 1 - j].c();
                let keep = g.c() - skip_ch;
                let (into_dec, mut into_skip) = g.split_channels(keep);
                into_skip.scale(self.skip_scale);
                skip_grads[self.depth - 1 - j] = Some(into_skip);
                g = into_dec;
            }
        }
        for i in (0..self.depth).rev() {
            if let Some(s) = &skip_grads[i] {
                g.add_assign(s)?;
            }
            let b = &mut self.enc[i];
            if let Some(n) = &mut b.norm {
                g = n.backward(&g)?;
            }
            g = b.conv.backward(&g)?;
            if i > 0 {
                g = b.act.backward(&g);
            }
        }
        Ok(g)
    }
}

impl Parameterized for UNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for b in &mut self.enc {
            b.conv.visit_params(f);
            if let Some(n) = &mut b.norm {
                n.visit_params(f);
            }
        }
        for b in &mut self.dec {
            b.conv.visit_params(f);
            if let Some(n) = &mut b.norm {
                n.visit_params(f);
            }
        }
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for b in &mut self.enc {
            if let Some(n) = &mut b.norm {
                n.visit_state(f);
            }
        }
        for b in &mut self.dec {
            if let Some(n) = &mut b.norm {
                n.visit_state(f);
            }
        }
    }
}
