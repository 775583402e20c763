//! Adam with bias correction, plus a reduce-on-plateau schedule for the
//! learning rate. Moment buffers live inside each `Param` so checkpoints
//! capture the full optimizer state.

use crate::tensor::Param;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Bias-correction step count, shared by every param this optimizer
    /// touches; incremented once per `begin_step`.
    pub step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

impl Adam {
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&self, p: &mut Param) {
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..p.value.data.len() {
            let g = p.grad.data[i];
            let m = self.beta1 * p.m.data[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * p.v.data[i] + (1.0 - self.beta2) * g * g;
            p.m.data[i] = m;
            p.v.data[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            p.value.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Halves the learning rate when the watched loss stops improving by at
/// least `min_delta` for `patience` consecutive observations.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub factor: f32,
    pub patience: usize,
    pub min_delta: f32,
    pub min_lr: f32,
    best: f32,
    stale: usize,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        PlateauSchedule {
            factor: 0.5,
            patience: 10,
            min_delta: 1e-4,
            min_lr: 1e-7,
            best: f32::INFINITY,
            stale: 0,
        }
    }
}

impl PlateauSchedule {
    /// Feeds one validation value; returns the new learning rate if this
    /// observation triggered a reduction.
    pub fn observe(&mut self, loss: f32, lr: &mut f32) -> Option<f32> {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            return None;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            let next = (*lr * self.factor).max(self.min_lr);
            if next < *lr {
                *lr = next;
                return Some(next);
            }
        }
        None
    }
}
