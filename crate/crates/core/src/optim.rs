//! AdamW with decoupled weight decay and the warm-up + cosine schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

/// Per-parameter AdamW state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl OptimizerState {
    /// Defaults: betas (0.9, 0.999), eps 1e-8.
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update of every trainable parameter that holds a gradient.
    ///
    /// Weight decay multiplies the parameter by `1 - lr * wd` before the
    /// bias-corrected Adam step; it never touches the gradient.
    pub fn step(&mut self, params: &mut ParamStore<f32>) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::arg(format!("learning rate {}", self.lr)));
        }
        if self.first.len() < params.len() {
            self.first.resize(params.len(), Vec::new());
            self.second.resize(params.len(), Vec::new());
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let decay = (1.0 - self.lr * self.weight_decay) as f32;
        let step_size = (self.lr / bias1) as f32;
        let bias2_sqrt = bias2.sqrt() as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);

        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let Some(grad) = t.grad.take() else { continue };
            let i = id.index();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            if m.len() != grad.len() {
                *m = vec![0.0; grad.len()];
                *v = vec![0.0; grad.len()];
            }
            for (((p, &g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p *= decay;
                *p -= step_size * *m / ((*v).sqrt() / bias2_sqrt + eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}

/// Convenience wrapper: one AdamW step for a single flat parameter vector.
pub fn adamw_step<T: Element>(
    params: &mut [T],
    grads: &[T],
    first: &mut [T],
    second: &mut [T],
    step: u64,
    state: &OptimizerState,
) {
    assert_eq!(params.len(), grads.len());
    let (b1, b2) = state.betas;
    let bias1 = 1.0 - b1.powi(step as i32);
    let bias2 = 1.0 - b2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        let m = b1 * first[i].as_f64() + (1.0 - b1) * g;
        let v = b2 * second[i].as_f64() + (1.0 - b2) * g * g;
        first[i] = T::from_f64_lossy(m);
        second[i] = T::from_f64_lossy(v);
        let mut p = params[i].as_f64() * (1.0 - state.lr * state.weight_decay);
        p -= state.lr * (m / bias1) / ((v / bias2).sqrt() + state.eps);
        params[i] = T::from_f64_lossy(p);
    }
}

/// Linear warm-up followed by cosine annealing to zero, stepped per epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            total_epochs: 100,
            warmup_epochs: 10,
        }
    }
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_epochs: usize, warmup_epochs: usize) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) || total_epochs == 0 || warmup_epochs >= total_epochs {
            return Err(Error::arg(format!(
                "schedule lr={base_lr} total={total_epochs} warmup={warmup_epochs}"
            )));
        }
        Ok(Self {
            base_lr,
            total_epochs,
            warmup_epochs,
        })
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::arg(format!(
                "epoch {epoch} beyond schedule of {} epochs",
                self.total_epochs
            )));
        }
        if epoch < self.warmup_epochs {
            return Ok(self.base_lr * (epoch + 1) as f64 / self.warmup_epochs as f64);
        }
        let span = (self.total_epochs - self.warmup_epochs).max(1) as f64;
        let progress = (epoch - self.warmup_epochs) as f64 / span;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
