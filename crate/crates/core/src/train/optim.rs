use super::config::TrainConfig;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// Linear warmup to `peak_lr` at `warmup_steps`, then inverse square root
/// decay.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warmup = cfg.warmup_steps as f64;
    cfg.peak_lr * (step / warmup).min((warmup / step).sqrt())
}

/// Bias-corrected Adam. Moments are indexed like the store's parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(betas: (f64, f64), eps: f64) -> Self {
        Adam {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.betas, cfg.adam_eps)
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update from the gradients stored on each parameter.
    /// Parameters without a gradient are left alone. Nothing is modified
    /// when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for p in store.iter() {
            if let Some(g) = &p.grad {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        if self.moments.is_empty() {
            self.moments = store
                .iter()
                .map(|p| (vec![0.0; p.value.numel()], vec![0.0; p.value.numel()]))
                .collect();
        }
        if self.moments.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer holds {} moment pairs for {} parameters",
                self.moments.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (id, (m, v)) in ids.into_iter().zip(&mut self.moments) {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            for (((x, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
