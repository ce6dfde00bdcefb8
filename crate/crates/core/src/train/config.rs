use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimization and stopping settings. Dropout belongs to the model
/// config, since it changes the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Number of most recent checkpoints averaged into the final model.
    pub avg_last: usize,
    /// Non-pad source plus target tokens per batch.
    pub token_budget: usize,
    pub max_epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::multilingual()
    }
}

impl TrainConfig {
    pub fn multilingual() -> Self {
        TrainConfig {
            peak_lr: 5e-4,
            warmup_steps: 4000,
            betas: (0.9, 0.98),
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            patience: 10,
            avg_last: 5,
            token_budget: 8192,
            max_epochs: 100,
            max_steps: None,
            seed: 1,
        }
    }

    pub fn domain_adaptation() -> Self {
        TrainConfig {
            peak_lr: 7e-4,
            ..Self::multilingual()
        }
    }

    /// Short schedule for the desk model on synthetic tasks. Without label
    /// smoothing the training loss can approach zero on copy-like tasks.
    pub fn desk() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            warmup_steps: 300,
            label_smoothing: 0.0,
            token_budget: 1200,
            max_epochs: 200,
            max_steps: Some(3000),
            ..Self::multilingual()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "multilingual" => Ok(Self::multilingual()),
            "domain_adaptation" => Ok(Self::domain_adaptation()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!(
                "unknown train preset {name:?}; expected multilingual, domain_adaptation or desk"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("peak_lr", self.peak_lr), ("adam_eps", self.adam_eps)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!(
                "betas {:?} must lie in [0, 1)",
                self.betas
            )));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} not in [0, 1)",
                self.label_smoothing
            )));
        }
        let counts = [
            ("warmup_steps", self.warmup_steps),
            ("patience", self.patience),
            ("avg_last", self.avg_last),
            ("token_budget", self.token_budget),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}
