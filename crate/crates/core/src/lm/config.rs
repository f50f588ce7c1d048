use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ode::IntegratorConfig;
use crate::positions::SamplerMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    /// Native (pretraining) context length `L`.
    pub context_len: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_layers: 2,
            n_heads: 4,
            head_dim: 16,
            ffn_mult: 4,
            context_len: 64,
            rope_base: 10000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(invalid(format!("head_dim must be positive and even, got {}", self.head_dim)));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_mult", self.ffn_mult),
            ("context_len", self.context_len),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(invalid("rope_base must be > 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Upper end `t` of the scaling factors sampled during training.
    pub t_max: f64,
    pub sampler_mode: SamplerMode,
    pub integrator: IntegratorConfig,
    /// Trained sequence length `L_train`.
    pub train_len: usize,
    /// Amplification factor of the dynamics network.
    pub ode_amp: usize,
    pub dynamics_lr: f64,
    pub freeze_model: bool,
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 3e-3,
            t_max: 4.0,
            sampler_mode: SamplerMode::Random,
            integrator: IntegratorConfig::default(),
            train_len: 64,
            ode_amp: 2,
            dynamics_lr: 1e-3,
            freeze_model: false,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.train_len < 2 {
            return Err(invalid("batch_size must be >= 1 and train_len >= 2"));
        }
        if !(self.lr >= 0.0 && self.dynamics_lr >= 0.0) {
            return Err(invalid("learning rates must be non-negative"));
        }
        if self.ode_amp == 0 || self.integrator.steps_per_unit_t == 0 {
            return Err(invalid("ode_amp and steps_per_unit_t must be positive"));
        }
        let min_t = self.train_len as f64 / model.context_len as f64;
        if !(self.t_max.is_finite() && self.t_max >= 1.0 && self.t_max >= min_t) {
            return Err(invalid(format!(
                "t_max = {} must be >= max(1, L_train / L) = {}",
                self.t_max,
                min_t.max(1.0)
            )));
        }
        Ok(())
    }
}
