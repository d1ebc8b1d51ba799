use serde::{Deserialize, Serialize};

use crate::diffusion::LossKind;
use crate::error::{Error, Result};

/// Shape of the transformer denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ff_dim: usize,
    pub window_len: usize,
    pub flow_count: usize,
    pub diffusion_steps: usize,
}

impl DenoiserConfig {
    /// Defaults for a given data shape: 96-dim model, 8 heads, 2+2 blocks, 4× feed-forward, T = 300.
    pub fn for_shape(flow_count: usize, window_len: usize) -> Self {
        Self {
            model_dim: 96,
            heads: 8,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ff_dim: 384,
            window_len,
            flow_count,
            diffusion_steps: 300,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("encoder_blocks", self.encoder_blocks),
            ("decoder_blocks", self.decoder_blocks),
            ("ff_dim", self.ff_dim),
            ("window_len", self.window_len),
            ("flow_count", self.flow_count),
            ("diffusion_steps", self.diffusion_steps),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("denoiser {name} must be positive")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::validation(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::validation("model_dim must be even for the step embedding"));
        }
        Ok(())
    }
}

/// Optimisation settings shared by the autoencoder and denoiser stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_iters: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Autoencoder epochs.
    pub epochs_pre: usize,
    /// Denoiser epochs.
    pub epochs_diff: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 8e-4,
            warmup_iters: 500,
            adam_beta1: 0.9,
            adam_beta2: 0.96,
            epochs_pre: 200,
            epochs_diff: 380,
            loss: LossKind::Squared,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::validation(format!("{name} = {b} outside (0, 1)")));
            }
        }
        Ok(())
    }
}
