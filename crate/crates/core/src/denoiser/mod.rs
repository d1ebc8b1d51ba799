//! Learnable components: the transformer `x̂0` estimator and the imputation autoencoder.

mod checkpoint;
mod config;
mod preprocessor;
mod train;
mod transformer;

use ndarray::Array2;

use crate::error::Result;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{DenoiserConfig, TrainConfig};
pub use preprocessor::{impute_dataset, Preprocessor, PreprocessorConfig};
pub use train::{
    denoiser_loss, preprocessor_loss, train_denoiser, train_preprocessor, DenoiserTrainer, LossTrace, OptimState,
    TrainingSet,
};
pub use transformer::{adaptive_layer_norm, sinusoidal_step_embedding, Denoiser};

/// Anything that maps noisy windows to clean-data estimates.
///
/// The samplers are written against this trait so that closed-form estimators
/// can stand in for the trained network.
pub trait X0Model: Sync {
    fn flow_count(&self) -> usize;

    fn window_len(&self) -> usize;

    /// `x̂0` for each `N × w` window, all at step `t`.
    fn predict(&self, xs: &[Array2<f64>], t: usize) -> Result<Vec<Array2<f64>>>;

    /// Predictions and `∇_{x_t} r_b(x̂0_b)` per window, where `seed(b, x̂0_b)`
    /// returns `∂r_b/∂x̂0_b`.
    fn predict_with_input_grad(
        &self,
        xs: &[Array2<f64>],
        t: usize,
        seed: &dyn Fn(usize, &Array2<f64>) -> Array2<f64>,
    ) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)>;
}

impl X0Model for Denoiser {
    fn flow_count(&self) -> usize {
        self.config().flow_count
    }

    fn window_len(&self) -> usize {
        self.config().window_len
    }

    fn predict(&self, xs: &[Array2<f64>], t: usize) -> Result<Vec<Array2<f64>>> {
        self.denoise_batch(xs, &vec![t; xs.len()])
    }

    fn predict_with_input_grad(
        &self,
        xs: &[Array2<f64>],
        t: usize,
        seed: &dyn Fn(usize, &Array2<f64>) -> Array2<f64>,
    ) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        self.denoise_batch_with_input_grad(xs, &vec![t; xs.len()], seed)
    }
}
