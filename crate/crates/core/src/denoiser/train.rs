use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{DenoiserConfig, TrainConfig};
use super::preprocessor::{Preprocessor, PreprocessorConfig};
use super::transformer::{to_tokens, Denoiser};
use crate::data::{make_mask_windows, make_windows, ObservationMask, TrafficTensor};
use crate::diffusion::{forward_sample, LossKind, NoiseSchedule};
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{Adam, LossFn, ParamStore, Tape, Var, WarmupLinearDecay};

// Separate random streams for the two training stages.
const PRE_STREAM: u64 = 0x5052_4500_0000_0000;
const DIFF_STREAM: u64 = 0x4449_4600_0000_0000;

/// Equal-shape `N × w` training windows with their observation masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub windows: Vec<Array2<f64>>,
    pub masks: Vec<Array2<f64>>,
}

impl TrainingSet {
    pub fn new(windows: Vec<Array2<f64>>, masks: Vec<Array2<f64>>) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::validation("training set is empty"));
        }
        ensure_shape(windows.len() == masks.len(), || {
            format!("{} windows but {} masks", windows.len(), masks.len())
        })?;
        let dim = windows[0].dim();
        for (x, m) in windows.iter().zip(&masks) {
            ensure_shape(x.dim() == dim && m.dim() == dim, || format!("window {:?} / mask {:?} vs {:?}", x.dim(), m.dim(), dim))?;
        }
        Ok(Self { windows, masks })
    }

    /// Sliding windows over a series and its mask.
    pub fn from_series(x: &TrafficTensor, m: &ObservationMask, window_len: usize, stride: usize) -> Result<Self> {
        let windows = make_windows(x, window_len, stride)?.windows;
        let masks = make_mask_windows(m, window_len, stride)?
            .into_iter()
            .map(|m| m.bits().clone())
            .collect();
        Self::new(windows, masks)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_shape(&self) -> (usize, usize) {
        self.windows[0].dim()
    }

    fn gather(&self, idx: &[usize]) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        (
            idx.iter().map(|&i| self.windows[i].clone()).collect(),
            idx.iter().map(|&i| self.masks[i].clone()).collect(),
        )
    }
}

fn loss_fn(kind: LossKind) -> LossFn {
    match kind {
        LossKind::Squared => LossFn::Squared,
        LossKind::Absolute => LossFn::Absolute,
    }
}

fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream | epoch as u64);
    rng
}

fn batches_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

/// Optimiser state that survives a checkpoint round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub adam: Adam,
    pub epoch: usize,
    pub iter: u64,
}

/// One epoch of shuffled mini-batches. `batch_loss` records the loss for the
/// given window indices on a tape over `params`.
#[allow(clippy::too_many_arguments)]
fn run_epoch<M>(
    model: &mut M,
    params: fn(&M) -> &ParamStore,
    params_mut: fn(&mut M) -> &mut ParamStore,
    set: &TrainingSet,
    cfg: &TrainConfig,
    lr: &WarmupLinearDecay,
    state: &mut OptimState,
    rng: &mut ChaCha8Rng,
    batch_loss: &dyn Fn(&M, &mut Tape, &[usize], &mut ChaCha8Rng) -> Var,
    losses: &mut Vec<f64>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    for idx in order.chunks(cfg.batch_size) {
        if idx.iter().all(|&i| set.masks[i].iter().all(|&b| b == 0.0)) {
            continue;
        }
        let (loss, grads) = {
            let store = params(model);
            let mut tape = Tape::new(store, true);
            let out = batch_loss(model, &mut tape, idx, rng);
            let loss = tape.value(out)[[0, 0]];
            let grads = tape.backward(out, Array2::ones((1, 1))).param_grads(store);
            (loss, grads)
        };
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "training loss became {loss} at epoch {} iteration {} (learning rate {:e})",
                state.epoch,
                state.iter,
                lr.lr(state.iter)
            )));
        }
        state.adam.update(params_mut(model), &grads, lr.lr(state.iter));
        state.iter += 1;
        losses.push(loss);
    }
    if !params(model).all_finite() {
        return Err(Error::numeric(format!("non-finite weight after epoch {}", state.epoch)));
    }
    state.epoch += 1;
    Ok(())
}

/// Per-iteration losses of a training stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    /// Epoch index of every entry in `losses`.
    pub epochs: Vec<usize>,
}

impl LossTrace {
    fn extend_epoch(&mut self, epoch: usize, losses: Vec<f64>) {
        self.epochs.extend(std::iter::repeat_n(epoch, losses.len()));
        self.losses.extend(losses);
    }
}

/// Fits the imputation autoencoder on the masked reconstruction loss.
pub fn train_preprocessor(set: &TrainingSet, cfg: &TrainConfig) -> Result<(Preprocessor, LossTrace)> {
    cfg.validate()?;
    let (n, w) = set.window_shape();
    let mut pre = Preprocessor::new(PreprocessorConfig::for_shape(n, w), cfg.seed)?;
    let total = cfg.epochs_pre as u64 * batches_per_epoch(set.len(), cfg.batch_size);
    let lr = WarmupLinearDecay {
        peak: cfg.learning_rate,
        warmup: cfg.warmup_iters,
        total,
    };
    let mut state = OptimState {
        adam: Adam::new(pre.params(), cfg.adam_beta1, cfg.adam_beta2),
        epoch: 0,
        iter: 0,
    };
    let kind = loss_fn(cfg.loss);
    let mut trace = LossTrace::default();
    while state.epoch < cfg.epochs_pre {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, PRE_STREAM, epoch);
        let mut losses = Vec::new();
        run_epoch(
            &mut pre,
            Preprocessor::params,
            Preprocessor::params_mut,
            set,
            cfg,
            &lr,
            &mut state,
            &mut rng,
            &|p: &Preprocessor, tape, idx, _| {
                let (xs, ms) = set.gather(idx);
                p.batch_loss(tape, &xs, &ms, kind)
            },
            &mut losses,
        )?;
        trace.extend_epoch(epoch, losses);
    }
    Ok((pre, trace))
}

/// Masked reconstruction loss of the autoencoder over a whole set.
pub fn preprocessor_loss(pre: &Preprocessor, set: &TrainingSet, kind: LossKind) -> Result<f64> {
    let mut tape = Tape::new(pre.params(), false);
    let out = pre.batch_loss(&mut tape, &set.windows, &set.masks, loss_fn(kind));
    Ok(tape.value(out)[[0, 0]])
}

/// Draws `(t, x_t)` for each window and records the masked `x̂0` loss.
fn denoiser_batch_loss(
    model: &Denoiser,
    tape: &mut Tape,
    xs: &[Array2<f64>],
    ms: &[Array2<f64>],
    schedule: &NoiseSchedule,
    kind: LossFn,
    rng: &mut impl Rng,
) -> Var {
    let steps = schedule.steps();
    let mut ts = Vec::with_capacity(xs.len());
    let mut noisy = Vec::with_capacity(xs.len());
    for x in xs {
        let t = rng.random_range(1..=steps);
        let eps = Array2::from_shape_simple_fn(x.dim(), || rng.sample::<f64, _>(StandardNormal));
        noisy.push(forward_sample(x, t, &eps, schedule).expect("step within schedule"));
        ts.push(t);
    }
    let input = tape.constant(to_tokens(&noisy));
    let pred = model.forward(tape, input, &ts);
    tape.masked_loss(pred, &to_tokens(xs), &to_tokens(ms), kind)
}

/// Masked denoising loss over a whole set with steps and noise drawn from `seed`.
pub fn denoiser_loss(model: &Denoiser, set: &TrainingSet, schedule: &NoiseSchedule, kind: LossKind, seed: u64) -> Result<f64> {
    check_model_data(model.config(), set, schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new(model.params(), false);
    let out = denoiser_batch_loss(model, &mut tape, &set.windows, &set.masks, schedule, loss_fn(kind), &mut rng);
    Ok(tape.value(out)[[0, 0]])
}

fn check_model_data(cfg: &DenoiserConfig, set: &TrainingSet, schedule: &NoiseSchedule) -> Result<()> {
    ensure_shape(set.window_shape() == (cfg.flow_count, cfg.window_len), || {
        format!(
            "training windows {:?}, model expects {:?}",
            set.window_shape(),
            (cfg.flow_count, cfg.window_len)
        )
    })?;
    if schedule.steps() != cfg.diffusion_steps {
        return Err(Error::validation(format!(
            "schedule has {} steps, model was configured for {}",
            schedule.steps(),
            cfg.diffusion_steps
        )));
    }
    Ok(())
}

/// Resumable training loop for the transformer denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserTrainer {
    pub model: Denoiser,
    pub state: OptimState,
}

impl DenoiserTrainer {
    pub fn new(model: Denoiser, cfg: &TrainConfig) -> Self {
        let adam = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2);
        Self {
            model,
            state: OptimState { adam, epoch: 0, iter: 0 },
        }
    }

    pub fn from_parts(model: Denoiser, state: OptimState) -> Self {
        Self { model, state }
    }

    /// Trains until `cfg.epochs_diff` epochs have completed, calling `on_epoch`
    /// after each one with the epoch index and its per-iteration losses.
    pub fn train(
        &mut self,
        set: &TrainingSet,
        cfg: &TrainConfig,
        schedule: &NoiseSchedule,
        on_epoch: &mut dyn FnMut(&Self, usize, &[f64]) -> Result<()>,
    ) -> Result<()> {
        self.train_until(set, cfg, schedule, cfg.epochs_diff, on_epoch)
    }

    /// Like [`DenoiserTrainer::train`] but stops once `until` epochs (capped at
    /// `cfg.epochs_diff`) have completed. The learning-rate schedule still spans
    /// all `cfg.epochs_diff` epochs, so training in slices matches one long run.
    pub fn train_until(
        &mut self,
        set: &TrainingSet,
        cfg: &TrainConfig,
        schedule: &NoiseSchedule,
        until: usize,
        on_epoch: &mut dyn FnMut(&Self, usize, &[f64]) -> Result<()>,
    ) -> Result<()> {
        cfg.validate()?;
        check_model_data(self.model.config(), set, schedule)?;
        let total = cfg.epochs_diff as u64 * batches_per_epoch(set.len(), cfg.batch_size);
        let lr = WarmupLinearDecay {
            peak: cfg.learning_rate,
            warmup: cfg.warmup_iters,
            total,
        };
        let kind = loss_fn(cfg.loss);
        while self.state.epoch < until.min(cfg.epochs_diff) {
            let epoch = self.state.epoch;
            let mut rng = epoch_rng(cfg.seed, DIFF_STREAM, epoch);
            let mut losses = Vec::new();
            run_epoch(
                &mut self.model,
                Denoiser::params,
                Denoiser::params_mut,
                set,
                cfg,
                &lr,
                &mut self.state,
                &mut rng,
                &|m: &Denoiser, tape, idx, rng| {
                    let (xs, ms) = set.gather(idx);
                    denoiser_batch_loss(m, tape, &xs, &ms, schedule, kind, rng)
                },
                &mut losses,
            )?;
            on_epoch(self, epoch, &losses)?;
        }
        Ok(())
    }
}

/// Trains a fresh denoiser on an imputed training set.
pub fn train_denoiser(
    set: &TrainingSet,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    model_cfg: DenoiserConfig,
) -> Result<(Denoiser, LossTrace)> {
    let model = Denoiser::new(model_cfg, cfg.seed)?;
    let mut trainer = DenoiserTrainer::new(model, cfg);
    let mut trace = LossTrace::default();
    trainer.train(set, cfg, schedule, &mut |_, epoch, losses| {
        trace.extend_epoch(epoch, losses.to_vec());
        Ok(())
    })?;
    Ok((trainer.model, trace))
}
