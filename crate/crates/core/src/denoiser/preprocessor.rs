use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::Linear;
use crate::data::{ObservationMask, TrafficTensor};
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Var};

const RELU_BIAS: f64 = 0.1;

/// Layer widths of the imputation autoencoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessorConfig {
    pub flow_count: usize,
    /// Chunk length used when imputing a full series; matches the training windows.
    pub window_len: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Recurrent state size per direction.
    pub rnn_hidden: usize,
}

impl PreprocessorConfig {
    /// `N → N/2 → N/4`, recurrent state `N/4` per direction.
    pub fn for_shape(flow_count: usize, window_len: usize) -> Self {
        Self {
            flow_count,
            window_len,
            hidden1: (flow_count / 2).max(1),
            hidden2: (flow_count / 4).max(1),
            rnn_hidden: (flow_count / 4).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.flow_count, self.window_len, self.hidden1, self.hidden2, self.rnn_hidden].contains(&0) {
            return Err(Error::validation("autoencoder sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct GruDirection {
    input: Linear,
    uz: ParamId,
    ur: ParamId,
    un: ParamId,
    bn: ParamId,
}

impl GruDirection {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), input, 3 * hidden, 1.0, rng),
            uz: store.add_uniform(format!("{name}.uz"), (hidden, hidden), 1.0, rng),
            ur: store.add_uniform(format!("{name}.ur"), (hidden, hidden), 1.0, rng),
            un: store.add_uniform(format!("{name}.un"), (hidden, hidden), 1.0, rng),
            bn: store.add(format!("{name}.bn"), Array2::zeros((1, hidden))),
        }
    }

    /// Runs over time-major rows (`len` steps of `batch` rows); returns one state per step.
    fn run(&self, tape: &mut Tape, x: Var, batch: usize, len: usize, hidden: usize, reverse: bool) -> Vec<Var> {
        let gates = self.input.apply(tape, x);
        let (uz, ur, un, bn) = (tape.param(self.uz), tape.param(self.ur), tape.param(self.un), tape.param(self.bn));
        let mut h = tape.constant(Array2::zeros((batch, hidden)));
        let mut states = vec![h; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let g = tape.slice_rows(gates, t * batch, batch);
            let xz = tape.slice_cols(g, 0, hidden);
            let xr = tape.slice_cols(g, hidden, hidden);
            let xn = tape.slice_cols(g, 2 * hidden, hidden);
            let hz = tape.matmul(h, uz);
            let z = tape.add(xz, hz);
            let z = tape.sigmoid(z);
            let hr = tape.matmul(h, ur);
            let r = tape.add(xr, hr);
            let r = tape.sigmoid(r);
            let hn = tape.matmul(h, un);
            let hn = tape.add_row(hn, bn);
            let rn = tape.mul(r, hn);
            let n = tape.add(xn, rn);
            let n = tape.tanh(n);
            // h' = n + z ⊙ (h − n)
            let d = tape.sub(h, n);
            let zd = tape.mul(z, d);
            h = tape.add(n, zd);
            states[t] = h;
        }
        states
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    fc1: Linear,
    fc2: Linear,
    forward: GruDirection,
    backward: GruDirection,
    out: Linear,
}

/// Autoencoder that fills missing entries: two ReLU layers, a bidirectional
/// GRU over time, and a sigmoid output layer applied per time slot.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    config: PreprocessorConfig,
    params: ParamStore,
    layout: Layout,
}

/// `N × K` sequences stacked time-major into `(K·B) × N` rows.
fn time_major(seqs: &[Array2<f64>]) -> Array2<f64> {
    let (n, k) = seqs[0].dim();
    let b = seqs.len();
    let mut out = Array2::zeros((k * b, n));
    for (i, x) in seqs.iter().enumerate() {
        for t in 0..k {
            out.row_mut(t * b + i).assign(&x.column(t));
        }
    }
    out
}

fn from_time_major(rows: &Array2<f64>, batch: usize) -> Vec<Array2<f64>> {
    let k = rows.nrows() / batch;
    (0..batch)
        .map(|i| {
            let mut x = Array2::zeros((rows.ncols(), k));
            for t in 0..k {
                x.column_mut(t).assign(&rows.row(t * batch + i));
            }
            x
        })
        .collect()
}

impl Preprocessor {
    pub fn new(config: PreprocessorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let layout = Layout {
            fc1: Linear::new(&mut p, "fc1", c.flow_count, c.hidden1, 1.0, &mut rng),
            fc2: Linear::new(&mut p, "fc2", c.hidden1, c.hidden2, 1.0, &mut rng),
            forward: GruDirection::new(&mut p, "gru_fwd", c.hidden2, c.rnn_hidden, &mut rng),
            backward: GruDirection::new(&mut p, "gru_bwd", c.hidden2, c.rnn_hidden, &mut rng),
            out: Linear::new(&mut p, "out", 2 * c.rnn_hidden, c.flow_count, 1.0, &mut rng),
        };
        // A small positive bias keeps the narrow ReLU layers from starting dead.
        for fc in [layout.fc1, layout.fc2] {
            p.get_mut(fc.b).fill(RELU_BIAS);
        }
        Ok(Self {
            config,
            params: p,
            layout,
        })
    }

    pub fn config(&self) -> &PreprocessorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn set_weights(&mut self, values: Vec<Array2<f64>>) -> Result<()> {
        self.params.replace_values(values).map_err(Error::Checkpoint)
    }

    /// Records the network on `tape` for time-major input rows.
    fn forward(&self, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Var {
        let l = &self.layout;
        let h = l.fc1.apply(tape, x);
        let h = tape.relu(h);
        let h = l.fc2.apply(tape, h);
        let h = tape.relu(h);
        let hid = self.config.rnn_hidden;
        let fwd = l.forward.run(tape, h, batch, len, hid, false);
        let bwd = l.backward.run(tape, h, batch, len, hid, true);
        let steps: Vec<Var> = fwd.into_iter().zip(bwd).map(|(f, b)| tape.concat_cols(&[f, b])).collect();
        let h = tape.concat_rows(&steps);
        let y = l.out.apply(tape, h);
        tape.sigmoid(y)
    }

    fn check(&self, seqs: &[Array2<f64>]) -> Result<(usize, usize)> {
        let Some(first) = seqs.first() else {
            return Err(Error::validation("no sequences to process"));
        };
        let (n, k) = first.dim();
        ensure_shape(n == self.config.flow_count, || {
            format!("sequence has {n} flows, autoencoder expects {}", self.config.flow_count)
        })?;
        if k == 0 {
            return Err(Error::validation("empty sequence"));
        }
        for s in seqs {
            ensure_shape(s.dim() == (n, k), || format!("sequence {:?} vs {:?}", s.dim(), (n, k)))?;
        }
        Ok((seqs.len(), k))
    }

    /// Reconstructs a batch of equal-length `N × K` sequences.
    pub fn reconstruct(&self, seqs: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        let (batch, len) = self.check(seqs)?;
        let mut tape = Tape::new(&self.params, false);
        let x = tape.constant(time_major(seqs));
        let y = self.forward(&mut tape, x, batch, len);
        Ok(from_time_major(tape.value(y), batch))
    }

    /// Reconstruction of one `N × K` sequence; entries lie in (0, 1).
    pub fn preprocess_forward(&self, seq: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.reconstruct(std::slice::from_ref(seq))?.remove(0))
    }

    /// Masked reconstruction loss of a batch, recorded on `tape` for training.
    /// Missing entries are zeroed before entering the network.
    pub(crate) fn batch_loss(&self, tape: &mut Tape, seqs: &[Array2<f64>], masks: &[Array2<f64>], kind: crate::nn::LossFn) -> Var {
        let inputs: Vec<Array2<f64>> = seqs.iter().zip(masks).map(|(x, m)| masked_input(x, m)).collect();
        let (batch, len) = (seqs.len(), seqs[0].ncols());
        let x = tape.constant(time_major(&inputs));
        let y = self.forward(tape, x, batch, len);
        tape.masked_loss(y, &time_major(&inputs), &time_major(masks), kind)
    }
}

/// Observed values with missing entries set to exactly zero.
pub(crate) fn masked_input(x: &Array2<f64>, m: &Array2<f64>) -> Array2<f64> {
    ndarray::Zip::from(x).and(m).map_collect(|&v, &b| if b == 1.0 { v } else { 0.0 })
}

/// `M ⊙ X° + (1 − M) ⊙ D(M ⊙ X°)`, processed in consecutive chunks of the
/// autoencoder's window length.
pub fn impute_dataset(pre: &Preprocessor, x: &TrafficTensor, m: &ObservationMask) -> Result<TrafficTensor> {
    ensure_shape(x.shape() == m.bits().dim(), || {
        format!("traffic {:?} vs mask {:?}", x.shape(), m.bits().dim())
    })?;
    let input = masked_input(x.values(), m.bits());
    let (n, total) = x.shape();
    let w = pre.config().window_len;
    let mut recon = Array2::zeros((n, total));
    let full = total / w;
    if full > 0 {
        let chunks: Vec<Array2<f64>> = (0..full).map(|c| input.slice(s![.., c * w..(c + 1) * w]).to_owned()).collect();
        for (c, y) in pre.reconstruct(&chunks)?.into_iter().enumerate() {
            recon.slice_mut(s![.., c * w..(c + 1) * w]).assign(&y);
        }
    }
    if full * w < total {
        let tail = input.slice(s![.., full * w..]).to_owned();
        recon.slice_mut(s![.., full * w..]).assign(&pre.preprocess_forward(&tail)?);
    }
    let out = ndarray::Zip::from(x.values())
        .and(m.bits())
        .and(&recon)
        .map_collect(|&v, &b, &r| if b == 1.0 { v } else { r });
    TrafficTensor::new(out)
}
