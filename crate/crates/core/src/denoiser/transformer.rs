use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DenoiserConfig;
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Var};

/// Gain of the output projection; keeps the initial prediction near the sigmoid midpoint.
const OUTPUT_GAIN: f64 = 1e-2;

/// Sinusoidal embedding of a diffusion step: entry `2i` is `sin(t·ω_i)`, entry
/// `2i+1` is `cos(t·ω_i)`, with `ω_i = 10000^(−2i/dim)`.
pub fn sinusoidal_step_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::validation(format!("step embedding dim must be even and positive, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let phase = t as f64 * freq;
        out[2 * i] = phase.sin();
        out[2 * i + 1] = phase.cos();
    }
    Ok(out)
}

/// `a ⊙ LayerNorm(x) + b`, where `[a | b] = cond·weight + bias` is computed per
/// batch item and broadcast over that item's `rows_per_item` consecutive rows.
pub fn adaptive_layer_norm(tape: &mut Tape, x: Var, cond: Var, weight: Var, bias: Var, rows_per_item: usize) -> Var {
    let d = tape.value(x).ncols();
    let proj = tape.matmul(cond, weight);
    let proj = tape.add_row(proj, bias);
    let a = tape.slice_cols(proj, 0, d);
    let b = tape.slice_cols(proj, d, d);
    let a = tape.repeat_rows(a, rows_per_item);
    let b = tape.repeat_rows(b, rows_per_item);
    let n = tape.layer_norm(x);
    let scaled = tape.mul(a, n);
    tape.add(scaled, b)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), (fan_in, fan_out), gain, rng);
        let b = store.add(format!("{name}.b"), Array2::zeros((1, fan_out)));
        Self { w, b }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct AdaLn {
    w: ParamId,
    b: ParamId,
}

impl AdaLn {
    /// Zero projection with scale bias 1 and shift bias 0: starts as plain normalization.
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let w = store.add(format!("{name}.w"), Array2::zeros((d, 2 * d)));
        let b = store.add(
            format!("{name}.b"),
            Array2::from_shape_fn((1, 2 * d), |(_, j)| if j < d { 1.0 } else { 0.0 }),
        );
        Self { w, b }
    }

    fn apply(&self, tape: &mut Tape, x: Var, cond: Var, rows: usize) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        adaptive_layer_norm(tape, x, cond, w, b, rows)
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, 1.0, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, context: Var, heads: usize, rows: usize) -> Var {
        let q = self.q.apply(tape, x);
        let k = self.k.apply(tape, context);
        let v = self.v.apply(tape, context);
        let a = tape.attention(q, k, v, heads, rows, rows);
        self.o.apply(tape, a)
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, ff, 1.0, rng),
            down: Linear::new(store, &format!("{name}.down"), ff, d, 1.0, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.up.apply(tape, x);
        let h = tape.gelu(h);
        self.down.apply(tape, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    norm_attn: AdaLn,
    attn: Attention,
    norm_ff: AdaLn,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    norm_self: AdaLn,
    self_attn: Attention,
    norm_cross: AdaLn,
    cross_attn: Attention,
    norm_ff: AdaLn,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    input: Linear,
    position: ParamId,
    time_in: Linear,
    time_out: Linear,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    norm_out: AdaLn,
    output: Linear,
}

impl Layout {
    fn build(cfg: &DenoiserConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (d, ff) = (cfg.model_dim, cfg.ff_dim);
        let input = Linear::new(store, "input", cfg.flow_count, d, 1.0, rng);
        let position = store.add_uniform("position", (cfg.window_len, d), 0.1, rng);
        let time_in = Linear::new(store, "time.in", d, d, 1.0, rng);
        let time_out = Linear::new(store, "time.out", d, d, 1.0, rng);
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| {
                let n = format!("enc{i}");
                EncoderBlock {
                    norm_attn: AdaLn::new(store, &format!("{n}.norm_attn"), d),
                    attn: Attention::new(store, &format!("{n}.attn"), d, rng),
                    norm_ff: AdaLn::new(store, &format!("{n}.norm_ff"), d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, ff, rng),
                }
            })
            .collect();
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| {
                let n = format!("dec{i}");
                DecoderBlock {
                    norm_self: AdaLn::new(store, &format!("{n}.norm_self"), d),
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), d, rng),
                    norm_cross: AdaLn::new(store, &format!("{n}.norm_cross"), d),
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), d, rng),
                    norm_ff: AdaLn::new(store, &format!("{n}.norm_ff"), d),
                    ff: FeedForward::new(store, &format!("{n}.ff"), d, ff, rng),
                }
            })
            .collect();
        let norm_out = AdaLn::new(store, "norm_out", d);
        let output = Linear::new(store, "output", d, cfg.flow_count, OUTPUT_GAIN, rng);
        Self {
            input,
            position,
            time_in,
            time_out,
            encoder,
            decoder,
            norm_out,
            output,
        }
    }
}

/// Transformer estimate `x̂0(x_t, t)` over windows of `N` flows by `w` time slots.
///
/// Each time slot is a token whose features are the `N` flow values. The step
/// embedding passes through a small MLP and modulates every normalization.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    layout: Layout,
}

/// Stacks `N × w` windows into `(B·w) × N` token rows.
pub(crate) fn to_tokens(xs: &[Array2<f64>]) -> Array2<f64> {
    let (n, w) = xs[0].dim();
    let mut out = Array2::zeros((xs.len() * w, n));
    for (b, x) in xs.iter().enumerate() {
        out.slice_mut(ndarray::s![b * w..(b + 1) * w, ..]).assign(&x.t());
    }
    out
}

pub(crate) fn from_tokens(tokens: &Array2<f64>, w: usize) -> Vec<Array2<f64>> {
    (0..tokens.nrows() / w)
        .map(|b| tokens.slice(ndarray::s![b * w..(b + 1) * w, ..]).t().to_owned())
        .collect()
}

impl Denoiser {
    /// Freshly initialized weights drawn from `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, &mut rng);
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Checks window shapes, step range and finiteness.
    pub(crate) fn check_inputs(&self, xs: &[Array2<f64>], ts: &[usize]) -> Result<()> {
        let (n, w) = (self.config.flow_count, self.config.window_len);
        if xs.is_empty() {
            return Err(Error::validation("denoise called with no windows"));
        }
        ensure_shape(xs.len() == ts.len(), || format!("{} windows but {} steps", xs.len(), ts.len()))?;
        for x in xs {
            ensure_shape(x.dim() == (n, w), || format!("window {:?}, model expects {:?}", x.dim(), (n, w)))?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite value in denoiser input"));
            }
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.config.diffusion_steps) {
            return Err(Error::validation(format!(
                "step {t} outside 1..={}",
                self.config.diffusion_steps
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; `tokens` is `(B·w) × N`. Returns `(B·w) × N` in (0, 1).
    pub(crate) fn forward(&self, tape: &mut Tape, tokens: Var, ts: &[usize]) -> Var {
        let cfg = &self.config;
        let (d, w, heads) = (cfg.model_dim, cfg.window_len, cfg.heads);
        let batch = ts.len();
        let l = &self.layout;

        let mut emb = Array2::zeros((batch, d));
        for (b, &t) in ts.iter().enumerate() {
            let e = sinusoidal_step_embedding(t, d).expect("model_dim validated even");
            emb.row_mut(b).assign(&ndarray::ArrayView1::from(&e));
        }
        let emb = tape.constant(emb);
        let c = l.time_in.apply(tape, emb);
        let c = tape.silu(c);
        let c = l.time_out.apply(tape, c);
        let cond = tape.silu(c);

        let h = l.input.apply(tape, tokens);
        let pos = tape.param(l.position);
        let pos = tape.tile_rows(pos, batch);
        let h0 = tape.add(h, pos);

        let mut h = h0;
        for blk in &l.encoder {
            let n = blk.norm_attn.apply(tape, h, cond, w);
            let a = blk.attn.apply(tape, n, n, heads, w);
            h = tape.add(h, a);
            let n = blk.norm_ff.apply(tape, h, cond, w);
            let f = blk.ff.apply(tape, n);
            h = tape.add(h, f);
        }
        let enc = tape.layer_norm(h);

        let mut g = h0;
        for blk in &l.decoder {
            let n = blk.norm_self.apply(tape, g, cond, w);
            let a = blk.self_attn.apply(tape, n, n, heads, w);
            g = tape.add(g, a);
            let n = blk.norm_cross.apply(tape, g, cond, w);
            let a = blk.cross_attn.apply(tape, n, enc, heads, w);
            g = tape.add(g, a);
            let n = blk.norm_ff.apply(tape, g, cond, w);
            let f = blk.ff.apply(tape, n);
            g = tape.add(g, f);
        }
        let n = l.norm_out.apply(tape, g, cond, w);
        let out = l.output.apply(tape, n);
        tape.sigmoid(out)
    }

    /// `x̂0` for a single `N × w` window at step `t`.
    pub fn denoise(&self, x_t: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        Ok(self.denoise_batch(std::slice::from_ref(x_t), &[t])?.remove(0))
    }

    /// `x̂0` for several windows, each with its own step.
    pub fn denoise_batch(&self, xs: &[Array2<f64>], ts: &[usize]) -> Result<Vec<Array2<f64>>> {
        self.check_inputs(xs, ts)?;
        let mut tape = Tape::new(&self.params, false);
        let tokens = tape.constant(to_tokens(xs));
        let out = self.forward(&mut tape, tokens, ts);
        Ok(from_tokens(tape.value(out), self.config.window_len))
    }

    /// Gradient of `r(x̂0(x_t, t))` with respect to `x_t`, where `residual_grad`
    /// maps `x̂0` to `∂r/∂x̂0`.
    pub fn denoise_input_gradient(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        residual_grad: impl Fn(&Array2<f64>) -> Array2<f64>,
    ) -> Result<Array2<f64>> {
        let (_, mut grads) = self.denoise_batch_with_input_grad(std::slice::from_ref(x_t), &[t], &|_, x0| residual_grad(x0))?;
        Ok(grads.remove(0))
    }

    /// Predictions together with `∇_{x_t} r_b(x̂0_b)` for every window `b`;
    /// `seed(b, x̂0_b)` returns `∂r_b/∂x̂0_b`.
    pub fn denoise_batch_with_input_grad(
        &self,
        xs: &[Array2<f64>],
        ts: &[usize],
        seed: &dyn Fn(usize, &Array2<f64>) -> Array2<f64>,
    ) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
        self.check_inputs(xs, ts)?;
        let w = self.config.window_len;
        let mut tape = Tape::new(&self.params, false);
        let tokens = tape.input(to_tokens(xs));
        let out = self.forward(&mut tape, tokens, ts);
        let preds = from_tokens(tape.value(out), w);
        let seeds: Vec<Array2<f64>> = preds.iter().enumerate().map(|(b, p)| seed(b, p)).collect();
        for s in &seeds {
            ensure_shape(s.dim() == preds[0].dim(), || format!("residual gradient has shape {:?}", s.dim()))?;
        }
        let grads = tape.backward(out, to_tokens(&seeds));
        let g = grads
            .get(tokens)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.value(tokens).dim()));
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite gradient of the guidance residual"));
        }
        Ok((preds, from_tokens(&g, w)))
    }

    /// Replaces all weights, checking names and shapes against this configuration.
    pub(crate) fn set_weights(&mut self, values: Vec<Array2<f64>>) -> Result<()> {
        self.params.replace_values(values).map_err(Error::Checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            model_dim: 16,
            heads: 4,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ff_dim: 32,
            window_len: 4,
            flow_count: 9,
            diffusion_steps: 50,
        }
    }

    fn random_window(n: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, w), || rng.random_range(-1.5..1.5))
    }

    #[test]
    fn embedding_at_zero_and_parity() {
        let e = sinusoidal_step_embedding(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_step_embedding(3, 7).is_err());
    }

    #[test]
    fn embeddings_are_distinct_and_bounded() {
        let dim = 96;
        let embs: Vec<Vec<f64>> = (0..1000).map(|t| sinusoidal_step_embedding(t, dim).unwrap()).collect();
        for e in &embs {
            assert!(e.iter().map(|x| x * x).sum::<f64>().sqrt() <= (dim as f64).sqrt() + 1e-12);
        }
        let mut min = f64::INFINITY;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                min = min.min(d);
            }
        }
        assert!(min > 1e-6, "closest pair of embeddings at squared distance {min}");
    }

    #[test]
    fn tokens_round_trip() {
        let xs = vec![random_window(3, 4, 1), random_window(3, 4, 2)];
        let t = to_tokens(&xs);
        assert_eq!(t.dim(), (8, 3));
        assert_eq!(t[[5, 2]], xs[1][[2, 1]]);
        assert_eq!(from_tokens(&t, 4), xs);
    }

    #[test]
    fn output_in_open_unit_interval_and_pure() {
        let m = Denoiser::new(small(), 3).unwrap();
        let x = random_window(9, 4, 4).mapv(|v| v * 100.0);
        let a = m.denoise(&x, 10).unwrap();
        let b = m.denoise(&x, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn single_entry_perturbation_moves_output() {
        let m = Denoiser::new(small(), 5).unwrap();
        let x = random_window(9, 4, 6);
        let mut y = x.clone();
        y[[4, 2]] += 0.5;
        assert_ne!(m.denoise(&x, 20).unwrap(), m.denoise(&y, 20).unwrap());
    }

    #[test]
    fn batch_matches_single() {
        let m = Denoiser::new(small(), 7).unwrap();
        let xs = vec![random_window(9, 4, 8), random_window(9, 4, 9)];
        let batch = m.denoise_batch(&xs, &[3, 40]).unwrap();
        let a = m.denoise(&xs[0], 3).unwrap();
        let b = m.denoise(&xs[1], 40).unwrap();
        for (p, q) in batch[0].iter().zip(&a).chain(batch[1].iter().zip(&b)) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_nan_and_bad_step() {
        let m = Denoiser::new(small(), 1).unwrap();
        let mut x = random_window(9, 4, 1);
        assert!(m.denoise(&x, 0).is_err());
        assert!(m.denoise(&x, 51).is_err());
        x[[0, 0]] = f64::NAN;
        assert!(matches!(m.denoise(&x, 5), Err(Error::Numeric(_))));
        assert!(m.denoise(&Array2::zeros((9, 5)), 5).is_err());
    }

    #[test]
    fn residual_independent_of_output_has_zero_gradient() {
        let m = Denoiser::new(small(), 2).unwrap();
        let x = random_window(9, 4, 3);
        let g = m.denoise_input_gradient(&x, 7, |x0| Array2::zeros(x0.dim())).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        // 108 probes: every entry of three windows at different steps.
        let cfg = small();
        let m = Denoiser::new(cfg.clone(), 11).unwrap();
        let mut probes = 0;
        for (k, t) in [(0u64, 1usize), (1, 25), (2, 50)] {
            let x = random_window(9, 4, 100 + k);
            let y = random_window(9, 4, 200 + k).mapv(|v| v.abs() / 1.5);
            let r = |x0: &Array2<f64>| (x0 - &y).mapv(|d| d * d).sum();
            let g = m.denoise_input_gradient(&x, t, |x0| (x0 - &y).mapv(|d| 2.0 * d)).unwrap();
            let h = 1e-4;
            for i in 0..9 {
                for j in 0..4 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[[i, j]] += h;
                    xm[[i, j]] -= h;
                    let fd = (r(&m.denoise(&xp, t).unwrap()) - r(&m.denoise(&xm, t).unwrap())) / (2.0 * h);
                    let an = g[[i, j]];
                    assert!(
                        (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                        "probe ({i},{j}) t={t}: fd {fd} vs analytic {an}"
                    );
                    probes += 1;
                }
            }
        }
        assert!(probes >= 100);
    }

    #[test]
    fn adaptive_norm_with_identity_projection_is_plain_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Array2::zeros((3, 8)));
        let b = store.add("b", Array2::from_shape_fn((1, 8), |(_, j)| if j < 4 { 1.0 } else { 0.0 }));
        let mut tape = Tape::new(&store, false);
        let x = tape.constant(random_window(4, 4, 1));
        let cond = tape.constant(random_window(2, 3, 2));
        let (wv, bv) = (tape.param(w), tape.param(b));
        let out = adaptive_layer_norm(&mut tape, x, cond, wv, bv, 2);
        let plain = tape.layer_norm(x);
        assert_eq!(tape.value(out), tape.value(plain));

        let flat = tape.constant(Array2::from_elem((2, 4), 3.7));
        let out = adaptive_layer_norm(&mut tape, flat, cond, wv, bv, 1);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adaptive_norm_gradient_wrt_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let store = ParamStore::new();
        let x = random_window(6, 4, 10);
        let wm = Array2::from_shape_simple_fn((3, 8), || rng.random_range(-1.0..1.0));
        let bm = Array2::from_shape_simple_fn((1, 8), || rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let eval = |e: &Array2<f64>, want_grad: bool| {
            let mut tape = Tape::new(&store, false);
            let xv = tape.constant(x.clone());
            let ev = if want_grad { tape.input(e.clone()) } else { tape.constant(e.clone()) };
            let (wv, bv) = (tape.constant(wm.clone()), tape.constant(bm.clone()));
            let out = adaptive_layer_norm(&mut tape, xv, ev, wv, bv, 3);
            let f = (tape.value(out) * &r).sum();
            let g = want_grad.then(|| tape.backward(out, r.clone()).get(ev).unwrap().clone());
            (f, g)
        };
        let e = random_window(2, 3, 11);
        let g = eval(&e, true).1.unwrap();
        let h = 1e-5;
        for i in 0..2 {
            for j in 0..3 {
                let mut ep = e.clone();
                let mut em = e.clone();
                ep[[i, j]] += h;
                em[[i, j]] -= h;
                let fd = (eval(&ep, false).0 - eval(&em, false).0) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() <= 1e-4 * fd.abs().max(1e-6));
            }
        }
    }
}
