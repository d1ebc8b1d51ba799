//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records one forward evaluation. Every node holds its value; the
//! backward sweep walks the nodes in reverse creation order and accumulates
//! gradients only for nodes that depend on a differentiable leaf. Parameters
//! are referenced from a [`ParamStore`] rather than copied.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFn {
    Squared,
    Absolute,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Attention(Box<AttentionCache>),
    MaskedLoss { pred: Var, dpred: Array2<f64> },
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    q_block: usize,
    kv_block: usize,
    probs: Vec<Array2<f64>>,
}

enum Value {
    Owned(Array2<f64>),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    train_params: bool,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
    param_nodes: Vec<(usize, ParamId)>,
}

impl Grads {
    /// Gradient with respect to node `v`, or `None` if it does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }

    /// Per-parameter gradients, summed over every use of the parameter.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Array2<f64>> {
        let mut out: Vec<Array2<f64>> = store.iter().map(|p| Array2::zeros(p.dim())).collect();
        for &(node, id) in &self.param_nodes {
            if let Some(g) = &self.grads[node] {
                out[id.index()] += g;
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'p> Tape<'p> {
    /// `train_params` makes parameter leaves differentiable.
    pub fn new(store: &'p ParamStore, train_params: bool) -> Self {
        Self {
            store,
            train_params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: self.train_params,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a + bias` with a `1 × c` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let out = self.value(a) + self.value(bias);
        let ng = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddRow(a, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()), Op::Gelu(a))
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let ng = self.needs(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    /// Each row repeated `times` times consecutively: `[r0, r0, r1, r1, ...]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let mut out = Array2::zeros((av.nrows() * times, av.ncols()));
        for (i, row) in av.rows().into_iter().enumerate() {
            for k in 0..times {
                out.row_mut(i * times + k).assign(&row);
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::RepeatRows(a, times), ng)
    }

    /// The whole matrix stacked `times` times: `[A; A; ...]`.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let views: Vec<ArrayView2<f64>> = (0..times).map(|_| av.view()).collect();
        let out = concatenate(Axis(0), &views).expect("identical shapes");
        let ng = self.needs(a);
        self.push(out, Op::TileRows(a, times), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Multi-head scaled dot-product attention over independent sequences.
    ///
    /// `q` stacks sequences of `q_block` rows, `k` and `v` sequences of
    /// `kv_block` rows; sequence `b` of the queries attends only to sequence `b`
    /// of the keys. The feature axis is split evenly across `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, q_block: usize, kv_block: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "feature dim must divide into heads");
        assert_eq!(qv.nrows() % q_block, 0);
        let batch = qv.nrows() / q_block;
        assert_eq!(kv.nrows(), batch * kv_block);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros(qv.dim());
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let (qr, kr) = (b * q_block..(b + 1) * q_block, b * kv_block..(b + 1) * kv_block);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![qr.clone(), cols.clone()]);
                let ks = kv.slice(s![kr.clone(), cols.clone()]);
                let vs = vv.slice(s![kr.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t());
                for mut row in p.rows_mut() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) * scale;
                    let mut sum = 0.0;
                    row.mapv_inplace(|x| {
                        let e = (x * scale - max).exp();
                        sum += e;
                        e
                    });
                    row.mapv_inplace(|x| x / sum);
                }
                out.slice_mut(s![qr.clone(), cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                q_block,
                kv_block,
                probs,
            })),
            ng,
        )
    }

    /// `Σ mask·ℓ(pred − target) / Σ mask` as a `1 × 1` node.
    pub fn masked_loss(&mut self, pred: Var, target: &Array2<f64>, mask: &Array2<f64>, kind: LossFn) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        assert_eq!(pv.dim(), mask.dim());
        let count = mask.sum().max(1.0);
        let mut total = 0.0;
        let mut dpred = Array2::zeros(pv.dim());
        Zip::from(&mut dpred).and(pv).and(target).and(mask).for_each(|g, &p, &t, &m| {
            if m != 0.0 {
                let d = p - t;
                match kind {
                    LossFn::Squared => {
                        total += d * d;
                        *g = 2.0 * d / count;
                    }
                    LossFn::Absolute => {
                        total += d.abs();
                        *g = if d > 0.0 {
                            1.0 / count
                        } else if d < 0.0 {
                            -1.0 / count
                        } else {
                            0.0
                        };
                    }
                }
            }
        });
        let ng = self.needs(pred);
        self.push(Array2::from_elem((1, 1), total / count), Op::MaskedLoss { pred, dpred }, ng)
    }

    /// Back-propagates `seed` (the gradient of some scalar with respect to `out`).
    pub fn backward(&self, out: Var, seed: Array2<f64>) -> Grads {
        assert_eq!(seed.dim(), self.value(out).dim(), "seed shape must match output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut param_nodes = Vec::new();

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                param_nodes.push((idx, id));
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], self.value(*a).t().dot(&g));
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], -&g);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], &g * self.value(*a));
                    }
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx));
                    let d = Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                    accumulate(&mut grads[a.0], d);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(idx));
                    let d = Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                    accumulate(&mut grads[a.0], d);
                }
                Op::Silu(a) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Gelu(a) => {
                    let d = Zip::from(&g).and(self.value(*a)).map_collect(|&g, &x| {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let th = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = self.value(Var(idx));
                    let cols = y.ncols() as f64;
                    let mut d = g;
                    for ((mut drow, yrow), &inv) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let mean_g = drow.sum() / cols;
                        let mean_gy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|dg, &yv| *dg = inv * (*dg - mean_g - yv * mean_gy));
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::RepeatRows(a, times) => {
                    let av = self.value(*a);
                    let mut d = Array2::zeros(av.dim());
                    for (i, row) in g.rows().into_iter().enumerate() {
                        let mut target = d.row_mut(i / times);
                        target += &row;
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::TileRows(a, times) => {
                    let rows = self.value(*a).nrows();
                    let mut d = g.slice(s![0..rows, ..]).to_owned();
                    for k in 1..*times {
                        d += &g.slice(s![k * rows..(k + 1) * rows, ..]);
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads[a.0], d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads[a.0], d);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).nrows();
                        if self.needs(p) {
                            accumulate(&mut grads[p.0], g.slice(s![offset..offset + r, ..]).to_owned());
                        }
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).ncols();
                        if self.needs(p) {
                            accumulate(&mut grads[p.0], g.slice(s![.., offset..offset + c]).to_owned());
                        }
                        offset += c;
                    }
                }
                Op::Attention(cache) => self.attention_backward(cache, &g, &mut grads),
                Op::MaskedLoss { pred, dpred } => {
                    accumulate(&mut grads[pred.0], dpred * g[[0, 0]]);
                }
            }
        }
        Grads { grads, param_nodes }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let d = qv.ncols();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = qv.nrows() / c.q_block;
        let mut dq = Array2::zeros(qv.dim());
        let mut dk = Array2::zeros(kv.dim());
        let mut dv = Array2::zeros(vv.dim());
        for b in 0..batch {
            let (qr, kr) = (b * c.q_block..(b + 1) * c.q_block, b * c.kv_block..(b + 1) * c.kv_block);
            for h in 0..c.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &c.probs[b * c.heads + h];
                let go = g.slice(s![qr.clone(), cols.clone()]);
                let qs = qv.slice(s![qr.clone(), cols.clone()]);
                let ks = kv.slice(s![kr.clone(), cols.clone()]);
                let vs = vv.slice(s![kr.clone(), cols.clone()]);
                dv.slice_mut(s![kr.clone(), cols.clone()]).assign(&p.t().dot(&go));
                let dp = go.dot(&vs.t());
                // dS = P ⊙ (dP − rowsum(P ⊙ dP))
                let mut ds = p * &dp;
                for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                    let dot: f64 = row.sum();
                    let prow = p.row(i);
                    Zip::from(&mut row).and(&prow).for_each(|v, &pv| *v -= pv * dot);
                }
                ds.mapv_inplace(|x| x * scale);
                dq.slice_mut(s![qr.clone(), cols.clone()]).assign(&ds.dot(&ks));
                dk.slice_mut(s![kr.clone(), cols.clone()]).assign(&ds.t().dot(&qs));
            }
        }
        if self.needs(c.q) {
            accumulate(&mut grads[c.q.0], dq);
        }
        if self.needs(c.k) {
            accumulate(&mut grads[c.k.0], dk);
        }
        if self.needs(c.v) {
            accumulate(&mut grads[c.v.0], dv);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
