//! Transformer building blocks: scaled dot-product and multi-head attention,
//! position-wise feed-forward, shared embeddings with sinusoidal positions,
//! and the residual + layer-norm sublayer wrapper.

use cat_tensor::{ParamId, Scalar, Session, Tensor, Var};

use crate::error::{contract, Result};
use crate::init::Builder;

const LN_EPS: f64 = 1e-6;

/// Which key positions a query may attend to.
#[derive(Clone, Copy, Debug, Default)]
pub enum Mask<'a> {
    #[default]
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// `true` marks a padded key, excluded for every query.
    Keys(&'a [bool]),
}

impl Mask<'_> {
    fn build(&self, q: usize, k: usize) -> Result<Option<Vec<bool>>> {
        match self {
            Mask::None if k > 0 => Ok(None),
            Mask::None => Ok(Some(Vec::new())),
            Mask::Causal => Ok(Some(
                (0..q).flat_map(|i| (0..k).map(move |j| j > i)).collect(),
            )),
            Mask::Keys(pad) => {
                if pad.len() != k {
                    return Err(contract(format!("key mask of length {} for {k} keys", pad.len())));
                }
                Ok(Some((0..q).flat_map(|_| pad.iter().copied()).collect()))
            }
        }
    }
}

/// Output of one attention call.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    /// `[q × k]` attention distribution (rows over unmasked keys sum to 1;
    /// fully masked rows are zero).
    pub weights: Var,
}

/// `softmax(Q·Kᵀ/√d_k)·V` with masked keys excluded before the softmax.
///
/// A query row whose keys are all masked (or a key set that is empty)
/// yields a zero output row and is counted in the graph's `masked_rows`.
pub fn attention<T: Scalar>(s: &mut Session<T>, q: Var, k: Var, v: Var, mask: Mask) -> Result<Attended> {
    let (qs, ks, vs) = (s.shape(q).to_vec(), s.shape(k).to_vec(), s.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(cat_tensor::TensorError::Shape {
            op: "attention",
            lhs: qs,
            rhs: ks,
        }
        .into());
    }
    let d_k = qs[1] as f64;
    let scores = s.matmul_nt(q, k)?;
    let scores = s.scale(scores, 1.0 / d_k.sqrt())?;
    let weights = match mask.build(qs[0], ks[0])? {
        None => s.softmax(scores, 1)?,
        Some(m) => s.masked_softmax(scores, &m)?,
    };
    let output = s.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// Dense layer `x·W + b`, `W` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = b.matrix("weight", fan_in, fan_out);
        let bias = bias.then(|| b.constant("bias", &[fan_out], 0.0));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let mut y = s.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = s.param(b);
            y = s.add_row(y, b)?;
        }
        Ok(y)
    }
}

/// Multi-head attention: per-head projections of Q, K, V, scaled dot-product
/// attention in each head, concatenation, and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHeadOutput {
    pub output: Var,
    pub head_weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, hidden: usize, heads: usize) -> Self {
        Self {
            w_q: b.matrix("w_q", hidden, hidden),
            w_k: b.matrix("w_k", hidden, hidden),
            w_v: b.matrix("w_v", hidden, hidden),
            w_o: b.matrix("w_o", hidden, hidden),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, q: Var, k: Var, v: Var, mask: Mask) -> Result<MultiHeadOutput> {
        let hidden = s.store().get(self.w_q).shape()[0];
        for x in [q, k, v] {
            if s.shape(x).len() != 2 || s.shape(x)[1] != hidden {
                return Err(cat_tensor::TensorError::Shape {
                    op: "multi_head",
                    lhs: s.shape(x).to_vec(),
                    rhs: vec![hidden],
                }
                .into());
            }
        }
        let (wq, wk, wv, wo) = (
            s.param(self.w_q),
            s.param(self.w_k),
            s.param(self.w_v),
            s.param(self.w_o),
        );
        let qp = s.matmul(q, wq)?;
        let kp = s.matmul(k, wk)?;
        let vp = s.matmul(v, wv)?;
        let d = hidden / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * d, (h + 1) * d);
            let qh = s.slice_cols(qp, lo, hi)?;
            let kh = s.slice_cols(kp, lo, hi)?;
            let vh = s.slice_cols(vp, lo, hi)?;
            let a = attention(s, qh, kh, vh, mask)?;
            outs.push(a.output);
            head_weights.push(a.weights);
        }
        let cat = if outs.len() == 1 { outs[0] } else { s.concat_cols(&outs)? };
        let output = s.matmul(cat, wo)?;
        Ok(MultiHeadOutput { output, head_weights })
    }
}

/// Position-wise `ReLU(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, hidden: usize, filter: usize) -> Self {
        Self {
            inner: Linear::new(&mut b.scope("inner"), hidden, filter, true),
            outer: Linear::new(&mut b.scope("outer"), filter, hidden, true),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(s, x)?;
        let h = s.relu(h)?;
        self.outer.forward(s, h)
    }
}

/// Residual connection plus layer normalization: `LN(x + dropout(f(x)))`.
#[derive(Clone, Debug)]
pub struct Sublayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Sublayer {
    pub fn new(b: &mut Builder, hidden: usize) -> Self {
        Self {
            gamma: b.constant("ln_gamma", &[hidden], 1.0),
            beta: b.constant("ln_beta", &[hidden], 0.0),
        }
    }

    pub fn wrap<T: Scalar>(&self, s: &mut Session<T>, residual: Var, out: Var, dropout: f64) -> Result<Var> {
        let out = s.dropout(out, dropout)?;
        let sum = s.add(residual, out)?;
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        Ok(s.layer_norm(sum, g, b, LN_EPS)?)
    }
}

/// Multi-head attention with its sublayer wrapping; the query is the
/// residual stream.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm: Sublayer,
}

impl AttentionBlock {
    pub fn new(b: &mut Builder, hidden: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadAttention::new(&mut b.scope("attn"), hidden, heads),
            norm: Sublayer::new(b, hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, q: Var, kv: Var, mask: Mask, dropout: f64) -> Result<Var> {
        let a = self.attn.forward(s, q, kv, kv, mask)?;
        self.norm.wrap(s, q, a.output, dropout)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForwardBlock {
    pub ff: FeedForward,
    pub norm: Sublayer,
}

impl FeedForwardBlock {
    pub fn new(b: &mut Builder, hidden: usize, filter: usize) -> Self {
        Self {
            ff: FeedForward::new(&mut b.scope("ff"), hidden, filter),
            norm: Sublayer::new(b, hidden),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, dropout: f64) -> Result<Var> {
        let y = self.ff.forward(s, x)?;
        self.norm.wrap(s, x, y, dropout)
    }
}

/// Sinusoidal positional encoding, `[len × hidden]`.
pub fn positional_encoding<T: Scalar>(len: usize, hidden: usize) -> Tensor<T> {
    let mut data = vec![0.0f64; len * hidden];
    for p in 0..len {
        for i in (0..hidden).step_by(2) {
            let angle = p as f64 / 10000f64.powf(i as f64 / hidden as f64);
            data[p * hidden + i] = angle.sin();
            if i + 1 < hidden {
                data[p * hidden + i + 1] = angle.cos();
            }
        }
    }
    Tensor::from_f64(vec![len, hidden], &data).expect("shape")
}

/// Token embedding table shared by document, history, utterance and
/// response, plus positional encoding.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub table: ParamId,
    pub hidden: usize,
    pub max_len: usize,
    pub positional: bool,
}

impl Embedder {
    pub fn new(b: &mut Builder, vocab: usize, hidden: usize, max_len: usize, positional: bool) -> Self {
        Self {
            table: b.normal("table", &[vocab, hidden], 1.0),
            hidden,
            max_len,
            positional,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.max_len {
            return Err(contract(format!(
                "sequence of {} tokens exceeds maximum {}",
                ids.len(),
                self.max_len
            )));
        }
        let vocab = s.store().get(self.table).shape()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let table = s.param(self.table);
        let x = s.gather(table, ids)?;
        if !self.positional || ids.is_empty() {
            return Ok(x);
        }
        let pe = s.constant(positional_encoding(ids.len(), self.hidden));
        Ok(s.add(x, pe)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use approx::assert_abs_diff_eq;
    use cat_tensor::{Graph, ParamStore};

    fn store_with<F: FnOnce(&mut Builder) -> R, R>(seed: u64, f: F) -> (ParamStore<f32>, R) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let r = f(&mut Builder::new(&mut store, &mut rng));
        (store, r)
    }

    fn mat(s: &mut Session<f64>, rows: &[&[f64]]) -> Var {
        s.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn hand_case_two_by_two() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Graph::new());
        let q = mat(&mut s, &[&[1.0, 0.0]]);
        let k = mat(&mut s, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = mat(&mut s, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = attention(&mut s, q, k, v, Mask::None).unwrap();
        // brute force: exp(1/√2) / (exp(1/√2) + 1)
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        assert_abs_diff_eq!(s.value(a.weights).data()[0], w0, epsilon = 1e-12);
        assert_abs_diff_eq!(w0, 0.670, epsilon = 1e-3);
        assert_abs_diff_eq!(s.value(a.output).data()[0], w0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.value(a.output).data()[1], 1.0 - w0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_scores_give_column_mean() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Graph::new());
        let q = mat(&mut s, &[&[0.0, 0.0]]);
        let k = mat(&mut s, &[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let v = mat(&mut s, &[&[1.0], &[2.0], &[6.0]]);
        let a = attention(&mut s, q, k, v, Mask::None).unwrap();
        assert_abs_diff_eq!(s.value(a.output).data()[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn single_key_returns_its_value() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Graph::new());
        let q = mat(&mut s, &[&[5.0, -3.0], &[0.1, 0.2]]);
        let k = mat(&mut s, &[&[1.0, 1.0]]);
        let v = mat(&mut s, &[&[7.0, 8.0, 9.0]]);
        let a = attention(&mut s, q, k, v, Mask::None).unwrap();
        assert_eq!(s.value(a.output).data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn masked_and_empty_keys() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Graph::new());
        let q = mat(&mut s, &[&[1.0, 0.0]]);
        let k = mat(&mut s, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = mat(&mut s, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = attention(&mut s, q, k, v, Mask::Keys(&[false, true])).unwrap();
        assert_eq!(s.value(a.output).data(), &[1.0, 0.0]);
        let a = attention(&mut s, q, k, v, Mask::Keys(&[true, true])).unwrap();
        assert_eq!(s.value(a.output).data(), &[0.0, 0.0]);
        assert_eq!(s.masked_rows(), 1);

        let k0 = s.constant(Tensor::zeros(vec![0, 2]));
        let v0 = s.constant(Tensor::zeros(vec![0, 3]));
        let a = attention(&mut s, q, k0, v0, Mask::None).unwrap();
        assert_eq!(s.shape(a.output), &[1, 3]);
        assert!(s.value(a.output).data().iter().all(|&x| x == 0.0));
        assert_eq!(s.masked_rows(), 2);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, Graph::new());
        let x = mat(&mut s, &[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let a = attention(&mut s, x, x, x, Mask::Causal).unwrap();
        let w = s.value(a.weights);
        assert_eq!(w.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(w.at(1, 2), 0.0);
    }

    #[test]
    fn single_head_is_attention_between_linear_maps() {
        let (store, mha) = store_with(3, |b| MultiHeadAttention::new(b, 4, 1));
        let store = store.cast::<f64>();
        let mut s = Session::new(&store, Graph::new());
        let mut rng = seeded_rng(4);
        let q = s.constant(crate::testutil::rand_tensor(&mut rng, &[2, 4]));
        let kv = s.constant(crate::testutil::rand_tensor(&mut rng, &[5, 4]));
        let out = mha.forward(&mut s, q, kv, kv, Mask::None).unwrap().output;

        let (wq, wk, wv, wo) = (s.param(mha.w_q), s.param(mha.w_k), s.param(mha.w_v), s.param(mha.w_o));
        let qp = s.matmul(q, wq).unwrap();
        let kp = s.matmul(kv, wk).unwrap();
        let vp = s.matmul(kv, wv).unwrap();
        let a = attention(&mut s, qp, kp, vp, Mask::None).unwrap();
        let manual = s.matmul(a.output, wo).unwrap();
        for (x, y) in s.value(out).data().iter().zip(s.value(manual).data()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_block_heads_match_independent_attention() {
        let (mut store, mha) = store_with(5, |b| MultiHeadAttention::new(b, 4, 2));
        let eye: Vec<f32> = Tensor::<f32>::eye(4).into_data();
        for id in [mha.w_q, mha.w_k, mha.w_v, mha.w_o] {
            store.set_values(id, &eye).unwrap();
        }
        let store = store.cast::<f64>();
        let mut s = Session::new(&store, Graph::new());
        let mut rng = seeded_rng(6);
        let q = s.constant(crate::testutil::rand_tensor(&mut rng, &[3, 4]));
        let kv = s.constant(crate::testutil::rand_tensor(&mut rng, &[4, 4]));
        let out = mha.forward(&mut s, q, kv, kv, Mask::None).unwrap().output;
        let mut parts = Vec::new();
        for (lo, hi) in [(0, 2), (2, 4)] {
            let qh = s.slice_cols(q, lo, hi).unwrap();
            let kh = s.slice_cols(kv, lo, hi).unwrap();
            parts.push(attention(&mut s, qh, kh, kh, Mask::None).unwrap().output);
        }
        let want = s.concat_cols(&parts).unwrap();
        for (x, y) in s.value(out).data().iter().zip(s.value(want).data()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn multi_head_output_length_follows_query() {
        let (store, mha) = store_with(7, |b| MultiHeadAttention::new(b, 8, 4));
        let mut s = Session::new(&store, Graph::new());
        for (lq, lk) in [(1, 1), (3, 9), (6, 2)] {
            let q = s.constant(Tensor::filled(vec![lq, 8], 0.1));
            let kv = s.constant(Tensor::filled(vec![lk, 8], 0.2));
            let o = mha.forward(&mut s, q, kv, kv, Mask::None).unwrap().output;
            assert_eq!(s.shape(o), &[lq, 8]);
        }
    }

    #[test]
    fn feed_forward_examples() {
        let (mut store, ff) = store_with(1, |b| FeedForward::new(b, 1, 1));
        store.set_values(ff.inner.weight, &[1.0]).unwrap();
        store.set_values(ff.outer.weight, &[2.0]).unwrap();
        let mut s = Session::new(&store, Graph::new());
        let x = s.constant(Tensor::from_rows(&[&[3.0], &[-3.0]]).unwrap());
        let y = ff.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), &[6.0, 0.0]);

        let (mut store, ff) = store_with(2, |b| FeedForward::new(b, 4, 8));
        for id in [ff.inner.weight, ff.outer.weight] {
            let n = store.get(id).numel();
            store.set_values(id, &vec![0.0; n]).unwrap();
        }
        let mut s = Session::new(&store, Graph::new());
        let x = s.constant(Tensor::filled(vec![3, 4], 1.5));
        let y = ff.forward(&mut s, x).unwrap();
        assert!(s.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feed_forward_is_position_wise() {
        let (store, ff) = store_with(9, |b| FeedForward::new(b, 4, 6));
        let mut s = Session::new(&store, Graph::new());
        let row = [0.3, -0.2, 0.9, 0.1];
        let x = s.constant(Tensor::from_rows(&[&row, &row]).unwrap());
        let y = ff.forward(&mut s, x).unwrap();
        let v = s.value(y);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn embedding_examples() {
        let (store, emb) = store_with(11, |b| Embedder::new(b, 10, 6, 40, true));
        let mut s = Session::new(&store, Graph::new());
        let empty = emb.forward(&mut s, &[]).unwrap();
        assert_eq!(s.shape(empty), &[0, 6]);

        let x = emb.forward(&mut s, &[4, 4]).unwrap();
        let pe = positional_encoding::<f32>(2, 6);
        let v = s.value(x);
        for c in 0..6 {
            let delta = v.at(1, c) - v.at(0, c);
            assert_abs_diff_eq!(delta, pe.at(1, c) - pe.at(0, c), epsilon = 1e-6);
        }
        for c in (0..6).step_by(2) {
            assert_eq!(pe.at(0, c), 0.0);
            assert_eq!(pe.at(0, c + 1), 1.0);
        }
        let want = (1.0f64 / 10000f64.powf(2.0 / 6.0)).sin();
        assert_abs_diff_eq!(pe.at(1, 2) as f64, want, epsilon = 1e-6);

        assert!(emb.forward(&mut s, &[10]).is_err());
        assert!(emb.forward(&mut s, &vec![1; 41]).is_err());
    }
}
