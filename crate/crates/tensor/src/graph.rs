//! Tape-based reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse and accumulates gradients into every node that requires
//! them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result, TensorError};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: T },
    ScaleBy { x: Var, s: Var },
    MulCol { x: Var, w: Var },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: T, probs: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Reshape(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    name: &'static str,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    dropout_rng: Option<ChaCha8Rng>,
    masked_rows: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            dropout_rng: None,
            masked_rows: 0,
        }
    }

    /// A graph that records no backward information (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Enables dropout, drawing masks from a seeded stream.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    /// Drops every node created after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of attention rows whose keys were all masked so far. Such rows
    /// come out as zeros.
    pub fn masked_rows(&self) -> usize {
        self.masked_rows
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Name of the operation that produced `v` (`"leaf"` for inputs).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Every node in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf; it is tracked iff the tensor has `requires_grad` set and
    /// the graph records gradients. Any gradient the tensor carries is
    /// dropped, so backward results never include stale values.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.zero_grad();
        let requires_grad = tensor.requires_grad() && self.grad_enabled;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            name: "leaf",
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            name: op_name,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = "matmul";
        let (m, k) = self.dims2(op, a)?;
        let (br, bc) = self.dims2(op, b)?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(
            self.value(a).data(),
            (m, k),
            Layout::Plain,
            self.value(b).data(),
            (br, bc),
            if trans_b { Layout::Transposed } else { Layout::Plain },
            out.data_mut(),
            false,
        );
        self.push(op, out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    // ---- elementwise ----

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let vx = self.value(x);
        Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a bias vector (numel = cols) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        out.zero_grad();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        self.push("add_row", out, Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let out = self.map(x, |v| v * c);
        self.push("scale", out, Op::Scale { x, c }, &[x])
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::Shape {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).data()[0];
        let out = self.map(x, |v| v * sv);
        self.push("scale_by", out, Op::ScaleBy { x, s }, &[x, s])
    }

    /// Scales row `r` of `x` by `w[r]`; `w` has one value per row.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims2("mul_col", x)?;
        if self.value(w).numel() != m {
            return Err(TensorError::Shape {
                op: "mul_col",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        out.zero_grad();
        let wv = self.value(w).data().to_vec();
        for (r, row) in out.data_mut().chunks_mut(n.max(1)).enumerate().take(m) {
            row.iter_mut().for_each(|v| *v *= wv[r]);
        }
        self.push("mul_col", out, Op::MulCol { x, w }, &[x, w])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.tanh());
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    // ---- normalization ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = crate::tensor::softmax(self.value(x), axis)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Row-wise softmax over the last axis. `masked[r * cols + c]` excludes
    /// that entry; a row with every entry excluded becomes all zeros and is
    /// counted in [`Graph::masked_rows`].
    pub fn masked_softmax(&mut self, x: Var, masked: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2("masked_softmax", x)?;
        if masked.len() != m * n {
            return Err(TensorError::Shape {
                op: "masked_softmax",
                lhs: vec![m, n],
                rhs: vec![masked.len()],
            });
        }
        let mut out = self.value(x).clone();
        out.zero_grad();
        let mut flagged = 0;
        let data = out.data_mut();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let mask = &masked[r * n..(r + 1) * n];
            let mut max = T::neg_infinity();
            for (v, &skip) in row.iter().zip(mask) {
                if !skip {
                    max = max.max(*v);
                }
            }
            if max == T::neg_infinity() {
                row.iter_mut().for_each(|v| *v = T::zero());
                flagged += 1;
                continue;
            }
            let mut sum = T::zero();
            for (v, &skip) in row.iter_mut().zip(mask) {
                *v = if skip { T::zero() } else { (*v - max).exp() };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.masked_rows += flagged;
        self.push("masked_softmax", out, Op::MaskedSoftmax { x }, &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != cols {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64_lossy(eps);
        let vx = self.value(x);
        let rows = if cols == 0 { 0 } else { vx.numel() / cols };
        let n = T::from_usize(cols).unwrap_or_else(T::one);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(vx.shape().to_vec());
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data_mut()[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    // ---- structure ----

    /// Concatenates matrices along the row (sequence) dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat_rows of nothing"))?;
        let (_, cols) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Concatenates matrices along the column (feature) dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract("concat_cols of nothing"))?;
        let (rows, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for r in 0..rows {
                out.data_mut()[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if start > end || end > m {
            return Err(contract(format!("slice_rows {start}..{end} of {m} rows")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], data)?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if start > end || end > n {
            return Err(contract(format!("slice_cols {start}..{end} of {n} cols")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    // ---- reductions ----

    /// Mean over rows: `[m × n] -> [1 × n]`. Requires `m > 0`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("mean_rows", x)?;
        if m == 0 {
            return Err(contract("mean over an empty sequence"));
        }
        let src = self.value(x).data();
        let mut out = Tensor::zeros(vec![1, n]);
        for r in 0..m {
            for c in 0..n {
                out.data_mut()[c] += src[r * n + c];
            }
        }
        let mf = T::from_usize(m).expect("row count");
        out.data_mut().iter_mut().for_each(|v| *v /= mf);
        self.push("mean_rows", out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ---- lookup / loss / regularization ----

    /// Row lookup into `table` (`[vocab × h]`).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.dims2("gather", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(contract(format!("token id {bad} outside table of {v} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * h);
        for &i in ids {
            data.extend_from_slice(&src[i * h..(i + 1) * h]);
        }
        let out = Tensor::new(vec![ids.len(), h], data)?;
        self.push(
            "gather",
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Summed token-level cross entropy of `logits` (`[r × V]`) against
    /// `targets`, optionally label-smoothed. Uses log-sum-exp, so no
    /// probability is ever taken to a literal `ln 0`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (r, v) = self.dims2("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vec![r, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(contract(format!("target {bad} outside vocabulary of {v}")));
        }
        let eps = T::from_f64_lossy(smoothing);
        let vf = T::from_usize(v).expect("vocab");
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); r * v];
        let mut loss = T::zero();
        for i in 0..r {
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            let nll = lse - row[targets[i]];
            let mean_nll = if eps > T::zero() {
                row.iter().map(|&z| lse - z).sum::<T>() / vf
            } else {
                T::zero()
            };
            loss += (T::one() - eps) * nll + eps * mean_nll;
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                probs,
            },
            &[logits],
        )
    }

    /// Inverted dropout. A no-op when `rate == 0` or the graph has no
    /// dropout stream (inference).
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(contract(format!("dropout rate {rate} must be < 1")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    // ---- backward ----

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// tracked node, so calling twice without clearing doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            self.nodes[i].value.accumulate_grad(&g)?;
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let (br, bc) = (vb.shape()[0], vb.shape()[1]);
                let n = if *trans_b { br } else { bc };
                // dA = dC · op(B)ᵀ
                acc(*a, &mut |buf| {
                    let layout = if *trans_b { Layout::Plain } else { Layout::Transposed };
                    gemm(g, (m, n), Layout::Plain, vb.data(), (br, bc), layout, buf, true);
                });
                acc(*b, &mut |buf| {
                    if *trans_b {
                        // B is [n×k]: dB = dCᵀ · A
                        gemm(g, (m, n), Layout::Transposed, va.data(), (m, k), Layout::Plain, buf, true);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(va.data(), (m, k), Layout::Transposed, g, (m, n), Layout::Plain, buf, true);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*x, &mut |buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[c * m + r] += g[r * n + c];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                acc(*a, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] * vb[j];
                    }
                });
                acc(*b, &mut |buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] * va[j];
                    }
                });
            }
            Op::AddRow { x, bias } => {
                acc(*x, &mut |buf| add_into(buf, g));
                acc(*bias, &mut |buf| {
                    let cols = buf.len();
                    for row in g.chunks(cols.max(1)) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Scale { x, c } => acc(*x, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
            }),
            Op::ScaleBy { x, s } => {
                let sv = nodes[s.0].value.data()[0];
                let vx = nodes[x.0].value.data();
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * sv));
                acc(*s, &mut |buf| buf[0] += g.iter().zip(vx).map(|(&a, &b)| a * b).sum::<T>());
            }
            Op::MulCol { x, w } => {
                let vx = &nodes[x.0].value;
                let wv = nodes[w.0].value.data();
                let n = vx.cols();
                acc(*x, &mut |buf| {
                    for (r, (drow, grow)) in buf.chunks_mut(n.max(1)).zip(g.chunks(n.max(1))).enumerate() {
                        drow.iter_mut().zip(grow).for_each(|(d, &gg)| *d += gg * wv[r]);
                    }
                });
                acc(*w, &mut |buf| {
                    for r in 0..buf.len() {
                        let xr = &vx.data()[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        buf[r] += xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            Op::Relu(x) => acc(*x, &mut |buf| {
                for j in 0..buf.len() {
                    if y[j] > T::zero() {
                        buf[j] += g[j];
                    }
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |buf| {
                for j in 0..buf.len() {
                    buf[j] += g[j] * (T::one() - y[j] * y[j]);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |buf| {
                for j in 0..buf.len() {
                    buf[j] += g[j] * y[j] * (T::one() - y[j]);
                }
            }),
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                acc(*x, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                buf[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let n = node.value.cols();
                acc(*x, &mut |buf| {
                    if n == 0 {
                        return;
                    }
                    for ((drow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let gv = nodes[gamma.0].value.data();
                acc(*gamma, &mut |buf| {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            buf[c] += grow[c] * hrow[c];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for grow in g.chunks(cols) {
                        add_into(buf, grow);
                    }
                });
                let nf = T::from_usize(cols).unwrap_or_else(T::one);
                acc(*x, &mut |buf| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..cols {
                            let d = grow[c] * gv[c];
                            mean_d += d;
                            mean_dh += d * hrow[c];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for c in 0..cols {
                            let d = grow[c] * gv[c];
                            buf[r * cols + c] += *rs * (d - mean_d - hrow[c] * mean_dh);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    acc(*p, &mut |buf| {
                        for r in 0..rows {
                            add_into(
                                &mut buf[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.cols();
                acc(*x, &mut |buf| add_into(&mut buf[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (node.value.shape()[0], node.value.shape()[1]);
                let n = nodes[x.0].value.cols();
                acc(*x, &mut |buf| {
                    for r in 0..m {
                        add_into(&mut buf[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::MeanRows(x) => {
                let m = nodes[x.0].value.shape()[0];
                let mf = T::from_usize(m).expect("rows");
                let n = g.len();
                acc(*x, &mut |buf| {
                    for row in buf.chunks_mut(n) {
                        row.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg / mf);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::Gather { table, ids } => {
                let h = node.value.cols();
                acc(*table, &mut |buf| {
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * h..(id + 1) * h], &g[k * h..(k + 1) * h]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let v = nodes[logits.0].value.cols();
                let vf = T::from_usize(v).expect("vocab");
                let uniform = *smoothing / vf;
                acc(*logits, &mut |buf| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let mut d = probs[i * v + j] - uniform;
                            if j == t {
                                d -= T::one() - *smoothing;
                            }
                            buf[i * v + j] += g[0] * d;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |buf| {
                for j in 0..buf.len() {
                    buf[j] += g[j] * mask[j];
                }
            }),
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Log-softmax of one row of logits, evaluated in `f64`.
pub fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let vals: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    vals.iter().map(|&z| z - lse).collect()
}
