//! Concatenation comparison: a scalar relevance gate computed from the
//! pooled history and utterance, applied to the history-guided document
//! representation before it is stacked with the utterance-filtered one.

use cat_tensor::{ParamId, Scalar, Session, Tensor, Var};

use crate::error::{contract, Result};
use crate::init::Builder;

/// `W_H`, `W_L` (`[h × h]`) and `w_alpha` (`[h]`). No biases.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub w_h: ParamId,
    pub w_l: ParamId,
    pub w_alpha: ParamId,
}

impl GateParams {
    pub fn new(b: &mut Builder, hidden: usize) -> Self {
        let w_h = b.matrix("w_h", hidden, hidden);
        let w_l = b.matrix("w_l", hidden, hidden);
        let a = (6.0 / (hidden + 1) as f64).sqrt();
        let w_alpha = b.normal("w_alpha", &[hidden], a / 3.0);
        Self { w_h, w_l, w_alpha }
    }
}

/// Mean over sequence positions, `[n × h] -> [1 × h]`.
pub fn pool_mean<T: Scalar>(s: &mut Session<T>, x: Var) -> Result<Var> {
    if s.shape(x)[0] == 0 {
        return Err(contract("average pooling over an empty sequence"));
    }
    Ok(s.mean_rows(x)?)
}

/// `g = sigmoid(w_alpha · tanh(W_H·h + W_L·l))`, returned as a `[1 × 1]`
/// value strictly inside (0, 1).
pub fn relevance_gate<T: Scalar>(s: &mut Session<T>, h_sa: Var, l_sa: Var, p: &GateParams) -> Result<Var> {
    let (w_h, w_l, w_alpha) = (s.param(p.w_h), s.param(p.w_l), s.param(p.w_alpha));
    // row-vector form of W·x is x·Wᵀ
    let from_h = s.matmul_nt(h_sa, w_h)?;
    let from_l = s.matmul_nt(l_sa, w_l)?;
    let pre = s.add(from_h, from_l)?;
    let alpha = s.tanh(pre)?;
    let hidden = s.shape(w_alpha)[0];
    let w_col = s.reshape(w_alpha, &[hidden, 1])?;
    let score = s.matmul(alpha, w_col)?;
    Ok(s.sigmoid(score)?)
}

/// Gate value plus whether the history was empty (pooled to zeros).
#[derive(Clone, Copy, Debug)]
pub struct GateOutcome {
    pub gate: Var,
    pub empty_history: bool,
}

/// Pools `H_s` and `L_s` and evaluates the gate. An empty `H_s` pools to the
/// zero vector and is flagged.
pub fn gate_from_encodings<T: Scalar>(s: &mut Session<T>, h_s: Var, l_s: Var, p: &GateParams) -> Result<GateOutcome> {
    let hidden = s.shape(l_s)[1];
    let empty_history = s.shape(h_s)[0] == 0;
    let h_sa = if empty_history {
        s.constant(Tensor::zeros(vec![1, hidden]))
    } else {
        pool_mean(s, h_s)?
    };
    let l_sa = pool_mean(s, l_s)?;
    let gate = relevance_gate(s, h_sa, l_sa, p)?;
    Ok(GateOutcome { gate, empty_history })
}

#[derive(Clone, Copy, Debug)]
pub struct AggregatedDocument {
    pub d_final: Var,
    /// `None` when the gate is ablated (fixed at 1).
    pub gate: Option<Var>,
}

/// `D_final = [g * D_n ; D̃_n]` stacked along the sequence dimension. With
/// no gate, plain concatenation.
pub fn aggregate_concat<T: Scalar>(s: &mut Session<T>, d_n: Var, d_tilde_n: Var, gate: Option<Var>) -> Result<AggregatedDocument> {
    if s.shape(d_n)[1] != s.shape(d_tilde_n)[1] {
        return Err(contract(format!(
            "cannot stack document views of widths {} and {}",
            s.shape(d_n)[1],
            s.shape(d_tilde_n)[1]
        )));
    }
    let left = match gate {
        Some(g) => s.scale_by(d_n, g)?,
        None => d_n,
    };
    let d_final = s.concat_rows(&[left, d_tilde_n])?;
    Ok(AggregatedDocument { d_final, gate })
}
