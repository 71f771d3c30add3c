//! Decoder stacks: the deliberation decoder's draft and refinement passes,
//! the merge-attention enhanced decoder, and the two-pass loss.
//!
//! Pass 2 cross-attends to the pass-1 states with a causal mask, so logits
//! at step `t` never see reference tokens at positions `>= t`.

use cat_tensor::{ParamId, Scalar, Session, Var};

use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::init::Builder;
use crate::transformer::{AttentionBlock, FeedForwardBlock, Mask, MultiHeadAttention, Sublayer};

/// Draft layer: masked self-attention, attention to `L_s`, attention to
/// `D_final`, feed-forward.
#[derive(Clone, Debug)]
pub struct DraftLayer {
    pub self_attn: AttentionBlock,
    pub utterance: AttentionBlock,
    pub document: AttentionBlock,
    pub ff: FeedForwardBlock,
}

/// First pass of the deliberation decoder.
#[derive(Clone, Debug)]
pub struct FirstPass {
    pub layers: Vec<DraftLayer>,
}

impl FirstPass {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut b = b.scope(&format!("layer{i}"));
                DraftLayer {
                    self_attn: AttentionBlock::new(&mut b.scope("self"), cfg.hidden, cfg.heads),
                    utterance: AttentionBlock::new(&mut b.scope("utterance"), cfg.hidden, cfg.heads),
                    document: AttentionBlock::new(&mut b.scope("document"), cfg.hidden, cfg.heads),
                    ff: FeedForwardBlock::new(&mut b.scope("ff"), cfg.hidden, cfg.filter),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, prefix: Var, l_s: Var, d_final: Var, dropout: f64) -> Result<Var> {
        let mut x = prefix;
        for layer in &self.layers {
            x = layer.self_attn.forward(s, x, x, Mask::Causal, dropout)?;
            x = layer.utterance.forward(s, x, l_s, Mask::None, dropout)?;
            x = layer.document.forward(s, x, d_final, Mask::None, dropout)?;
            x = layer.ff.forward(s, x, dropout)?;
        }
        Ok(x)
    }
}

/// Refinement layer: masked self-attention, causal attention to the draft
/// states, attention to the embedded document, feed-forward.
#[derive(Clone, Debug)]
pub struct RefineLayer {
    pub self_attn: AttentionBlock,
    pub draft: AttentionBlock,
    pub document: AttentionBlock,
    pub ff: FeedForwardBlock,
}

/// Second pass, shared by both decoder variants.
#[derive(Clone, Debug)]
pub struct SecondPass {
    pub layers: Vec<RefineLayer>,
}

impl SecondPass {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut b = b.scope(&format!("layer{i}"));
                RefineLayer {
                    self_attn: AttentionBlock::new(&mut b.scope("self"), cfg.hidden, cfg.heads),
                    draft: AttentionBlock::new(&mut b.scope("draft"), cfg.hidden, cfg.heads),
                    document: AttentionBlock::new(&mut b.scope("document"), cfg.hidden, cfg.heads),
                    ff: FeedForwardBlock::new(&mut b.scope("ff"), cfg.hidden, cfg.filter),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        prefix: Var,
        draft: Var,
        d_emb: Var,
        doc_mask: Mask,
        dropout: f64,
    ) -> Result<Var> {
        if s.shape(draft)[0] != s.shape(prefix)[0] {
            return Err(contract(format!(
                "draft of {} states for a prefix of {}",
                s.shape(draft)[0],
                s.shape(prefix)[0]
            )));
        }
        let mut x = prefix;
        for layer in &self.layers {
            x = layer.self_attn.forward(s, x, x, Mask::Causal, dropout)?;
            x = layer.draft.forward(s, x, draft, Mask::Causal, dropout)?;
            x = layer.document.forward(s, x, d_emb, doc_mask, dropout)?;
            x = layer.ff.forward(s, x, dropout)?;
        }
        Ok(x)
    }
}

/// Aligns `D_n` and `D̃_n` to decoder steps and mixes them with the decoder
/// stream through a learned three-way softmax.
#[derive(Clone, Debug)]
pub struct MergeAttention {
    pub to_guided: MultiHeadAttention,
    pub to_filtered: MultiHeadAttention,
    /// `[3h × 3]`.
    pub w_p: ParamId,
}

/// `V_merge` (`[r × h]`) and the per-step weights `[P_R, P_D, P_D̃]`
/// (`[r × 3]`).
#[derive(Clone, Copy, Debug)]
pub struct Merged {
    pub v_merge: Var,
    pub weights: Var,
}

impl MergeAttention {
    pub fn new(b: &mut Builder, hidden: usize, heads: usize) -> Self {
        Self {
            to_guided: MultiHeadAttention::new(&mut b.scope("guided"), hidden, heads),
            to_filtered: MultiHeadAttention::new(&mut b.scope("filtered"), hidden, heads),
            w_p: b.matrix("w_p", 3 * hidden, 3),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, r: Var, d_n: Var, d_tilde_n: Var) -> Result<Merged> {
        let c_d = self.to_guided.forward(s, r, d_n, d_n, Mask::None)?.output;
        let c_dt = self.to_filtered.forward(s, r, d_tilde_n, d_tilde_n, Mask::None)?.output;
        let w_p = s.param(self.w_p);
        merge_streams(s, r, c_d, c_dt, w_p)
    }
}

/// `P = softmax([R ; C_D ; C_D̃]·W_P)` per step and
/// `V_merge = P_R·R + P_D·C_D + P_D̃·C_D̃`.
pub fn merge_streams<T: Scalar>(s: &mut Session<T>, r: Var, c_d: Var, c_dt: Var, w_p: Var) -> Result<Merged> {
    let features = s.concat_cols(&[r, c_d, c_dt])?;
    let scores = s.matmul(features, w_p)?;
    let weights = s.softmax(scores, 1)?;
    let mut v_merge = None;
    for (k, stream) in [r, c_d, c_dt].into_iter().enumerate() {
        let p = s.slice_cols(weights, k, k + 1)?;
        let term = s.mul_col(stream, p)?;
        v_merge = Some(match v_merge {
            None => term,
            Some(acc) => s.add(acc, term)?,
        });
    }
    Ok(Merged {
        v_merge: v_merge.expect("three streams"),
        weights,
    })
}

/// Enhanced decoder layer: masked self-attention, merge attention,
/// attention to `L_s`, feed-forward.
#[derive(Clone, Debug)]
pub struct EnhancedLayer {
    pub self_attn: AttentionBlock,
    pub merge: MergeAttention,
    pub merge_norm: Sublayer,
    pub utterance: AttentionBlock,
    pub ff: FeedForwardBlock,
}

#[derive(Clone, Debug)]
pub struct EnhancedDecoder {
    pub layers: Vec<EnhancedLayer>,
}

/// Enhanced-decoder states plus the merge weights of every layer.
#[derive(Clone, Debug)]
pub struct EnhancedOutput {
    pub states: Var,
    pub merge_weights: Vec<Var>,
}

impl EnhancedDecoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut b = b.scope(&format!("layer{i}"));
                EnhancedLayer {
                    self_attn: AttentionBlock::new(&mut b.scope("self"), cfg.hidden, cfg.heads),
                    merge: MergeAttention::new(&mut b.scope("merge"), cfg.hidden, cfg.heads),
                    merge_norm: Sublayer::new(&mut b.scope("merge"), cfg.hidden),
                    utterance: AttentionBlock::new(&mut b.scope("utterance"), cfg.hidden, cfg.heads),
                    ff: FeedForwardBlock::new(&mut b.scope("ff"), cfg.hidden, cfg.filter),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        prefix: Var,
        d_n: Var,
        d_tilde_n: Var,
        l_s: Var,
        dropout: f64,
    ) -> Result<EnhancedOutput> {
        let mut x = prefix;
        let mut merge_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.self_attn.forward(s, x, x, Mask::Causal, dropout)?;
            let m = layer.merge.forward(s, x, d_n, d_tilde_n)?;
            merge_weights.push(m.weights);
            x = layer.merge_norm.wrap(s, x, m.v_merge, dropout)?;
            x = layer.utterance.forward(s, x, l_s, Mask::None, dropout)?;
            x = layer.ff.forward(s, x, dropout)?;
        }
        Ok(EnhancedOutput { states: x, merge_weights })
    }
}

/// The two summed negative log-likelihood terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct TwoPassLoss {
    pub pass1: Var,
    pub pass2: Var,
    pub total: Var,
}

/// `-Σ log P(R_i | pass 1) - Σ log P(R_i | pass 2)`, equal weights.
pub fn two_pass_loss<T: Scalar>(
    s: &mut Session<T>,
    logits1: Var,
    logits2: Var,
    reference: &[usize],
    smoothing: f64,
) -> Result<TwoPassLoss> {
    let pass1 = s.cross_entropy(logits1, reference, smoothing)?;
    let pass2 = s.cross_entropy(logits2, reference, smoothing)?;
    let total = s.add(pass1, pass2)?;
    Ok(TwoPassLoss { pass1, pass2, total })
}
