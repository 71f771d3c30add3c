//! Dual-branch encoder.
//!
//! The right branch filters the document with the self-attended last
//! utterance `L_s`. The left branch first lets `L_s` pick out the relevant
//! parts of the history `H`, then uses that guided history to filter the
//! document. Each branch ends with a query length equal to `len(L)`.

use cat_tensor::{Scalar, Session, Tensor, Var};

use crate::config::{Ablation, ModelConfig};
use crate::error::{contract, Result};
use crate::init::Builder;
use crate::transformer::{AttentionBlock, Embedder, FeedForwardBlock, Mask};

/// `MAtt(X, X, X)` with sublayer wrapping.
#[derive(Clone, Debug)]
pub struct SelfEncoder {
    pub block: AttentionBlock,
}

impl SelfEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        Self {
            block: AttentionBlock::new(b, cfg.hidden, cfg.heads),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var, dropout: f64) -> Result<Var> {
        if s.shape(x)[0] == 0 {
            return Err(contract("self-encoding an empty sequence"));
        }
        self.block.forward(s, x, x, Mask::None, dropout)
    }
}

/// One layer of the history-guided branch.
#[derive(Clone, Debug)]
pub struct GuidedLayer {
    /// `D_s^{i-1} = MAtt(D^{i-1}, D^{i-1}, D^{i-1})`, absent in layer 1.
    pub doc_self: Option<AttentionBlock>,
    /// `H^i = MAtt(query, H, H)`.
    pub guide: AttentionBlock,
    /// `MAtt(H^i, D, D)`.
    pub select: AttentionBlock,
    pub ff: FeedForwardBlock,
}

/// One layer of the utterance-filtered branch.
#[derive(Clone, Debug)]
pub struct FilterLayer {
    pub doc_self: Option<AttentionBlock>,
    pub select: AttentionBlock,
    pub ff: FeedForwardBlock,
}

#[derive(Clone, Debug)]
pub struct FilterBranch {
    pub layers: Vec<FilterLayer>,
}

impl FilterBranch {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut b = b.scope(&format!("layer{i}"));
                FilterLayer {
                    doc_self: (i > 0).then(|| AttentionBlock::new(&mut b.scope("doc_self"), cfg.hidden, cfg.heads)),
                    select: AttentionBlock::new(&mut b.scope("select"), cfg.hidden, cfg.heads),
                    ff: FeedForwardBlock::new(&mut b.scope("ff"), cfg.hidden, cfg.filter),
                }
            })
            .collect();
        Self { layers }
    }

    /// `D̃¹ = FF(MAtt(query, D, D))`;
    /// `D̃^i = FF(MAtt(MAtt(D̃^{i-1}, D̃^{i-1}, D̃^{i-1}), D, D))`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, query: Var, doc: Var, doc_mask: Mask, dropout: f64) -> Result<Var> {
        let mut x = query;
        for layer in &self.layers {
            if let Some(ds) = &layer.doc_self {
                x = ds.forward(s, x, x, Mask::None, dropout)?;
            }
            x = layer.select.forward(s, x, doc, doc_mask, dropout)?;
            x = layer.ff.forward(s, x, dropout)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct GuidedBranch {
    pub layers: Vec<GuidedLayer>,
}

impl GuidedBranch {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut b = b.scope(&format!("layer{i}"));
                GuidedLayer {
                    doc_self: (i > 0).then(|| AttentionBlock::new(&mut b.scope("doc_self"), cfg.hidden, cfg.heads)),
                    guide: AttentionBlock::new(&mut b.scope("guide"), cfg.hidden, cfg.heads),
                    select: AttentionBlock::new(&mut b.scope("select"), cfg.hidden, cfg.heads),
                    ff: FeedForwardBlock::new(&mut b.scope("ff"), cfg.hidden, cfg.filter),
                }
            })
            .collect();
        Self { layers }
    }

    /// Layer 1: `H¹ = MAtt(L_s, H, H)`, `D¹ = FF(MAtt(H¹, D, D))`.
    /// Layer i: `H^i = MAtt(MAtt(D^{i-1}, D^{i-1}, D^{i-1}), H, H)`,
    /// `D^i = FF(MAtt(H^i, D, D))`.
    pub fn forward<T: Scalar>(
        &self,
        s: &mut Session<T>,
        history: Var,
        last_s: Var,
        doc: Var,
        doc_mask: Mask,
        dropout: f64,
    ) -> Result<Var> {
        let mut x = last_s;
        for layer in &self.layers {
            if let Some(ds) = &layer.doc_self {
                x = ds.forward(s, x, x, Mask::None, dropout)?;
            }
            let h = layer.guide.forward(s, x, history, Mask::None, dropout)?;
            x = layer.select.forward(s, h, doc, doc_mask, dropout)?;
            x = layer.ff.forward(s, x, dropout)?;
        }
        Ok(x)
    }
}

/// The left branch: guided by default, or shaped like the right branch
/// (with `H_s` as its query) when guiding is ablated.
#[derive(Clone, Debug)]
pub enum LeftBranch {
    Guided(GuidedBranch),
    Unguided(FilterBranch),
}

/// Token ids of one example's encoder inputs.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub document: &'a [usize],
    pub history: &'a [usize],
    pub last: &'a [usize],
}

/// Encoder results as graph handles.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub d_emb: Var,
    pub h_emb: Var,
    pub h_s: Var,
    pub l_s: Var,
    /// History-guided document information; absent under `wo_left`.
    pub d_n: Option<Var>,
    pub d_tilde_n: Var,
}

#[derive(Clone, Debug)]
pub struct CatEncoder {
    pub history_self: SelfEncoder,
    pub last_self: SelfEncoder,
    pub left: Option<LeftBranch>,
    pub right: FilterBranch,
}

impl CatEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let left = match cfg.ablation {
            Ablation::WoLeft => None,
            Ablation::WoG => Some(LeftBranch::Unguided(FilterBranch::new(&mut b.scope("left"), cfg))),
            Ablation::None | Ablation::Wo56 => Some(LeftBranch::Guided(GuidedBranch::new(&mut b.scope("left"), cfg))),
        };
        Self {
            history_self: SelfEncoder::new(&mut b.scope("history_self"), cfg),
            last_self: SelfEncoder::new(&mut b.scope("last_self"), cfg),
            left,
            right: FilterBranch::new(&mut b.scope("right"), cfg),
        }
    }

    pub fn encode_right<T: Scalar>(&self, s: &mut Session<T>, last_s: Var, doc: Var, dropout: f64) -> Result<Var> {
        self.right.forward(s, last_s, doc, Mask::None, dropout)
    }

    /// Returns `None` when the left branch is ablated away.
    pub fn encode_left<T: Scalar>(
        &self,
        s: &mut Session<T>,
        history: Var,
        history_s: Var,
        last_s: Var,
        doc: Var,
        dropout: f64,
    ) -> Result<Option<Var>> {
        match &self.left {
            None => Ok(None),
            Some(LeftBranch::Guided(g)) => g.forward(s, history, last_s, doc, Mask::None, dropout).map(Some),
            Some(LeftBranch::Unguided(f)) => f.forward(s, history_s, doc, Mask::None, dropout).map(Some),
        }
    }

    /// Embeds the inputs, self-encodes `H` and `L`, and runs both branches.
    /// An empty history yields an empty `H_s`.
    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, embed: &Embedder, input: EncoderInput, dropout: f64) -> Result<EncoderOutput> {
        if input.last.is_empty() {
            return Err(contract("last utterance must contain at least one token"));
        }
        let hidden = embed.hidden;
        let d_emb = embed.forward(s, input.document)?;
        let d_emb = s.dropout(d_emb, dropout)?;
        let h_emb = embed.forward(s, input.history)?;
        let h_emb = s.dropout(h_emb, dropout)?;
        let l_emb = embed.forward(s, input.last)?;
        let l_emb = s.dropout(l_emb, dropout)?;

        let l_s = self.last_self.forward(s, l_emb, dropout)?;
        let h_s = if input.history.is_empty() {
            s.constant(Tensor::zeros(vec![0, hidden]))
        } else {
            self.history_self.forward(s, h_emb, dropout)?
        };
        let d_n = self.encode_left(s, h_emb, h_s, l_s, d_emb, dropout)?;
        let d_tilde_n = self.encode_right(s, l_s, d_emb, dropout)?;
        Ok(EncoderOutput {
            d_emb,
            h_emb,
            h_s,
            l_s,
            d_n,
            d_tilde_n,
        })
    }
}
