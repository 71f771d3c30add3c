//! The full model: shared embeddings, dual-branch encoder, relevance gate,
//! and either the deliberation decoder or the enhanced deliberation decoder.

use cat_tensor::{log_softmax_row, ParamStore, Scalar, Session, Var};

use crate::comparison::{aggregate_concat, gate_from_encodings, GateParams};
use crate::config::{Ablation, DecoderKind, ModelConfig};
use crate::decoders::{two_pass_loss, EnhancedDecoder, FirstPass, SecondPass, TwoPassLoss};
use crate::encoder::{CatEncoder, EncoderInput, EncoderOutput};
use crate::error::{contract, CatError, Result};
use crate::init::{seeded_rng, Builder};
use crate::transformer::{Embedder, Linear, Mask};

/// Token ids for one forward pass. `decoder_input` starts with BOS.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub encoder: EncoderInput<'a>,
    pub decoder_input: &'a [usize],
}

#[derive(Clone, Debug)]
pub enum FirstStage {
    Draft(FirstPass),
    Enhanced(EnhancedDecoder),
}

#[derive(Clone, Debug)]
pub struct CatModel {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub embed: Embedder,
    pub encoder: CatEncoder,
    /// Present for the deliberation decoder unless the gate or the left
    /// branch is ablated.
    pub gate: Option<GateParams>,
    pub first: FirstStage,
    pub second: SecondPass,
    pub head1: Linear,
    pub head2: Linear,
}

/// Encoder-side state shared by every decoding step of one example.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    pub enc: EncoderOutput,
    /// `None` for the enhanced decoder, which reads `D_n` and `D̃_n`
    /// directly.
    pub d_final: Option<Var>,
    pub gate: Option<Var>,
    pub empty_history: bool,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub states1: Var,
    pub logits1: Var,
    pub logits2: Var,
    pub merge_weights: Vec<Var>,
}

impl CatModel {
    /// Builds the structure and a freshly initialized parameter store.
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(CatError::Config(format!("vocabulary of {vocab_size} entries is too small")));
        }
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let cfg = config;
        let max_len = cfg.max_doc_len.max(cfg.max_utt_len * cfg.history_rounds.max(1));
        let embed = Embedder::new(&mut b.scope("embed"), vocab_size, cfg.hidden, max_len, cfg.positional_encoding);
        let encoder = CatEncoder::new(&mut b.scope("encoder"), cfg);
        let gated = cfg.decoder == DecoderKind::Dd && matches!(cfg.ablation, Ablation::None | Ablation::WoG);
        let gate = gated.then(|| GateParams::new(&mut b.scope("gate"), cfg.hidden));
        let first = match cfg.decoder {
            DecoderKind::Dd => FirstStage::Draft(FirstPass::new(&mut b.scope("first"), cfg)),
            DecoderKind::Edd => FirstStage::Enhanced(EnhancedDecoder::new(&mut b.scope("enhanced"), cfg)),
        };
        let second = SecondPass::new(&mut b.scope("second"), cfg);
        let head1 = Linear::new(&mut b.scope("head1"), cfg.hidden, vocab_size, true);
        let head2 = Linear::new(&mut b.scope("head2"), cfg.hidden, vocab_size, true);
        let model = Self {
            config: config.clone(),
            vocab_size,
            embed,
            encoder,
            gate,
            first,
            second,
            head1,
            head2,
        };
        Ok((model, store))
    }

    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, input: EncoderInput, dropout: f64) -> Result<Context> {
        let enc = self.encoder.encode(s, &self.embed, input, dropout)?;
        let mut gate = None;
        let mut empty_history = input.history.is_empty();
        if let Some(p) = &self.gate {
            let g = gate_from_encodings(s, enc.h_s, enc.l_s, p)?;
            gate = Some(g.gate);
            empty_history = g.empty_history;
        }
        let d_final = match (&self.first, enc.d_n) {
            (FirstStage::Enhanced(_), _) => None,
            (FirstStage::Draft(_), Some(d_n)) => Some(aggregate_concat(s, d_n, enc.d_tilde_n, gate)?.d_final),
            (FirstStage::Draft(_), None) => Some(enc.d_tilde_n),
        };
        Ok(Context {
            enc,
            d_final,
            gate,
            empty_history,
        })
    }

    /// Runs both passes over a teacher-forced prefix.
    pub fn decode<T: Scalar>(&self, s: &mut Session<T>, ctx: &Context, decoder_input: &[usize], dropout: f64) -> Result<Decoded> {
        if decoder_input.is_empty() || decoder_input.len() > self.config.max_utt_len {
            return Err(contract(format!(
                "decoder prefix of {} tokens outside 1..={}",
                decoder_input.len(),
                self.config.max_utt_len
            )));
        }
        let r = self.embed.forward(s, decoder_input)?;
        let r = s.dropout(r, dropout)?;
        let mut merge_weights = Vec::new();
        let states1 = match &self.first {
            FirstStage::Draft(f) => {
                let d_final = ctx.d_final.ok_or_else(|| contract("draft pass needs D_final"))?;
                f.forward(s, r, ctx.enc.l_s, d_final, dropout)?
            }
            FirstStage::Enhanced(e) => {
                let d_n = ctx
                    .enc
                    .d_n
                    .ok_or_else(|| CatError::Config("the enhanced decoder needs the left encoder branch".into()))?;
                let out = e.forward(s, r, d_n, ctx.enc.d_tilde_n, ctx.enc.l_s, dropout)?;
                merge_weights = out.merge_weights;
                out.states
            }
        };
        let logits1 = self.head1.forward(s, states1)?;
        let states2 = self.second.forward(s, r, states1, ctx.enc.d_emb, Mask::None, dropout)?;
        let logits2 = self.head2.forward(s, states2)?;
        Ok(Decoded {
            states1,
            logits1,
            logits2,
            merge_weights,
        })
    }

    /// Encoder, decoder and the two-pass loss against `target`.
    pub fn loss<T: Scalar>(&self, s: &mut Session<T>, input: ModelInput, target: &[usize], dropout: f64) -> Result<(TwoPassLoss, Context)> {
        let ctx = self.encode(s, input.encoder, dropout)?;
        let dec = self.decode(s, &ctx, input.decoder_input, dropout)?;
        let loss = two_pass_loss(s, dec.logits1, dec.logits2, target, self.config.label_smoothing)?;
        Ok((loss, ctx))
    }

    /// Pass-2 log-distribution over the next token after `prefix`. The
    /// session is rewound afterwards, so `ctx` can be reused indefinitely.
    pub fn step_log_probs<T: Scalar>(&self, s: &mut Session<T>, ctx: &Context, prefix: &[usize]) -> Result<Vec<f64>> {
        let mark = s.len();
        let dec = self.decode(s, ctx, prefix, 0.0);
        let out = dec.map(|d| {
            let v = s.value(d.logits2);
            log_softmax_row(v.row(v.rows() - 1))
        });
        s.truncate(mark);
        out
    }

    /// Pass-2 log-probability of each reference token under teacher
    /// forcing.
    pub fn reference_log_probs<T: Scalar>(&self, s: &mut Session<T>, ctx: &Context, decoder_input: &[usize], target: &[usize]) -> Result<Vec<f64>> {
        if decoder_input.len() != target.len() {
            return Err(contract("decoder input and target lengths differ"));
        }
        let mark = s.len();
        let dec = self.decode(s, ctx, decoder_input, 0.0);
        let out = dec.map(|d| {
            let v = s.value(d.logits2);
            target
                .iter()
                .enumerate()
                .map(|(i, &t)| log_softmax_row(v.row(i))[t])
                .collect()
        });
        s.truncate(mark);
        out
    }
}
