//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use cat_tensor::{ParamStore, Scalar, Session};

use crate::error::{contract, Result};
use crate::model::{CatModel, Context};

/// Supplies `log P(· | prefix)`; `prefix` always starts with BOS.
pub trait StepScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub bos: usize,
    pub eos: usize,
    pub length_normalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without BOS; ends with EOS when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }

    /// Tokens with the trailing EOS removed.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((_, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

fn prefixed(bos: usize, tokens: &[usize]) -> Vec<usize> {
    let mut p = Vec::with_capacity(tokens.len() + 1);
    p.push(bos);
    p.extend_from_slice(tokens);
    p
}

fn checked(lp: Vec<f64>, eos: usize) -> Result<Vec<f64>> {
    if lp.len() <= eos {
        return Err(contract(format!("scorer returned {} entries, EOS id is {eos}", lp.len())));
    }
    Ok(lp)
}

/// Highest-scoring token, lowest id on ties.
fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &SearchConfig) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < cfg.max_len {
        let lp = checked(scorer.log_probs(&prefixed(cfg.bos, &h.tokens))?, cfg.eos)?;
        let t = argmax(&lp);
        h.tokens.push(t);
        h.log_prob += lp[t];
        if t == cfg.eos {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Length-capped beam search. The greedy hypothesis is always among the
/// finalists, so the result never scores below greedy decoding.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &SearchConfig) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(contract("beam size must be positive"));
    }
    let norm = cfg.length_normalize;
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (i, h) in alive.iter().enumerate() {
            let lp = checked(scorer.log_probs(&prefixed(cfg.bos, &h.tokens))?, cfg.eos)?;
            cands.extend(lp.iter().enumerate().map(|(t, &l)| (i, t, h.log_prob + l)));
        }
        // stable: equal scores keep (hypothesis, token) order
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));
        let mut next = Vec::with_capacity(cfg.beam);
        for (rank, &(i, t, lp)) in cands.iter().enumerate() {
            if next.len() == cfg.beam {
                break;
            }
            let mut tokens = alive[i].tokens.clone();
            tokens.push(t);
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                finished: t == cfg.eos,
            };
            if h.finished {
                if rank < cfg.beam {
                    finished.push(h);
                }
            } else {
                next.push(h);
            }
        }
        alive = next;
        let best_done = finished.iter().map(|h| h.score(norm)).fold(f64::NEG_INFINITY, f64::max);
        let best_alive = alive.iter().map(|h| h.score(norm)).fold(f64::NEG_INFINITY, f64::max);
        if alive.is_empty() || (!norm && best_done >= best_alive) {
            break;
        }
    }
    finished.extend(alive);
    finished.push(greedy(scorer, cfg)?);
    let mut best = 0;
    for (i, h) in finished.iter().enumerate() {
        if h.score(norm) > finished[best].score(norm) {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}

/// Scores with the model's pass-2 distribution over a fixed encoder context.
pub struct ModelScorer<'m, 's, T: Scalar> {
    pub model: &'m CatModel,
    pub session: Session<'s, T>,
    pub context: Context,
}

impl<'m, 's, T: Scalar> ModelScorer<'m, 's, T> {
    pub fn new(model: &'m CatModel, store: &'s ParamStore<T>, input: crate::encoder::EncoderInput) -> Result<Self> {
        let mut session = Session::new(store, cat_tensor::Graph::no_grad());
        let context = model.encode(&mut session, input, 0.0)?;
        Ok(Self {
            model,
            session,
            context,
        })
    }

    pub fn gate_value(&self) -> Option<f64> {
        self.context.gate.map(|g| self.session.value(g).data()[0].as_f64())
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, '_, T> {
    fn log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.model.step_log_probs(&mut self.session, &self.context, prefix)
    }
}
