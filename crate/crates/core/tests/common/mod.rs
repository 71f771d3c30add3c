//! Brute-force oracles and model fixtures shared by the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use cat_core::config::{Ablation, DecoderKind, ModelConfig};
use cat_core::encoder::EncoderInput;
use cat_core::model::{CatModel, ModelInput};
use cat_core::vocab::BOS;
use cat_tensor::{Graph, ParamStore, Session};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- metrics

/// Every length-`n` window, duplicates included.
fn windows(tokens: &[u32], n: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for i in 0..=tokens.len() - n {
        out.push(tokens[i..i + n].to_vec());
    }
    out
}

fn occurrences(list: &[Vec<u32>], gram: &[u32]) -> usize {
    let mut c = 0;
    for g in list {
        if g.as_slice() == gram {
            c += 1;
        }
    }
    c
}

/// Distinct grams, sorted.
fn distinct(list: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    for g in list {
        let mut seen = false;
        for o in &out {
            if o == g {
                seen = true;
            }
        }
        if !seen {
            out.push(g.clone());
        }
    }
    out.sort();
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteTerms {
    pub shared: usize,
    pub novel: usize,
    pub ku: Option<f64>,
    pub qku: Option<f64>,
}

/// KU and the per-triple QKU ratio by plain enumeration. Reciprocals are
/// summed in sorted gram order.
pub fn brute_terms(doc: &[u32], context: &[Vec<u32>], resp: &[u32], n: usize) -> BruteTerms {
    let gd = windows(doc, n);
    let gr = windows(resp, n);
    let mut gc = Vec::new();
    for seg in context {
        gc.extend(windows(seg, n));
    }
    let mut shared = 0;
    let mut novel = Vec::new();
    for g in distinct(&gr) {
        if occurrences(&gd, &g) == 0 {
            continue;
        }
        shared += 1;
        if occurrences(&gc, &g) == 0 {
            novel.push(g);
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for g in &novel {
        num += 1.0 / occurrences(&gr, g) as f64;
        den += 1.0 / occurrences(&gd, g) as f64;
    }
    BruteTerms {
        shared,
        novel: novel.len(),
        ku: (shared > 0).then(|| novel.len() as f64 / shared as f64),
        qku: (!novel.is_empty()).then(|| num / den),
    }
}

/// Corpus BLEU from clipped counts found by scanning.
pub fn brute_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>], max_order: usize, smooth: bool) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=max_order {
        let (mut matched, mut possible) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let hw = windows(h, n);
            let rw = windows(r, n);
            possible += hw.len();
            for g in distinct(&hw) {
                matched += occurrences(&hw, &g).min(occurrences(&rw, &g));
            }
        }
        let p = if smooth && n > 1 {
            (matched + 1) as f64 / (possible + 1) as f64
        } else if possible == 0 {
            0.0
        } else {
            matched as f64 / possible as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_p += p.ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return 0.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_p / max_order as f64).exp()
}

fn is_subsequence(sub: &[u32], of: &[u32]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// LCS length by enumerating every subsequence of `a`; only for short `a`.
pub fn brute_lcs(a: &[u32], b: &[u32]) -> usize {
    assert!(a.len() <= 16, "enumeration oracle needs a short input");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u32> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

/// `(precision, recall, F_1.2)`.
pub fn brute_rouge_l(hyp: &[u32], reference: &[u32]) -> (f64, f64, f64) {
    let lcs = brute_lcs(hyp, reference);
    if lcs == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let beta2 = 1.2f64 * 1.2;
    (p, r, (1.0 + beta2) * p * r / (r + beta2 * p))
}

/// A token string with length drawn from `len`.
pub fn random_tokens(rng: &mut ChaCha8Rng, len: std::ops::Range<usize>, alphabet: u32) -> Vec<u32> {
    let n = rng.gen_range(len);
    (0..n).map(|_| rng.gen_range(0..alphabet)).collect()
}

// ---------------------------------------------------------------- models

pub fn small_config(decoder: DecoderKind, ablation: Ablation) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        layers: 2,
        filter: 12,
        dropout: 0.0,
        decoder,
        ablation,
        max_doc_len: 24,
        max_utt_len: 10,
        ..ModelConfig::tiny()
    }
}

pub const VOCAB: usize = 16;

/// One random example; every sequence starts with BOS, as produced by the
/// data pipeline.
#[derive(Clone, Debug)]
pub struct Sample {
    pub doc: Vec<usize>,
    pub hist: Vec<usize>,
    pub last: Vec<usize>,
    pub dec_in: Vec<usize>,
    pub target: Vec<usize>,
}

impl Sample {
    pub fn random(rng: &mut ChaCha8Rng, with_history: bool) -> Self {
        let mut seq = |lo: usize, hi: usize| {
            let n = rng.gen_range(lo..=hi);
            let mut v = vec![BOS];
            v.extend((0..n).map(|_| rng.gen_range(4..VOCAB)));
            v
        };
        let doc = seq(4, 12);
        let hist = if with_history { seq(2, 6) } else { Vec::new() };
        let last = seq(1, 5);
        let dec_in = seq(2, 6);
        let mut target = dec_in[1..].to_vec();
        target.push(cat_core::vocab::EOS);
        Self {
            doc,
            hist,
            last,
            dec_in,
            target,
        }
    }

    pub fn encoder_input(&self) -> EncoderInput<'_> {
        EncoderInput {
            document: &self.doc,
            history: &self.hist,
            last: &self.last,
        }
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            encoder: self.encoder_input(),
            decoder_input: &self.dec_in,
        }
    }
}

pub fn build(cfg: &ModelConfig, seed: u64) -> (CatModel, ParamStore<f64>) {
    let (model, store) = CatModel::new(cfg, VOCAB, seed).expect("valid config");
    (model, store.cast())
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Every softmax on the tape of a full loss pass has rows summing to 1
/// within `tol`; rows of a masked softmax with all keys excluded are zero.
/// Returns the number of rows checked.
pub fn check_attention_rows(model: &CatModel, store: &ParamStore<f64>, x: &Sample, tol: f64) -> Result<usize, String> {
    let mut s = Session::new(store, Graph::no_grad());
    model.loss(&mut s, x.input(), &x.target, 0.0).map_err(|e| e.to_string())?;
    let mut rows = 0;
    for v in s.vars() {
        let op = s.op_name(v);
        if op != "softmax" && op != "masked_softmax" {
            continue;
        }
        let t = s.value(v);
        for r in 0..t.rows() {
            let row = t.row(r);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(format!("{op} row {r} has an entry outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            let all_zero = op == "masked_softmax" && row.iter().all(|&p| p == 0.0);
            if (sum - 1.0).abs() > tol && !all_zero {
                return Err(format!("{op} row {r} sums to {sum}"));
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return Err("no attention rows on the tape".into());
    }
    Ok(rows)
}

/// Merge weights of the enhanced decoder: `[r × 3]`, non-negative, rows
/// summing to 1 within `tol`, for every layer and step.
pub fn check_merge_simplex(model: &CatModel, store: &ParamStore<f64>, x: &Sample, tol: f64) -> Result<(), String> {
    let mut s = Session::new(store, Graph::no_grad());
    let ctx = model.encode(&mut s, x.encoder_input(), 0.0).map_err(|e| e.to_string())?;
    let dec = model.decode(&mut s, &ctx, &x.dec_in, 0.0).map_err(|e| e.to_string())?;
    if dec.merge_weights.len() != model.config.layers {
        return Err(format!("{} merge weight sets for {} layers", dec.merge_weights.len(), model.config.layers));
    }
    for (l, &w) in dec.merge_weights.iter().enumerate() {
        let t = s.value(w);
        if t.shape() != [x.dec_in.len(), 3] {
            return Err(format!("layer {l} merge weights have shape {:?}", t.shape()));
        }
        for step in 0..t.rows() {
            let row = t.row(step);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > tol {
                return Err(format!("layer {l} step {step}: weights {row:?}"));
            }
        }
    }
    Ok(())
}

/// `D_final` stacks `g·D_n` over `D̃_n`: its length is the sum and its
/// second block is `D̃_n` itself.
pub fn check_d_final(model: &CatModel, store: &ParamStore<f64>, x: &Sample) -> Result<(), String> {
    let mut s = Session::new(store, Graph::no_grad());
    let ctx = model.encode(&mut s, x.encoder_input(), 0.0).map_err(|e| e.to_string())?;
    let d_final = ctx.d_final.ok_or("no D_final")?;
    let tail = s.value(ctx.enc.d_tilde_n).data().to_vec();
    let head = ctx.enc.d_n.map_or(0, |d| s.shape(d)[0]);
    let dt_rows = s.shape(ctx.enc.d_tilde_n)[0];
    let rows = s.shape(d_final)[0];
    if rows != head + dt_rows {
        return Err(format!("D_final has {rows} rows, expected {head} + {dt_rows}"));
    }
    let all = s.value(d_final).data();
    let cols = s.shape(d_final)[1];
    if bits(&all[head * cols..]) != bits(&tail) {
        return Err("second block of D_final differs from D̃_n".into());
    }
    Ok(())
}

/// The right branch reads only `L` and `D`, so changing `H` leaves it
/// bit-identical.
pub fn check_right_branch_ignores_history(model: &CatModel, store: &ParamStore<f64>, x: &Sample, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let run = |hist: &[usize]| -> Result<Vec<u64>, String> {
        let mut s = Session::new(store, Graph::no_grad());
        let input = EncoderInput {
            document: &x.doc,
            history: hist,
            last: &x.last,
        };
        let ctx = model.encode(&mut s, input, 0.0).map_err(|e| e.to_string())?;
        Ok(bits(s.value(ctx.enc.d_tilde_n).data()))
    };
    let base = run(&x.hist)?;
    let mut other = vec![BOS];
    other.extend((0..rng.gen_range(1..8)).map(|_| rng.gen_range(4..VOCAB)));
    for hist in [other.as_slice(), &[]] {
        if run(hist)? != base {
            return Err(format!("right branch changed for history {hist:?}"));
        }
    }
    Ok(())
}

/// Logits of both passes at position `t` are identical whatever the
/// decoder input holds after `t`.
pub fn check_causality(model: &CatModel, store: &ParamStore<f64>, x: &Sample, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let run = |dec_in: &[usize]| -> Result<(Vec<f64>, Vec<f64>, usize), String> {
        let mut s = Session::new(store, Graph::no_grad());
        let ctx = model.encode(&mut s, x.encoder_input(), 0.0).map_err(|e| e.to_string())?;
        let d = model.decode(&mut s, &ctx, dec_in, 0.0).map_err(|e| e.to_string())?;
        let cols = s.shape(d.logits1)[1];
        Ok((s.value(d.logits1).data().to_vec(), s.value(d.logits2).data().to_vec(), cols))
    };
    let (l1, l2, cols) = run(&x.dec_in)?;
    for t in 1..x.dec_in.len() {
        let mut changed = x.dec_in.clone();
        for tok in &mut changed[t..] {
            *tok = rng.gen_range(4..VOCAB);
        }
        let (c1, c2, _) = run(&changed)?;
        let keep = t * cols;
        if bits(&l1[..keep]) != bits(&c1[..keep]) || bits(&l2[..keep]) != bits(&c2[..keep]) {
            return Err(format!("positions before {t} changed when later tokens changed"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- search

pub const TOY_A: usize = 4;
pub const TOY_B: usize = 5;

/// A scorer where the locally best first token leads to a poor sequence:
/// `a` (0.5) is followed by a three-way tie, while `b` (0.4) is followed
/// by EOS with 0.9.
pub struct ToyScorer;

impl cat_core::beam::StepScorer for ToyScorer {
    fn log_probs(&mut self, prefix: &[usize]) -> cat_core::Result<Vec<f64>> {
        let eos = cat_core::vocab::EOS;
        let mut p = vec![1e-6; 6];
        match &prefix[1..] {
            [] => {
                p[TOY_A] = 0.5;
                p[TOY_B] = 0.4;
                p[eos] = 0.1;
            }
            [TOY_A] => {
                p[TOY_A] = 1.0 / 3.0;
                p[TOY_B] = 1.0 / 3.0;
                p[eos] = 1.0 / 3.0;
            }
            [TOY_B] => {
                p[eos] = 0.9;
                p[TOY_A] = 0.1;
            }
            _ => p[eos] = 1.0,
        }
        Ok(p.iter().map(|x: &f64| x.ln()).collect())
    }
}

/// Highest log-probability over every token sequence of at most `max_len`
/// tokens, where EOS ends a sequence.
pub fn exhaustive_best<S: cat_core::beam::StepScorer>(scorer: &mut S, bos: usize, eos: usize, max_len: usize) -> (Vec<usize>, f64) {
    fn go<S: cat_core::beam::StepScorer>(s: &mut S, prefix: &mut Vec<usize>, lp: f64, eos: usize, left: usize, best: &mut (Vec<usize>, f64)) {
        if left == 0 {
            if lp > best.1 {
                *best = (prefix[1..].to_vec(), lp);
            }
            return;
        }
        let dist = s.log_probs(prefix).expect("toy scorer");
        for (t, &l) in dist.iter().enumerate() {
            prefix.push(t);
            if t == eos {
                if lp + l > best.1 {
                    *best = (prefix[1..].to_vec(), lp + l);
                }
            } else {
                go(s, prefix, lp + l, eos, left - 1, best);
            }
            prefix.pop();
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    go(scorer, &mut vec![bos], 0.0, eos, max_len, &mut best);
    best
}
