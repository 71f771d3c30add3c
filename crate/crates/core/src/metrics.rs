//! Evaluation metrics: perplexity, corpus BLEU, ROUGE-L, and the knowledge
//! utilization scores KU-N and QKU-N.
//!
//! Gram maps are ordered, so every floating-point sum runs over grams in
//! sorted order and results are reproducible bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{CatError, Result};

/// Multiset of the `order`-grams of one token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NGramProfile<T: Ord> {
    pub order: usize,
    pub counts: BTreeMap<Vec<T>, usize>,
    /// Number of grams extracted, `max(0, len - order + 1)`.
    pub total: usize,
}

impl<T: Ord + Clone> NGramProfile<T> {
    pub fn new(tokens: &[T], order: usize) -> Self {
        assert!(order >= 1, "n-gram order must be at least 1");
        let mut counts = BTreeMap::new();
        let mut total = 0;
        for w in tokens.windows(order) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
            total += 1;
        }
        Self { order, counts, total }
    }

    /// Union of the grams of several segments; grams never span segments.
    pub fn from_segments<S: AsRef<[T]>>(segments: &[S], order: usize) -> Self {
        let mut p = Self::new(&[], order);
        for seg in segments {
            for (g, c) in Self::new(seg.as_ref(), order).counts {
                *p.counts.entry(g).or_insert(0) += c;
                p.total += c;
            }
        }
        p
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, gram: &[T]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn contains(&self, gram: &[T]) -> bool {
        self.counts.contains_key(gram)
    }
}

pub fn ngram_profile<T: Ord + Clone>(tokens: &[T], order: usize) -> NGramProfile<T> {
    NGramProfile::new(tokens, order)
}

/// One (document, context, response) triple. The context is every
/// conversation turn given to the model, one segment per turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triple<T> {
    pub document: Vec<T>,
    pub context: Vec<Vec<T>>,
    pub response: Vec<T>,
}

/// Per-triple knowledge-utilization terms for one order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleEval {
    pub order: usize,
    /// `|G_dr|`: distinct grams shared by document and response.
    pub shared: usize,
    /// `|G_dr−c|`: shared grams absent from the context.
    pub novel: usize,
    /// `novel / shared`; `None` when nothing is shared.
    pub ku: Option<f64>,
    /// Reciprocal-frequency ratio over the novel grams; `None` when there
    /// are none.
    pub qku: Option<f64>,
}

pub fn evaluate_triple<T: Ord + Clone>(t: &Triple<T>, order: usize) -> TripleEval {
    let g_d = NGramProfile::new(&t.document, order);
    let g_c = NGramProfile::from_segments(&t.context, order);
    let g_r = NGramProfile::new(&t.response, order);
    let mut shared = 0;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut novel = 0;
    for (gram, &fr) in &g_r.counts {
        let fd = g_d.count(gram);
        if fd == 0 {
            continue;
        }
        shared += 1;
        if g_c.contains(gram) {
            continue;
        }
        novel += 1;
        num += 1.0 / fr as f64;
        den += 1.0 / fd as f64;
    }
    TripleEval {
        order,
        shared,
        novel,
        ku: (shared > 0).then(|| novel as f64 / shared as f64),
        qku: (novel > 0).then(|| num / den),
    }
}

pub fn ku<T: Ord + Clone>(t: &Triple<T>, order: usize) -> Option<f64> {
    evaluate_triple(t, order).ku
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KuSummary {
    /// Mean over triples with a defined KU; `None` if there are none.
    pub mean: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QkuSummary {
    /// Sum of per-triple ratios over the corpus.
    pub total: f64,
    /// `total / contributing`; `None` if no triple contributes.
    pub mean: Option<f64>,
    pub contributing: usize,
    pub skipped: usize,
}

pub fn summarize_ku(evals: &[TripleEval]) -> KuSummary {
    let vals: Vec<f64> = evals.iter().filter_map(|e| e.ku).collect();
    KuSummary {
        mean: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
        defined: vals.len(),
        undefined: evals.len() - vals.len(),
    }
}

pub fn summarize_qku(evals: &[TripleEval]) -> QkuSummary {
    let vals: Vec<f64> = evals.iter().filter_map(|e| e.qku).collect();
    // an empty sum is -0.0; report it as 0
    let total: f64 = vals.iter().sum::<f64>() + 0.0;
    QkuSummary {
        total,
        mean: (!vals.is_empty()).then(|| total / vals.len() as f64),
        contributing: vals.len(),
        skipped: evals.len() - vals.len(),
    }
}

pub fn ku_corpus<T: Ord + Clone>(triples: &[Triple<T>], order: usize) -> KuSummary {
    let evals: Vec<_> = triples.iter().map(|t| evaluate_triple(t, order)).collect();
    summarize_ku(&evals)
}

pub fn qku<T: Ord + Clone>(triples: &[Triple<T>], order: usize) -> QkuSummary {
    let evals: Vec<_> = triples.iter().map(|t| evaluate_triple(t, order)).collect();
    summarize_qku(&evals)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuOptions {
    pub max_order: usize,
    /// Add-one smoothing on orders above 1.
    pub smooth: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        Self {
            max_order: 4,
            smooth: false,
        }
    }
}

/// Corpus BLEU: clipped n-gram precisions pooled over the corpus, uniform
/// geometric mean, brevity penalty.
pub fn bleu<T: Ord + Clone, H: AsRef<[T]>, R: AsRef<[T]>>(hyps: &[H], refs: &[R], opts: BleuOptions) -> Result<f64> {
    if hyps.is_empty() {
        return Err(CatError::Metric("BLEU over an empty hypothesis set".into()));
    }
    if hyps.len() != refs.len() {
        return Err(CatError::Metric(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let n_max = opts.max_order.max(1);
    let mut matched = vec![0usize; n_max];
    let mut possible = vec![0usize; n_max];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=n_max {
            let hp = NGramProfile::new(h, n);
            let rp = NGramProfile::new(r, n);
            matched[n - 1] += hp.counts.iter().map(|(g, &c)| c.min(rp.count(g))).sum::<usize>();
            possible[n - 1] += hp.total;
        }
    }
    let mut log_sum = 0.0;
    for n in 0..n_max {
        let p = if opts.smooth && n > 0 {
            (matched[n] + 1) as f64 / (possible[n] + 1) as f64
        } else if possible[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / possible[n] as f64
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let bp = if hyp_len == 0 {
        return Ok(0.0);
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / n_max as f64).exp())
}

/// Weight of recall relative to precision in the ROUGE-L F-score.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based precision, recall and `F_β` with `β = 1.2`.
pub fn rouge_l<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<RougeL> {
    if reference.is_empty() {
        return Err(CatError::Metric("ROUGE-L against an empty reference".into()));
    }
    let zero = RougeL {
        precision: 0.0,
        recall: 0.0,
        f: 0.0,
    };
    if hyp.is_empty() {
        return Ok(zero);
    }
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return Ok(zero);
    }
    let precision = lcs / hyp.len() as f64;
    let recall = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let f = (1.0 + b2) * precision * recall / (recall + b2 * precision);
    Ok(RougeL { precision, recall, f })
}

/// Mean per-pair ROUGE-L F.
pub fn rouge_l_corpus<T: PartialEq, H: AsRef<[T]>, R: AsRef<[T]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    if hyps.is_empty() || hyps.len() != refs.len() {
        return Err(CatError::Metric(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut sum = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        sum += rouge_l(h.as_ref(), r.as_ref())?.f;
    }
    Ok(sum / hyps.len() as f64)
}

/// `exp(mean negative log-likelihood)` from per-token natural-log
/// probabilities.
pub fn perplexity(token_log_probs: &[f64]) -> Result<f64> {
    if token_log_probs.is_empty() {
        return Err(CatError::Metric("perplexity over zero tokens".into()));
    }
    let nll: f64 = -token_log_probs.iter().sum::<f64>();
    Ok((nll / token_log_probs.len() as f64).exp())
}

/// Distinct grams of `d` and `r` not present in the context segments.
pub fn novel_shared_grams<T: Ord + Clone>(t: &Triple<T>, order: usize) -> BTreeSet<Vec<T>> {
    let g_d = NGramProfile::new(&t.document, order);
    let g_c = NGramProfile::from_segments(&t.context, order);
    NGramProfile::new(&t.response, order)
        .counts
        .into_keys()
        .filter(|g| g_d.contains(g) && !g_c.contains(g))
        .collect()
}
