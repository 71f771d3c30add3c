//! The operations behind each command-line verb, as library calls.
//!
//! Evaluation goes through an intermediate JSON-lines file of
//! [`EvalRecord`]s: decoding writes it, and every reported metric is
//! computed from those records alone, so a decoded file can be re-scored
//! without the model.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::beam::{beam_search, ModelScorer, SearchConfig};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{DecoderKind, ModelConfig};
use crate::data::{build_corpus, build_vocab, read_corpus, write_corpus, Example, TextExample, WindowConfig};
use crate::error::{CatError, Result};
use crate::metrics::{
    bleu, evaluate_triple, perplexity, rouge_l, rouge_l_corpus, summarize_ku, summarize_qku, BleuOptions, KuSummary,
    QkuSummary, Triple,
};
use crate::model::CatModel;
use crate::synth::{synth_corpus, SynthConfig};
use crate::train::{EpochLog, FitOptions, Trainer};
use crate::vocab::{Vocab, BOS, EOS};

// ---- train ----

#[derive(Clone, Debug)]
pub struct TrainRequest {
    pub config: ModelConfig,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Continue from this checkpoint; its configuration wins except for
    /// `epochs`, which comes from `config`.
    pub resume: Option<PathBuf>,
    pub verbose: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub epochs: Vec<EpochLog>,
    pub best_val_loss: Option<f64>,
    pub last_checkpoint: PathBuf,
}

fn encode_all(examples: &[TextExample], vocab: &Vocab) -> Vec<Example> {
    examples.iter().map(|e| Example::encode(e, vocab)).collect()
}

pub fn cmd_train(req: &TrainRequest) -> Result<TrainSummary> {
    req.config.validate()?;
    std::fs::create_dir_all(&req.out_dir).map_err(|e| CatError::io(&req.out_dir, e))?;
    let raw = read_corpus(&req.train)?;
    let mut trainer = match &req.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            let mut t = Trainer::from_checkpoint(ck);
            t.model.config.epochs = req.config.epochs;
            checkpoint::check_vocab(
                &checkpoint::read_header(path)?,
                &build_vocab(&raw, t.model.config.min_freq),
            )?;
            t
        }
        None => Trainer::new(&req.config, build_vocab(&raw, req.config.min_freq))?,
    };
    let window = WindowConfig::from(trainer.config());
    let (train_text, _) = build_corpus(&raw, &window);
    if train_text.is_empty() {
        return Err(CatError::Config(format!("{} yields no training examples", req.train.display())));
    }
    let train = encode_all(&train_text, &trainer.vocab);
    let dev = match &req.dev {
        Some(p) => encode_all(&build_corpus(&read_corpus(p)?, &window).0, &trainer.vocab),
        None => Vec::new(),
    };
    let vocab_path = req.out_dir.join("vocab.json");
    let json = serde_json::to_string(&trainer.vocab).expect("vocab json");
    std::fs::write(&vocab_path, json).map_err(|e| CatError::io(&vocab_path, e))?;

    let opts = FitOptions {
        out_dir: Some(req.out_dir.clone()),
        verbose: req.verbose,
    };
    let epochs = trainer.fit(&train, (!dev.is_empty()).then_some(dev.as_slice()), &opts)?;
    let last = req.out_dir.join("last.ckpt");
    if epochs.is_empty() {
        trainer.save(&last)?;
    }
    Ok(TrainSummary {
        vocab_size: trainer.vocab.len(),
        vocab_hash: trainer.vocab.hash(),
        train_examples: train.len(),
        dev_examples: dev.len(),
        epochs,
        best_val_loss: trainer.progress.best_val_loss,
        last_checkpoint: last,
    })
}

// ---- decoding ----

/// One decoded example. The token fields are the metric inputs; the
/// knowledge-utilization context is `context` followed by
/// `last_utterance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: usize,
    pub dialogue: usize,
    pub turn: usize,
    pub transfer: Option<bool>,
    pub document: Vec<String>,
    /// History segments, oldest first.
    pub context: Vec<Vec<String>>,
    pub last_utterance: Vec<String>,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    #[serde(default)]
    pub hypothesis_log_prob: Option<f64>,
    /// Pass-2 log-probability of every reference token and the final EOS.
    #[serde(default)]
    pub reference_log_probs: Vec<f64>,
    #[serde(default)]
    pub gate: Option<f64>,
    #[serde(default)]
    pub empty_history: bool,
}

impl EvalRecord {
    pub fn triple(&self) -> Triple<String> {
        let mut context = self.context.clone();
        context.push(self.last_utterance.clone());
        Triple {
            document: self.document.clone(),
            context,
            response: self.hypothesis.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFilter {
    #[default]
    All,
    /// Same-topic and unlabeled examples.
    Reduced,
    /// Topic-transfer examples.
    Sampled,
}

impl SplitFilter {
    pub fn keeps(self, transfer: Option<bool>) -> bool {
        match self {
            SplitFilter::All => true,
            SplitFilter::Reduced => transfer != Some(true),
            SplitFilter::Sampled => transfer == Some(true),
        }
    }
}

impl std::str::FromStr for SplitFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(SplitFilter::All),
            "reduced" => Ok(SplitFilter::Reduced),
            "sampled" => Ok(SplitFilter::Sampled),
            other => Err(format!("unknown split {other:?} (all|reduced|sampled)")),
        }
    }
}

pub fn search_config(cfg: &ModelConfig, beam: usize) -> SearchConfig {
    SearchConfig {
        beam,
        max_len: cfg.max_utt_len,
        bos: BOS,
        eos: EOS,
        length_normalize: cfg.length_normalize,
    }
}

/// Beam-decodes `examples` and scores the references under teacher forcing.
pub fn decode_examples(
    model: &CatModel,
    store: &cat_tensor::ParamStore<f32>,
    vocab: &Vocab,
    examples: &[TextExample],
    beam: usize,
) -> Result<Vec<EvalRecord>> {
    let search = search_config(&model.config, beam);
    let mut out = Vec::with_capacity(examples.len());
    for (id, e) in examples.iter().enumerate() {
        let ex = Example::encode(e, vocab);
        let mut scorer = ModelScorer::new(model, store, ex.encoder_input())?;
        let hyp = beam_search(&mut scorer, &search)?;
        let dec_in = ex.decoder_input();
        let ref_lp = model.reference_log_probs(&mut scorer.session, &scorer.context, &dec_in, &ex.target)?;
        out.push(EvalRecord {
            id,
            dialogue: e.dialogue,
            turn: e.turn,
            transfer: e.transfer,
            document: e.document.clone(),
            context: e.history.clone(),
            last_utterance: e.last.clone(),
            reference: e.response.clone(),
            hypothesis: vocab.decode(hyp.content()),
            hypothesis_log_prob: Some(hyp.log_prob),
            reference_log_probs: ref_lp,
            gate: scorer.gate_value(),
            empty_history: scorer.context.empty_history,
        });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record json");
        writeln!(w, "{line}").map_err(|e| CatError::io(path, e))?;
    }
    w.flush().map_err(|e| CatError::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let file = std::fs::File::open(path).map_err(|e| CatError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CatError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

// ---- scoring ----

/// Metrics over one set of records; every value is `None` for an empty
/// set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: usize,
    pub perplexity: Option<f64>,
    pub bleu: Option<f64>,
    pub rouge_l: Option<f64>,
    pub ku2: Option<KuSummary>,
    pub ku3: Option<KuSummary>,
    pub qku2: Option<QkuSummary>,
    pub qku3: Option<QkuSummary>,
    pub gate_mean: Option<f64>,
    pub gate_std: Option<f64>,
    /// Examples whose gate was computed from an empty history.
    pub empty_history: usize,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

pub fn score_records(records: &[&EvalRecord]) -> Result<MetricReport> {
    let gates: Vec<f64> = records.iter().filter_map(|r| r.gate).collect();
    let (gate_mean, gate_std) = mean_std(&gates);
    let empty_history = records.iter().filter(|r| r.gate.is_some() && r.empty_history).count();
    if records.is_empty() {
        return Ok(MetricReport {
            examples: 0,
            perplexity: None,
            bleu: None,
            rouge_l: None,
            ku2: None,
            ku3: None,
            qku2: None,
            qku3: None,
            gate_mean,
            gate_std,
            empty_history,
        });
    }
    let hyps: Vec<&[String]> = records.iter().map(|r| r.hypothesis.as_slice()).collect();
    let refs: Vec<&[String]> = records.iter().map(|r| r.reference.as_slice()).collect();
    let triples: Vec<Triple<String>> = records.iter().map(|r| r.triple()).collect();
    let evals = |n: usize| triples.iter().map(|t| evaluate_triple(t, n)).collect::<Vec<_>>();
    let (e2, e3) = (evals(2), evals(3));
    let lps: Vec<f64> = records.iter().flat_map(|r| r.reference_log_probs.iter().copied()).collect();
    Ok(MetricReport {
        examples: records.len(),
        perplexity: if lps.is_empty() { None } else { Some(perplexity(&lps)?) },
        bleu: Some(bleu(&hyps, &refs, BleuOptions::default())?),
        rouge_l: Some(rouge_l_corpus(&hyps, &refs)?),
        ku2: Some(summarize_ku(&e2)),
        ku3: Some(summarize_ku(&e3)),
        qku2: Some(summarize_qku(&e2)),
        qku3: Some(summarize_qku(&e3)),
        gate_mean,
        gate_std,
        empty_history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: Option<String>,
    pub vocab_hash: Option<String>,
    pub test: String,
    pub filter: SplitFilter,
    pub beam: Option<usize>,
    pub overall: MetricReport,
    pub reduced: MetricReport,
    pub sampled: MetricReport,
}

/// Scores records overall and per split.
pub fn report_from_records(records: &[EvalRecord], test: &str, filter: SplitFilter) -> Result<EvalReport> {
    let all: Vec<&EvalRecord> = records.iter().collect();
    let pick = |f: SplitFilter| all.iter().copied().filter(|r| f.keeps(r.transfer)).collect::<Vec<_>>();
    Ok(EvalReport {
        checkpoint: None,
        vocab_hash: None,
        test: test.to_string(),
        filter,
        beam: None,
        overall: score_records(&all)?,
        reduced: score_records(&pick(SplitFilter::Reduced))?,
        sampled: score_records(&pick(SplitFilter::Sampled))?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    /// Aligned columns, one metric per row.
    pub fn to_text(&self) -> String {
        let cols = [&self.overall, &self.reduced, &self.sampled];
        type Getter = fn(&MetricReport) -> Option<f64>;
        let rows: [(&str, Getter); 11] = [
            ("examples", |m| Some(m.examples as f64)),
            ("PPL", |m| m.perplexity),
            ("BLEU", |m| m.bleu),
            ("ROUGE-L", |m| m.rouge_l),
            ("KU-2", |m| m.ku2.as_ref().and_then(|k| k.mean)),
            ("KU-3", |m| m.ku3.as_ref().and_then(|k| k.mean)),
            ("QKU-2", |m| m.qku2.as_ref().and_then(|k| k.mean)),
            ("QKU-3", |m| m.qku3.as_ref().and_then(|k| k.mean)),
            ("QKU-2 sum", |m| m.qku2.as_ref().map(|k| k.total)),
            ("QKU-3 sum", |m| m.qku3.as_ref().map(|k| k.total)),
            ("gate", |m| m.gate_mean),
        ];
        let mut s = String::new();
        if let Some(c) = &self.checkpoint {
            s += &format!("checkpoint  {c}\n");
        }
        s += &format!("test        {}\nfilter      {:?}\n\n", self.test, self.filter);
        s += &format!("{:<10} {:>12} {:>12} {:>12}\n", "metric", "overall", "reduced", "sampled");
        for (name, get) in rows {
            s += &format!("{name:<10}");
            for c in cols {
                let v = if name == "examples" { c.examples.to_string() } else { fmt_opt(get(c)) };
                s += &format!(" {v:>12}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: usize,
    dialogue: usize,
    turn: usize,
    split: &'a str,
    gate: Option<f64>,
    empty_history: bool,
    hypothesis_log_prob: Option<f64>,
    reference_nll: f64,
    reference_tokens: usize,
    rouge_l: f64,
    shared2: usize,
    novel2: usize,
    ku2: Option<f64>,
    qku2: Option<f64>,
    shared3: usize,
    novel3: usize,
    ku3: Option<f64>,
    qku3: Option<f64>,
    hypothesis: String,
    reference: String,
}

pub fn write_example_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        let t = r.triple();
        let (e2, e3) = (evaluate_triple(&t, 2), evaluate_triple(&t, 3));
        let row = CsvRow {
            id: r.id,
            dialogue: r.dialogue,
            turn: r.turn,
            split: if r.transfer == Some(true) { "sampled" } else { "reduced" },
            gate: r.gate,
            empty_history: r.empty_history,
            hypothesis_log_prob: r.hypothesis_log_prob,
            reference_nll: -r.reference_log_probs.iter().sum::<f64>(),
            reference_tokens: r.reference_log_probs.len(),
            rouge_l: rouge_l(&r.hypothesis, &r.reference).map(|x| x.f).unwrap_or(0.0),
            shared2: e2.shared,
            novel2: e2.novel,
            ku2: e2.ku,
            qku2: e2.qku,
            shared3: e3.shared,
            novel3: e3.novel,
            ku3: e3.ku,
            qku3: e3.qku,
            hypothesis: r.hypothesis.join(" "),
            reference: r.reference.join(" "),
        };
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CatError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CatError {
    CatError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

// ---- eval ----

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub test: PathBuf,
    pub filter: SplitFilter,
    /// Defaults to the checkpoint's beam size.
    pub beam: Option<usize>,
    /// When given, the checkpoint vocabulary must hash identically.
    pub expected_vocab: Option<Vocab>,
    /// Receives `decoded.jsonl`, `report.json`, `report.txt` and
    /// `examples.csv`.
    pub out_dir: Option<PathBuf>,
}

fn load_checked(path: &Path, expected: Option<&Vocab>) -> Result<Checkpoint> {
    if let Some(v) = expected {
        checkpoint::check_vocab(&checkpoint::read_header(path)?, v)?;
    }
    checkpoint::load(path)
}

pub fn cmd_eval(req: &EvalRequest) -> Result<EvalReport> {
    let ck = load_checked(&req.checkpoint, req.expected_vocab.as_ref())?;
    let window = WindowConfig::from(&ck.model.config);
    let (examples, _) = build_corpus(&read_corpus(&req.test)?, &window);
    let kept: Vec<TextExample> = examples.into_iter().filter(|e| req.filter.keeps(e.transfer)).collect();
    let beam = req.beam.unwrap_or(ck.model.config.beam_size);
    let records = decode_examples(&ck.model, &ck.store, &ck.header.vocab, &kept, beam)?;
    let mut report = report_from_records(&records, &req.test.display().to_string(), req.filter)?;
    report.checkpoint = Some(req.checkpoint.display().to_string());
    report.vocab_hash = Some(ck.header.vocab_hash.clone());
    report.beam = Some(beam);
    if let Some(dir) = &req.out_dir {
        write_eval_outputs(dir, &records, &report)?;
    }
    Ok(report)
}

/// Re-scores a decoded file without a model.
pub fn cmd_rescore(decoded: &Path, filter: SplitFilter, out_dir: Option<&Path>) -> Result<EvalReport> {
    let records: Vec<EvalRecord> = read_records(decoded)?
        .into_iter()
        .filter(|r| filter.keeps(r.transfer))
        .collect();
    let report = report_from_records(&records, &decoded.display().to_string(), filter)?;
    if let Some(dir) = out_dir {
        write_eval_outputs(dir, &records, &report)?;
    }
    Ok(report)
}

fn write_eval_outputs(dir: &Path, records: &[EvalRecord], report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CatError::io(dir, e))?;
    write_records(&dir.join("decoded.jsonl"), records)?;
    let json = serde_json::to_string_pretty(report).expect("report json");
    let p = dir.join("report.json");
    std::fs::write(&p, json).map_err(|e| CatError::io(&p, e))?;
    let p = dir.join("report.txt");
    std::fs::write(&p, report.to_text()).map_err(|e| CatError::io(&p, e))?;
    write_example_csv(&dir.join("examples.csv"), records)
}

// ---- generate ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Generation {
    pub dialogue: usize,
    pub turn: usize,
    pub last_utterance: String,
    pub response: String,
    pub log_prob: f64,
    pub gate: Option<f64>,
}

/// Decodes a response for every example of `input`, writing JSON lines
/// to `out`.
pub fn cmd_generate(checkpoint: &Path, input: &Path, out: &Path, beam: Option<usize>) -> Result<Vec<Generation>> {
    let ck = checkpoint::load(checkpoint)?;
    let (examples, _) = build_corpus(&read_corpus(input)?, &WindowConfig::from(&ck.model.config));
    let search = search_config(&ck.model.config, beam.unwrap_or(ck.model.config.beam_size));
    let vocab = &ck.header.vocab;
    let mut gens = Vec::with_capacity(examples.len());
    for e in &examples {
        let ex = Example::encode(e, vocab);
        let mut scorer = ModelScorer::new(&ck.model, &ck.store, ex.encoder_input())?;
        let hyp = beam_search(&mut scorer, &search)?;
        gens.push(Generation {
            dialogue: e.dialogue,
            turn: e.turn,
            last_utterance: crate::text::detokenize(&e.last),
            response: crate::text::detokenize(&vocab.decode(hyp.content())),
            log_prob: hyp.log_prob,
            gate: scorer.gate_value(),
        });
    }
    let file = std::fs::File::create(out).map_err(|e| CatError::io(out, e))?;
    let mut w = BufWriter::new(file);
    for g in &gens {
        writeln!(w, "{}", serde_json::to_string(g).expect("json")).map_err(|e| CatError::io(out, e))?;
    }
    w.flush().map_err(|e| CatError::io(out, e))?;
    Ok(gens)
}

// ---- gate report ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub rounds: usize,
    pub examples: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Examples with no history, whose gate used the zero pooled vector.
    pub empty_history: usize,
    pub same_topic_mean: Option<f64>,
    pub same_topic_examples: usize,
    pub transfer_mean: Option<f64>,
    pub transfer_examples: usize,
}

/// Gate values of `examples` under a model with a relevance gate.
pub fn gate_values(model: &CatModel, store: &cat_tensor::ParamStore<f32>, vocab: &Vocab, examples: &[TextExample]) -> Result<Vec<(f64, bool)>> {
    if model.gate.is_none() {
        return Err(CatError::Config(gate_missing(&model.config)));
    }
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        let ex = Example::encode(e, vocab);
        let mut s = cat_tensor::Session::new(store, cat_tensor::Graph::no_grad());
        let ctx = model.encode(&mut s, ex.encoder_input(), 0.0)?;
        let g = ctx.gate.expect("gated model");
        out.push((s.value(g).data()[0] as f64, ctx.empty_history));
    }
    Ok(out)
}

fn gate_missing(cfg: &ModelConfig) -> String {
    if cfg.decoder == DecoderKind::Edd {
        "the enhanced decoder has no concatenation gate; gate-report needs a dd checkpoint".into()
    } else {
        format!("ablation {:?} removes the relevance gate", cfg.ablation)
    }
}

/// Mean gate per history-rounds setting; writes a CSV when `out` is given.
pub fn cmd_gate_report(checkpoint: &Path, corpus: &Path, rounds: &[usize], out: Option<&Path>) -> Result<Vec<GateRow>> {
    let header = checkpoint::read_header(checkpoint)?;
    if header.config.decoder == DecoderKind::Edd || !matches!(header.config.ablation, crate::Ablation::None | crate::Ablation::WoG) {
        return Err(CatError::Config(gate_missing(&header.config)));
    }
    let ck = checkpoint::load(checkpoint)?;
    let raw = read_corpus(corpus)?;
    let mut model = ck.model;
    let mut rows = Vec::with_capacity(rounds.len());
    for &r in rounds {
        let window = WindowConfig {
            rounds: r,
            ..WindowConfig::from(&model.config)
        };
        let (examples, _) = build_corpus(&raw, &window);
        // positions are sinusoidal, so longer histories than in training
        // are representable
        let longest = examples.iter().map(|e| e.history_flat().len() + 1).max().unwrap_or(0);
        model.embed.max_len = model.embed.max_len.max(longest);
        let vals = gate_values(&model, &ck.store, &ck.header.vocab, &examples)?;
        let all: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let part = |want: bool| -> Vec<f64> {
            examples
                .iter()
                .zip(&vals)
                .filter(|(e, _)| (e.transfer == Some(true)) == want && e.transfer.is_some())
                .map(|(_, v)| v.0)
                .collect()
        };
        let (same, transfer) = (part(false), part(true));
        let (mean, std) = mean_std(&all);
        rows.push(GateRow {
            rounds: r,
            examples: all.len(),
            mean,
            std,
            empty_history: vals.iter().filter(|v| v.1).count(),
            same_topic_mean: mean_std(&same).0,
            same_topic_examples: same.len(),
            transfer_mean: mean_std(&transfer).0,
            transfer_examples: transfer.len(),
        });
    }
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for row in &rows {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| CatError::io(path, e))?;
    }
    Ok(rows)
}

// ---- synth ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub transfer_fraction: f64,
    pub files: Vec<SynthFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthFile {
    pub split: String,
    pub path: String,
    pub dialogues: usize,
    /// Random stream the split was drawn from.
    pub stream: u64,
    pub sha256: String,
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `manifest.json`.
/// `sizes` are dialogue counts per split.
pub fn cmd_synth(seed: u64, sizes: [usize; 3], transfer_fraction: f64, out_dir: &Path) -> Result<SynthManifest> {
    if !(0.0..=1.0).contains(&transfer_fraction) {
        return Err(CatError::Config(format!("transfer fraction {transfer_fraction} outside [0, 1]")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CatError::io(out_dir, e))?;
    let mut files = Vec::new();
    for (stream, (split, n)) in ["train", "dev", "test"].into_iter().zip(sizes).enumerate() {
        let cfg = SynthConfig {
            seed,
            dialogues: n,
            transfer_fraction,
        };
        let name = format!("{split}.jsonl");
        let path = out_dir.join(&name);
        write_corpus(&path, &synth_corpus(&cfg, stream as u64))?;
        let bytes = std::fs::read(&path).map_err(|e| CatError::io(&path, e))?;
        files.push(SynthFile {
            split: split.into(),
            path: name,
            dialogues: n,
            stream: stream as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = SynthManifest {
        seed,
        transfer_fraction,
        files,
    };
    let p = out_dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest json")).map_err(|e| CatError::io(&p, e))?;
    Ok(manifest)
}
