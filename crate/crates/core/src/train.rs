//! Teacher-forced training with Adam.
//!
//! Each batch sums the two-pass loss of its examples and divides by the
//! number of target tokens, so the optimized objective is the mean
//! per-token loss; logs report both that and the per-example two-pass sum.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cat_tensor::{AdamState, Graph, ParamStore, Session, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Progress};
use crate::config::ModelConfig;
use crate::data::Example;
use crate::decoders::two_pass_loss;
use crate::error::{CatError, Result};
use crate::model::{CatModel, ModelInput};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over examples of the summed pass-1 negative log-likelihood.
    pub pass1: f64,
    pub pass2: f64,
    /// `pass1 + pass2`: the per-example two-pass loss.
    pub total: f64,
    /// Mean per-token loss, the optimized objective.
    pub token_loss: f64,
    pub val: Option<LossReport>,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean per-example two-pass loss.
    pub total: f64,
    pub token_loss: f64,
    /// `exp` of the mean pass-2 negative log-likelihood per token.
    pub perplexity: f64,
    pub examples: usize,
    pub tokens: usize,
}

pub struct Trainer {
    pub model: CatModel,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub vocab: Vocab,
    pub progress: Progress,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where checkpoints, the JSON-lines log and diagnostic dumps go.
    pub out_dir: Option<PathBuf>,
    /// Echo a line per epoch to stderr.
    pub verbose: bool,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ b.wrapping_mul(0x94D0_49BB_1331_11EB)
}

impl Trainer {
    pub fn new(config: &ModelConfig, vocab: Vocab) -> Result<Self> {
        let (model, store) = CatModel::new(config, vocab.len(), config.seed)?;
        Ok(Self {
            adam: AdamState::new(config.adam.into()),
            model,
            store,
            vocab,
            progress: Progress::default(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        let adam = ck.adam.unwrap_or_else(|| AdamState::new(ck.header.config.adam.into()));
        Self {
            model: ck.model,
            store: ck.store,
            adam,
            vocab: ck.header.vocab,
            progress: ck.header.progress,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.model, &self.store, &self.vocab, Some(&self.adam), &self.progress)
    }

    /// One optimizer step over `batch`. Returns per-example (pass1, pass2)
    /// losses and the token count.
    fn step(&mut self, batch: &[&Example], seed: u64) -> Result<(Vec<(f64, f64)>, usize)> {
        let dropout = self.model.config.dropout;
        let mut graph = Graph::new();
        if dropout > 0.0 {
            graph = graph.with_dropout_seed(seed);
        }
        let mut s = Session::new(&self.store, graph);
        let mut losses = Vec::with_capacity(batch.len());
        let mut sum = None;
        let mut tokens = 0;
        for ex in batch {
            let dec_in = ex.decoder_input();
            let input = ModelInput {
                encoder: ex.encoder_input(),
                decoder_input: &dec_in,
            };
            let (loss, _) = self.model.loss(&mut s, input, &ex.target, dropout)?;
            losses.push((s.value(loss.pass1).data()[0] as f64, s.value(loss.pass2).data()[0] as f64));
            tokens += ex.target.len();
            sum = Some(match sum {
                None => loss.total,
                Some(acc) => s.add(acc, loss.total)?,
            });
        }
        let sum = sum.ok_or_else(|| CatError::Contract("empty batch".into()))?;
        if !losses.iter().all(|(a, b)| a.is_finite() && b.is_finite()) {
            return Err(TensorError::NonFinite { op: "loss" }.into());
        }
        let objective = s.scale(sum, 1.0 / tokens as f64)?;
        s.backward(objective)?;
        let grads = s.param_grads();
        drop(s);
        self.store.zero_grad();
        self.store.accumulate(&grads)?;
        self.adam.step_store(&mut self.store)?;
        Ok((losses, tokens))
    }

    /// Trains one epoch; batches are drawn from a shuffle seeded by the
    /// config seed and the epoch number.
    pub fn train_epoch(&mut self, data: &[Example], opts: &FitOptions) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(CatError::Config("no training examples".into()));
        }
        let epoch = self.progress.epoch + 1;
        let seed = self.model.config.seed;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0)));
        let start = Instant::now();
        let (mut p1, mut p2, mut tokens) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(self.model.config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            match self.step(&batch, mix(seed, epoch as u64, b as u64 + 1)) {
                Ok((losses, n)) => {
                    for (a, c) in losses {
                        p1 += a;
                        p2 += c;
                    }
                    tokens += n;
                }
                Err(CatError::Tensor(TensorError::NonFinite { op })) => {
                    self.dump(opts, epoch, b, chunk, op);
                    return Err(CatError::NonFiniteLoss { epoch, batch: b });
                }
                Err(e) => return Err(e),
            }
        }
        let n = data.len() as f64;
        self.progress.epoch = epoch;
        Ok(EpochLog {
            epoch,
            pass1: p1 / n,
            pass2: p2 / n,
            total: (p1 + p2) / n,
            token_loss: (p1 + p2) / tokens as f64,
            val: None,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn dump(&self, opts: &FitOptions, epoch: usize, batch: usize, examples: &[usize], op: &str) {
        let norms: Vec<(String, f64)> = self
            .store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()))
            .collect();
        let dump = serde_json::json!({
            "epoch": epoch,
            "batch": batch,
            "examples": examples,
            "first_non_finite_op": op,
            "adam_step": self.adam.step_count(),
            "param_norms": norms,
        });
        let text = serde_json::to_string_pretty(&dump).expect("json");
        match &opts.out_dir {
            Some(dir) => {
                let path = dir.join("nan_dump.json");
                if std::fs::write(&path, &text).is_ok() {
                    eprintln!("non-finite loss; diagnostics written to {}", path.display());
                } else {
                    eprintln!("non-finite loss; diagnostics:\n{text}");
                }
            }
            None => eprintln!("non-finite loss; diagnostics:\n{text}"),
        }
    }

    /// Loss and perplexity without dropout or parameter updates.
    pub fn evaluate(&self, data: &[Example]) -> Result<LossReport> {
        evaluate_loss(&self.model, &self.store, data)
    }

    /// Runs epochs until `config.epochs` have completed, tracking the best
    /// validation loss and writing checkpoints when an output directory is
    /// given.
    pub fn fit(&mut self, train: &[Example], val: Option<&[Example]>, opts: &FitOptions) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.progress.epoch < self.model.config.epochs {
            let mut log = self.train_epoch(train, opts)?;
            if let Some(v) = val.filter(|v| !v.is_empty()) {
                log.val = Some(self.evaluate(v)?);
            }
            let improved = match (log.val, self.progress.best_val_loss) {
                (Some(v), Some(best)) => v.token_loss < best,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                self.progress.best_val_loss = log.val.map(|v| v.token_loss);
            }
            self.progress.history.push(log.clone());
            if opts.verbose {
                eprintln!(
                    "epoch {:>3}  loss {:.4} (pass1 {:.4}, pass2 {:.4})  token {:.4}{}  {:.1}s",
                    log.epoch,
                    log.total,
                    log.pass1,
                    log.pass2,
                    log.token_loss,
                    log.val.map(|v| format!("  val {:.4} ppl {:.3}", v.token_loss, v.perplexity)).unwrap_or_default(),
                    log.seconds
                );
            }
            if let Some(dir) = &opts.out_dir {
                append_log(&dir.join("train_log.jsonl"), &log)?;
                if improved {
                    self.save(&dir.join("best.ckpt"))?;
                }
                let every = self.model.config.checkpoint_every;
                if every > 0 && log.epoch % every == 0 {
                    self.save(&dir.join(format!("epoch-{:03}.ckpt", log.epoch)))?;
                }
                self.save(&dir.join("last.ckpt"))?;
            }
            logs.push(log);
        }
        Ok(logs)
    }
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CatError::io(path, e))?;
    let line = serde_json::to_string(log).expect("json");
    writeln!(f, "{line}").map_err(|e| CatError::io(path, e))
}

pub fn evaluate_loss(model: &CatModel, store: &ParamStore<f32>, data: &[Example]) -> Result<LossReport> {
    if data.is_empty() {
        return Err(CatError::Contract("evaluation over zero examples".into()));
    }
    let (mut total, mut pass2, mut tokens) = (0.0, 0.0, 0usize);
    for ex in data {
        let mut s = Session::new(store, Graph::no_grad());
        let dec_in = ex.decoder_input();
        let input = ModelInput {
            encoder: ex.encoder_input(),
            decoder_input: &dec_in,
        };
        let ctx = model.encode(&mut s, input.encoder, 0.0)?;
        let dec = model.decode(&mut s, &ctx, input.decoder_input, 0.0)?;
        let loss = two_pass_loss(&mut s, dec.logits1, dec.logits2, &ex.target, 0.0)?;
        total += s.value(loss.total).data()[0] as f64;
        pass2 += s.value(loss.pass2).data()[0] as f64;
        tokens += ex.target.len();
    }
    Ok(LossReport {
        total: total / data.len() as f64,
        token_loss: total / tokens as f64,
        perplexity: (pass2 / tokens as f64).exp(),
        examples: data.len(),
        tokens,
    })
}
