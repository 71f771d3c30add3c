use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cat_core::pipeline::{self, EvalRequest, SplitFilter, TrainRequest};
use cat_core::vocab::Vocab;
use cat_core::{Ablation, CatError, DecoderKind, ModelConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cat", version, about = "Compare-aggregate transformer for document-grounded dialogue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a JSON-lines dialogue corpus.
    Train(TrainArgs),
    /// Decode a test corpus and report PPL, BLEU, ROUGE-L, KU and QKU.
    Eval(EvalArgs),
    /// Write one generated response per example.
    Generate(GenerateArgs),
    /// Mean relevance gate per history-rounds setting.
    GateReport(GateArgs),
    /// Write a synthetic topic-transfer corpus.
    Synth(SynthArgs),
}

/// Configuration file plus per-field overrides; flags win.
#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale preset instead of the defaults.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    filter: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    decoder: Option<DecoderKind>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_doc_len: Option<usize>,
    #[arg(long)]
    max_utt_len: Option<usize>,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long, env = "CAT_SEED")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut c = match &self.config {
            Some(p) => ModelConfig::from_file(p)?,
            None if self.tiny => ModelConfig::tiny(),
            None => ModelConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field { c.$target = v; })*
            };
        }
        set!(hidden => hidden, heads => heads, layers => layers, filter => filter, dropout => dropout,
            decoder => decoder, ablation => ablation, rounds => history_rounds, epochs => epochs,
            batch_size => batch_size, beam_size => beam_size, max_doc_len => max_doc_len,
            max_utt_len => max_utt_len, min_freq => min_freq, seed => seed);
        if let Some(lr) = self.lr {
            c.adam.lr = lr;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training corpus (JSON lines).
    #[arg(long)]
    train: PathBuf,
    /// Validation corpus; selects `best.ckpt`.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint up to `--epochs`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to decode with; omit together with `--decoded` to
    /// re-score an existing file.
    #[arg(long, required_unless_present = "decoded")]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "decoded")]
    test: Option<PathBuf>,
    /// Previously written `decoded.jsonl` to score without a model.
    #[arg(long, conflicts_with_all = ["checkpoint", "test"])]
    decoded: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    split: SplitFilter,
    #[arg(long)]
    beam: Option<usize>,
    /// Vocabulary file (`vocab.json` from training) the checkpoint must match.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Directory for decoded.jsonl, report.json, report.txt, examples.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of the text table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct GateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated history-rounds settings.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    rounds: Vec<usize>,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, env = "CAT_SEED", default_value_t = 1)]
    seed: u64,
    /// Dialogues in the training split.
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    dev: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 0.5)]
    transfer_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing vocabulary {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let req = TrainRequest {
                config: a.config.resolve()?,
                train: a.train,
                dev: a.dev,
                out_dir: a.out,
                resume: a.resume,
                verbose: !a.quiet,
            };
            let summary = pipeline::cmd_train(&req)?;
            let last = summary.epochs.last();
            println!(
                "trained {} epochs on {} examples (vocab {}); final loss {}; checkpoints in {}",
                summary.epochs.len(),
                summary.train_examples,
                summary.vocab_size,
                last.map_or("-".into(), |l| format!("{:.4}", l.total)),
                req.out_dir.display()
            );
        }
        Command::Eval(a) => {
            let report = match a.decoded {
                Some(path) => pipeline::cmd_rescore(&path, a.split, a.out.as_deref())?,
                None => {
                    let req = EvalRequest {
                        checkpoint: a.checkpoint.expect("required by clap"),
                        test: a.test.expect("required by clap"),
                        filter: a.split,
                        beam: a.beam,
                        expected_vocab: a.vocab.as_deref().map(read_vocab).transpose()?,
                        out_dir: a.out,
                    };
                    pipeline::cmd_eval(&req)?
                }
            };
            if a.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Generate(a) => {
            let gens = pipeline::cmd_generate(&a.checkpoint, &a.input, &a.out, a.beam)?;
            println!("wrote {} responses to {}", gens.len(), a.out.display());
        }
        Command::GateReport(a) => {
            let rows = pipeline::cmd_gate_report(&a.checkpoint, &a.corpus, &a.rounds, a.out.as_deref())?;
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!("{:>6} {:>8} {:>8} {:>8} {:>6} {:>8} {:>8}", "rounds", "examples", "mean", "std", "empty", "same", "transfer");
            for r in rows {
                println!(
                    "{:>6} {:>8} {:>8} {:>8} {:>6} {:>8} {:>8}",
                    r.rounds,
                    r.examples,
                    f(r.mean),
                    f(r.std),
                    r.empty_history,
                    f(r.same_topic_mean),
                    f(r.transfer_mean)
                );
            }
        }
        Command::Synth(a) => {
            let m = pipeline::cmd_synth(a.seed, [a.train, a.dev, a.test], a.transfer_fraction, &a.out)?;
            for f in &m.files {
                println!("{:<5} {:>6} dialogues  {}", f.split, f.dialogues, a.out.join(&f.path).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<CatError>() {
                Some(CatError::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
