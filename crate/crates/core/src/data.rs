//! Corpus ingestion and preprocessing: speaker merging, greeting removal,
//! sliding-window example construction with truncation, topic-transfer
//! labels and the Sampled/Reduced split.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CatError, Result};
use crate::metrics::Triple;
use crate::text::tokenize;
use crate::vocab::{Vocab, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
    /// Index into the dialogue's document sections, when known.
    #[serde(default)]
    pub section: Option<usize>,
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDialogue {
    pub sections: Vec<String>,
    pub turns: Vec<Turn>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<RawDialogue>> {
    let file = File::open(path).map_err(|e| CatError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: RawDialogue = serde_json::from_str(&line).map_err(|e| CatError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(d);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, dialogues: &[RawDialogue]) -> Result<()> {
    let file = File::create(path).map_err(|e| CatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in dialogues {
        let line = serde_json::to_string(d).expect("serializable");
        writeln!(w, "{line}").map_err(|e| CatError::io(path, e))?;
    }
    w.flush().map_err(|e| CatError::io(path, e))
}

/// Joins adjacent turns of the same speaker with a space. A merged turn
/// keeps the first known section of its parts.
pub fn merge_speakers(raw: &RawDialogue) -> RawDialogue {
    let mut turns: Vec<Turn> = Vec::with_capacity(raw.turns.len());
    for t in &raw.turns {
        match turns.last_mut() {
            Some(prev) if prev.speaker == t.speaker => {
                prev.text.push(' ');
                prev.text.push_str(&t.text);
                prev.section = prev.section.or(t.section);
            }
            _ => turns.push(t.clone()),
        }
    }
    RawDialogue {
        sections: raw.sections.clone(),
        turns,
    }
}

/// Windowing and truncation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Number of history utterances before the last utterance.
    pub rounds: usize,
    /// Leading turns dropped from every dialogue.
    pub remove_greetings: usize,
    pub max_doc_len: usize,
    pub max_utt_len: usize,
}

impl From<&ModelConfig> for WindowConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            rounds: c.history_rounds,
            remove_greetings: c.remove_greetings,
            max_doc_len: c.max_doc_len,
            max_utt_len: c.max_utt_len,
        }
    }
}

/// A tokenized, truncated example before vocabulary lookup. Every length
/// leaves room for the BOS/EOS added at encoding time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub dialogue: usize,
    /// Index of the target turn in the merged dialogue.
    pub turn: usize,
    pub document: Vec<String>,
    /// One segment per history utterance, oldest first.
    pub history: Vec<Vec<String>>,
    pub last: Vec<String>,
    pub response: Vec<String>,
    /// `Some(true)` when the last utterance leaves the history's majority
    /// section; `None` without section labels.
    pub transfer: Option<bool>,
}

impl TextExample {
    /// Knowledge-utilization triple for a hypothesis: the context is every
    /// history segment plus the last utterance.
    pub fn triple(&self, response: Vec<String>) -> Triple<String> {
        let mut context = self.history.clone();
        context.push(self.last.clone());
        Triple {
            document: self.document.clone(),
            context,
            response,
        }
    }

    pub fn history_flat(&self) -> Vec<String> {
        self.history.iter().flatten().cloned().collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub dialogues: usize,
    pub examples: usize,
    /// Dialogues too short to yield any example.
    pub skipped_dialogues: usize,
}

fn truncated(text: &str, max: usize) -> Vec<String> {
    let mut t = tokenize(text);
    t.truncate(max);
    t
}

/// Transfer iff `last` is not among the modal sections of `history`; ties
/// count as same-topic.
pub fn transfer_label(history: &[Option<usize>], last: Option<usize>) -> Option<bool> {
    let last = last?;
    if history.is_empty() {
        return None;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in history {
        *counts.entry((*s)?).or_insert(0) += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    Some(counts.get(&last).copied().unwrap_or(0) < top)
}

/// Sliding window over one merged dialogue. After dropping the first
/// `remove_greetings` turns, every turn with a predecessor becomes a target:
/// the predecessor is `L`, up to `rounds` turns before it are `H`. With
/// `rounds > 0` at least one history turn is required.
pub fn build_examples(raw: &RawDialogue, dialogue: usize, w: &WindowConfig) -> Vec<TextExample> {
    let turns = raw.turns.get(w.remove_greetings..).unwrap_or(&[]);
    let document: Vec<String> = {
        let mut d = tokenize(&raw.sections.join(" "));
        d.truncate(w.max_doc_len.saturating_sub(1));
        d
    };
    let utt = w.max_utt_len.saturating_sub(1);
    let first_target = if w.rounds == 0 { 1 } else { 2 };
    let mut out = Vec::new();
    for j in first_target..turns.len() {
        let l = j - 1;
        let h_start = l.saturating_sub(w.rounds);
        let hist = &turns[h_start..l];
        let history = hist.iter().map(|t| truncated(&t.text, utt)).collect();
        let sections: Vec<Option<usize>> = hist.iter().map(|t| t.section).collect();
        out.push(TextExample {
            dialogue,
            turn: j + w.remove_greetings,
            document: document.clone(),
            history,
            last: truncated(&turns[l].text, utt),
            response: truncated(&turns[j].text, utt),
            transfer: transfer_label(&sections, turns[l].section),
        });
    }
    out
}

/// Merges speakers and windows every dialogue.
pub fn build_corpus(dialogues: &[RawDialogue], w: &WindowConfig) -> (Vec<TextExample>, BuildStats) {
    let mut stats = BuildStats {
        dialogues: dialogues.len(),
        ..BuildStats::default()
    };
    let mut out = Vec::new();
    for (i, d) in dialogues.iter().enumerate() {
        let ex = build_examples(&merge_speakers(d), i, w);
        if ex.is_empty() {
            stats.skipped_dialogues += 1;
        }
        out.extend(ex);
    }
    stats.examples = out.len();
    (out, stats)
}

/// Indices into a test set: `sampled` holds topic-transfer examples, and
/// `reduced` everything else (same-topic or unlabeled).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub sampled: Vec<usize>,
    pub reduced: Vec<usize>,
}

pub fn make_sampled_split(examples: &[TextExample]) -> Splits {
    let mut s = Splits::default();
    for (i, e) in examples.iter().enumerate() {
        if e.transfer == Some(true) {
            s.sampled.push(i);
        } else {
            s.reduced.push(i);
        }
    }
    s
}

/// Vocabulary over the documents and turns of a training corpus, each
/// text counted once.
pub fn build_vocab(dialogues: &[RawDialogue], min_freq: usize) -> Vocab {
    let mut all: Vec<String> = Vec::new();
    for d in dialogues {
        all.extend(d.sections.iter().flat_map(|s| tokenize(s)));
        all.extend(d.turns.iter().flat_map(|t| tokenize(&t.text)));
    }
    Vocab::build(all.iter().map(String::as_str), min_freq)
}

/// Model-ready ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub document: Vec<usize>,
    pub history: Vec<usize>,
    pub last: Vec<usize>,
    /// Response followed by EOS.
    pub target: Vec<usize>,
    pub transfer: Option<bool>,
}

impl Example {
    pub fn encode(e: &TextExample, vocab: &Vocab) -> Self {
        let with_bos = |toks: &[String]| {
            let mut v = vec![BOS];
            v.extend(vocab.encode(toks));
            v
        };
        let history = if e.history.is_empty() {
            Vec::new()
        } else {
            with_bos(&e.history_flat())
        };
        let mut target = vocab.encode(&e.response);
        target.push(EOS);
        Self {
            document: with_bos(&e.document),
            history,
            last: with_bos(&e.last),
            target,
            transfer: e.transfer,
        }
    }

    /// BOS followed by the target without its final token.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.target.len());
        v.push(BOS);
        v.extend_from_slice(&self.target[..self.target.len() - 1]);
        v
    }

    pub fn encoder_input(&self) -> crate::encoder::EncoderInput<'_> {
        crate::encoder::EncoderInput {
            document: &self.document,
            history: &self.history,
            last: &self.last,
        }
    }
}

/// Maps one CMU Document Grounded Conversations record onto the corpus
/// format. `conversation` is the dataset's per-conversation JSON
/// (`history: [{docIdx, text, uid}]`); `sections` are the texts of the
/// referenced document's sections in index order. The dataset itself is
/// not bundled.
pub fn convert_cmudog(conversation: &serde_json::Value, sections: Vec<String>) -> Result<RawDialogue> {
    let bad = |m: &str| CatError::Parse {
        path: "<cmudog>".into(),
        line: 0,
        message: m.to_string(),
    };
    let history = conversation
        .get("history")
        .and_then(|h| h.as_array())
        .ok_or_else(|| bad("missing `history` array"))?;
    let mut turns = Vec::with_capacity(history.len());
    for h in history {
        let text = h.get("text").and_then(|t| t.as_str()).ok_or_else(|| bad("turn without `text`"))?;
        let speaker = h.get("uid").and_then(|u| u.as_str()).ok_or_else(|| bad("turn without `uid`"))?;
        let section = h.get("docIdx").and_then(|d| d.as_u64()).map(|d| d as usize);
        turns.push(Turn {
            speaker: speaker.to_string(),
            text: text.to_string(),
            section,
        });
    }
    Ok(RawDialogue { sections, turns })
}
