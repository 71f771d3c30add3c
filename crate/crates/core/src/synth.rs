//! Synthetic topic-transfer corpus.
//!
//! Each document has 2–4 sections, one per person, listing templated facts.
//! A dialogue opens with two greeting turns, then asks about one person
//! (explicitly named) and gets an answer. The second question either stays
//! with that person, referring to them only as "they", or moves to another
//! person's section by name; the move happens with probability
//! `transfer_fraction`. Answers always name the person.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RawDialogue, Turn};

const NAMES: [&str; 8] = ["alice", "bruno", "chloe", "dmitri", "elena", "farid", "grace", "hugo"];
const CITIES: [&str; 8] = ["paris", "lima", "oslo", "cairo", "tokyo", "quito", "dublin", "hanoi"];
const FOODS: [&str; 8] = ["pizza", "sushi", "tacos", "curry", "pasta", "salad", "ramen", "soup"];
const JOBS: [&str; 8] = ["doctor", "pilot", "teacher", "farmer", "lawyer", "chef", "nurse", "baker"];
const SPORTS: [&str; 8] = ["tennis", "soccer", "chess", "golf", "rugby", "hockey", "boxing", "rowing"];
const GREETINGS: [(&str, &str); 3] = [
    ("hello there !", "hi , how are you ?"),
    ("hey , good morning .", "good morning to you ."),
    ("hi !", "hello , nice to meet you ."),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Attr {
    City,
    Food,
    Job,
    Sport,
}

const ATTRS: [Attr; 4] = [Attr::City, Attr::Food, Attr::Job, Attr::Sport];

#[derive(Clone, Debug)]
struct Person {
    name: &'static str,
    city: &'static str,
    food: &'static str,
    job: &'static str,
    sport: &'static str,
}

impl Person {
    fn fact(&self, a: Attr) -> String {
        match a {
            Attr::City => format!("{} lives in {} .", self.name, self.city),
            Attr::Food => format!("{} likes {} .", self.name, self.food),
            Attr::Job => format!("{} works as a {} .", self.name, self.job),
            Attr::Sport => format!("{} plays {} .", self.name, self.sport),
        }
    }
}

fn question(subject: &str, a: Attr) -> String {
    match a {
        Attr::City => format!("where does {subject} live ?"),
        Attr::Food => format!("what does {subject} like to eat ?"),
        Attr::Job => format!("what does {subject} do for work ?"),
        Attr::Sport => format!("which sport does {subject} play ?"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub dialogues: usize,
    pub transfer_fraction: f64,
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    *xs.choose(rng).expect("non-empty")
}

fn dialogue(rng: &mut ChaCha8Rng, transfer_fraction: f64) -> RawDialogue {
    let n_sections = rng.gen_range(2..=4);
    let names: Vec<&str> = NAMES.choose_multiple(rng, n_sections).copied().collect();
    let people: Vec<Person> = names
        .iter()
        .map(|&name| Person {
            name,
            city: pick(rng, &CITIES),
            food: pick(rng, &FOODS),
            job: pick(rng, &JOBS),
            sport: pick(rng, &SPORTS),
        })
        .collect();
    let sections = people
        .iter()
        .map(|p| {
            let mut attrs = ATTRS;
            attrs.shuffle(rng);
            attrs.iter().map(|&a| p.fact(a)).collect::<Vec<_>>().join(" ")
        })
        .collect();

    let (hello, reply) = pick(rng, &GREETINGS);
    let first = rng.gen_range(0..n_sections);
    let a1 = pick(rng, &ATTRS);
    let transfer = rng.gen_bool(transfer_fraction.clamp(0.0, 1.0));
    let (second, subject) = if transfer {
        let others: Vec<usize> = (0..n_sections).filter(|&i| i != first).collect();
        let s = pick(rng, &others);
        (s, people[s].name)
    } else {
        (first, "they")
    };
    let remaining: Vec<Attr> = ATTRS.iter().copied().filter(|&a| transfer || a != a1).collect();
    let a2 = pick(rng, &remaining);

    let t = |speaker: &str, text: String, section: Option<usize>| Turn {
        speaker: speaker.into(),
        text,
        section,
    };
    let turns = vec![
        t("A", hello.into(), None),
        t("B", reply.into(), None),
        t("A", question(people[first].name, a1), Some(first)),
        t("B", people[first].fact(a1), Some(first)),
        t("A", question(subject, a2), Some(second)),
        t("B", people[second].fact(a2), Some(second)),
    ];
    RawDialogue { sections, turns }
}

/// Deterministic in `seed`; `stream` separates train/dev/test draws.
pub fn synth_corpus(cfg: &SynthConfig, stream: u64) -> Vec<RawDialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    (0..cfg.dialogues).map(|_| dialogue(&mut rng, cfg.transfer_fraction)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_corpus, WindowConfig};

    fn window() -> WindowConfig {
        WindowConfig {
            rounds: 2,
            remove_greetings: 2,
            max_doc_len: 800,
            max_utt_len: 40,
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let cfg = SynthConfig {
            seed: 3,
            dialogues: 20,
            transfer_fraction: 0.5,
        };
        let a = synth_corpus(&cfg, 0);
        assert_eq!(a, synth_corpus(&cfg, 0));
        assert_ne!(a, synth_corpus(&cfg, 1));
        let (ex, stats) = build_corpus(&a, &window());
        assert_eq!(stats.examples, 40);
        assert!(ex.iter().all(|e| e.transfer.is_some()));
        for d in &a {
            assert!((2..=4).contains(&d.sections.len()));
        }
    }

    #[test]
    fn zero_fraction_never_transfers() {
        let cfg = SynthConfig {
            seed: 9,
            dialogues: 200,
            transfer_fraction: 0.0,
        };
        let (ex, _) = build_corpus(&synth_corpus(&cfg, 0), &window());
        assert!(ex.iter().all(|e| e.transfer == Some(false)));
    }
}
