//! Seeded synthetic classification corpora.
//!
//! Every sentence has a fixed token count, so mask slots land at the same
//! positions in every input of a task.
//!
//! * `keyword_sentiment`: ten tokens, two to four of them drawn from the
//!   class's cue words, the rest from a shared pool of 100 distractors.
//! * `topic`: like sentiment with `K ∈ {2, 3, 5}` topics of six cue words.
//! * `pair_agreement`: two five-token segments, each holding one key
//!   token; the label says whether the keys match.
//! * `parity`: eight tokens over `{a, b}` padded with distractors;
//!   the label is the parity of the count of `a`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, RawExample};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const SENTENCE_LEN: usize = 10;
pub const DISTRACTORS: usize = 100;
/// Cue words per sentiment or topic sentence, inclusive range.
pub const CUES: (usize, usize) = (2, 4);

pub const POSITIVE: [&str; 6] = [
    "good",
    "great",
    "excellent",
    "superb",
    "wonderful",
    "lovely",
];
pub const NEGATIVE: [&str; 6] = ["bad", "awful", "terrible", "poor", "horrible", "dreadful"];

pub const TOPICS: [(&str, [&str; 6]); 5] = [
    (
        "sports",
        ["goal", "team", "match", "coach", "league", "season"],
    ),
    (
        "politics",
        ["vote", "party", "senate", "law", "policy", "election"],
    ),
    (
        "science",
        ["atom", "cell", "theory", "lab", "energy", "physics"],
    ),
    (
        "business",
        ["market", "stock", "profit", "trade", "bank", "price"],
    ),
    ("arts", ["music", "paint", "film", "poem", "dance", "novel"]),
];

const KEYS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    KeywordSentiment,
    PairAgreement,
    Topic(usize),
    Parity,
}

impl SynthTask {
    /// Accepts `keyword_sentiment`, `pair_agreement`, `parity`, and
    /// `topic` (three classes) or `topic2`/`topic3`/`topic5`.
    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "keyword_sentiment" | "sentiment" => Ok(Self::KeywordSentiment),
            "pair_agreement" | "pair" => Ok(Self::PairAgreement),
            "parity" => Ok(Self::Parity),
            "topic" => Ok(Self::Topic(3)),
            t => match t.strip_prefix("topic").map(str::parse::<usize>) {
                Some(Ok(k @ (2 | 3 | 5))) => Ok(Self::Topic(k)),
                _ => Err(Error::Input(format!("unknown synthetic task {s:?}"))),
            },
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::Topic(k) => k,
            _ => 2,
        }
    }

    /// Single-token verbalizer words per class, in class order.
    pub fn verbalizer_words(self) -> Vec<(String, Vec<String>)> {
        let pair = |a: &str, wa: &str, b: &str, wb: &str| {
            vec![
                (a.to_string(), vec![wa.to_string()]),
                (b.to_string(), vec![wb.to_string()]),
            ]
        };
        match self {
            Self::KeywordSentiment => pair("negative", "bad", "positive", "good"),
            Self::PairAgreement => pair("no", "no", "yes", "yes"),
            Self::Parity => pair("even", "even", "odd", "odd"),
            Self::Topic(k) => {
                let mut v: Vec<(String, Vec<String>)> = TOPICS[..k]
                    .iter()
                    .map(|(name, words)| (name.to_string(), vec![words[0].to_string()]))
                    .collect();
                v.sort();
                v
            }
        }
    }

    /// Words the task's inputs never contain but its verbalizers use.
    pub fn extra_words(self) -> Vec<String> {
        match self {
            Self::PairAgreement => vec!["yes".into(), "no".into()],
            Self::Parity => vec!["even".into(), "odd".into()],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::KeywordSentiment => f.write_str("keyword_sentiment"),
            Self::PairAgreement => f.write_str("pair_agreement"),
            Self::Topic(k) => write!(f, "topic{k}"),
            Self::Parity => f.write_str("parity"),
        }
    }
}

fn distractor(rng: &mut Rng) -> String {
    format!("w{:03}", rng.below(DISTRACTORS))
}

/// `len` tokens with `cues` placed at random distinct positions.
fn sentence(rng: &mut Rng, len: usize, cues: &[&str]) -> String {
    let mut toks: Vec<String> = (0..len).map(|_| distractor(rng)).collect();
    let mut slots: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut slots);
    for (slot, cue) in slots.iter().zip(cues) {
        toks[*slot] = cue.to_string();
    }
    toks.join(" ")
}

fn cue_sentence(rng: &mut Rng, words: &[&str]) -> String {
    let count = CUES.0 + rng.below(CUES.1 - CUES.0 + 1);
    let cues: Vec<&str> = (0..count).map(|_| words[rng.below(words.len())]).collect();
    sentence(rng, SENTENCE_LEN, &cues)
}

/// `n` examples with labels balanced up to one, in shuffled order.
pub fn generate(task: SynthTask, n: usize, seed: u64) -> Corpus {
    let mut rng = Rng::derive(seed, &task.to_string());
    let k = task.num_classes();
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let ex = match task {
            SynthTask::KeywordSentiment => {
                let (label, words) = if class == 0 {
                    ("negative", &NEGATIVE)
                } else {
                    ("positive", &POSITIVE)
                };
                RawExample::single(cue_sentence(&mut rng, words), label)
            }
            SynthTask::Topic(_) => {
                let (label, words) = &TOPICS[class];
                RawExample::single(cue_sentence(&mut rng, words), *label)
            }
            SynthTask::PairAgreement => {
                let a = rng.below(KEYS);
                let b = if class == 1 {
                    a
                } else {
                    (a + 1 + rng.below(KEYS - 1)) % KEYS
                };
                let ka = format!("k{a:02}");
                let kb = format!("k{b:02}");
                RawExample::pair(
                    sentence(&mut rng, 5, &[&ka]),
                    sentence(&mut rng, 5, &[&kb]),
                    if class == 1 { "yes" } else { "no" },
                )
            }
            SynthTask::Parity => {
                let len = 8;
                let mut count_a = 0;
                let mut toks: Vec<&str> = (0..len)
                    .map(|_| {
                        if rng.below(2) == 0 {
                            count_a += 1;
                            "a"
                        } else {
                            "b"
                        }
                    })
                    .collect();
                if count_a % 2 != class {
                    // Flip one token to land in the intended class.
                    toks[0] = if toks[0] == "a" { "b" } else { "a" };
                }
                let mut text = toks.join(" ");
                text.push(' ');
                text.push_str(&distractor(&mut rng));
                RawExample::single(text, if class == 0 { "even" } else { "odd" })
            }
        };
        examples.push(ex);
    }
    rng.shuffle(&mut examples);
    Corpus::new(examples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        for task in [
            SynthTask::KeywordSentiment,
            SynthTask::Topic(5),
            SynthTask::PairAgreement,
            SynthTask::Parity,
        ] {
            let a = generate(task, 50, 3);
            assert_eq!(a, generate(task, 50, 3));
            assert_ne!(a, generate(task, 50, 4));
            let classes = a.classes();
            assert_eq!(classes.len(), task.num_classes());
            for c in &classes {
                let n = a.examples.iter().filter(|e| &e.label == c).count();
                assert!(n >= 50 / task.num_classes(), "{task} {c}: {n}");
            }
        }
    }

    #[test]
    fn labels_follow_the_rule() {
        for e in generate(SynthTask::Parity, 40, 1).examples {
            let a = e.text_a.split(' ').filter(|t| *t == "a").count();
            assert_eq!(e.label == "odd", a % 2 == 1);
        }
        for e in generate(SynthTask::PairAgreement, 40, 1).examples {
            let key = |s: &str| {
                s.split(' ')
                    .find(|t| t.starts_with('k'))
                    .unwrap()
                    .to_string()
            };
            let same = key(&e.text_a) == key(e.text_b.as_deref().unwrap());
            assert_eq!(e.label == "yes", same);
        }
        for e in generate(SynthTask::KeywordSentiment, 40, 1).examples {
            assert_eq!(e.text_a.split(' ').count(), SENTENCE_LEN);
            let pos = e.text_a.split(' ').any(|t| POSITIVE.contains(&t));
            assert_eq!(e.label == "positive", pos);
        }
    }

    #[test]
    fn parses_names() {
        assert_eq!(SynthTask::parse("topic5").unwrap(), SynthTask::Topic(5));
        assert_eq!(
            SynthTask::parse("keyword-sentiment").unwrap(),
            SynthTask::KeywordSentiment
        );
        assert!(SynthTask::parse("topic4").is_err());
    }
}
