//! Toy whitespace tokenizer and conversion of raw inputs into masked
//! inputs with `M` mask tokens and no textual pattern.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token ↔ id map. Specials occupy ids 0..5; corpus tokens follow in
/// descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, extra: &[&str]) -> Self {
        let mut freq: HashMap<String, u64> = HashMap::new();
        for t in texts {
            for w in split(t) {
                *freq.entry(w).or_default() += 1;
            }
        }
        for e in extra {
            freq.entry(e.to_lowercase()).or_default();
        }
        let mut entries: Vec<(String, u64)> = freq
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; SPECIALS.len()];
        for (w, c) in entries {
            tokens.push(w);
            counts.push(c);
        }
        Self::from_parts(tokens, counts)
    }

    /// Vocabulary with the specials followed by `tokens` in the given order.
    pub fn from_tokens(tokens: &[&str]) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.iter().map(|t| t.to_lowercase()));
        let counts = vec![0; all.len()];
        Self::from_parts(all, counts)
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            counts,
            index,
        }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// The `n` most frequent non-special ids.
    pub fn top_ids(&self, n: usize) -> Vec<usize> {
        (SPECIALS.len()..self.len()).take(n).collect()
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }
}

fn split(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Whitespace split, lowercase, unknown tokens map to UNK.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    split(text).map(|w| vocab.id(&w)).collect()
}

/// Where the mask tokens go.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLayout {
    /// `[CLS] s MASK… [SEP]`
    SingleSentenceSuffix,
    /// `[CLS] s1 MASK… s2 [SEP]`
    PairBetween,
    /// `[CLS] s1 s2 MASK… [SEP]`
    PairSuffix,
    /// `[CLS] s1 [SEP] | MASK… s2 [SEP]`
    PairTwoSegmentPrefix,
    /// `[CLS] s1 [SEP] | s2 MASK… [SEP]`
    PairTwoSegmentSuffix,
}

impl MaskLayout {
    pub const PAIR_LAYOUTS: [MaskLayout; 4] = [
        MaskLayout::PairSuffix,
        MaskLayout::PairBetween,
        MaskLayout::PairTwoSegmentPrefix,
        MaskLayout::PairTwoSegmentSuffix,
    ];

    pub fn is_pair(self) -> bool {
        self != MaskLayout::SingleSentenceSuffix
    }

    fn specials(self) -> usize {
        match self {
            MaskLayout::PairTwoSegmentPrefix | MaskLayout::PairTwoSegmentSuffix => 3,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskLayout::SingleSentenceSuffix => "single_sentence_suffix",
            MaskLayout::PairBetween => "pair_between",
            MaskLayout::PairSuffix => "pair_suffix",
            MaskLayout::PairTwoSegmentPrefix => "pair_two_segment_prefix",
            MaskLayout::PairTwoSegmentSuffix => "pair_two_segment_suffix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let all = [
            MaskLayout::SingleSentenceSuffix,
            MaskLayout::PairBetween,
            MaskLayout::PairSuffix,
            MaskLayout::PairTwoSegmentPrefix,
            MaskLayout::PairTwoSegmentSuffix,
        ];
        all.into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask layout {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub layout: MaskLayout,
    pub mask_count: usize,
}

impl MaskPolicy {
    pub fn new(layout: MaskLayout, mask_count: usize) -> Result<Self> {
        if mask_count == 0 {
            return Err(Error::Config("mask count must be at least 1".into()));
        }
        Ok(Self { layout, mask_count })
    }
}

/// A tokenized input with its mask slots recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub mask_positions: Vec<usize>,
    pub label: usize,
    pub raw: Vec<String>,
    /// Sentence tokens dropped to fit the sequence budget.
    pub truncated: usize,
}

impl MaskedExample {
    pub fn mask_count(&self) -> usize {
        self.mask_positions.len()
    }
}

/// Lays out one or two token lists with `M` masks under `policy`.
///
/// Overlong inputs lose sentence tokens from the right (the longer
/// sentence first; the second on ties); masks and specials are kept.
pub fn insert_masks(
    sentences: &[Vec<usize>],
    policy: MaskPolicy,
    max_seq: usize,
    label: usize,
) -> Result<MaskedExample> {
    let m = policy.mask_count;
    let layout = policy.layout;
    match (layout.is_pair(), sentences.len()) {
        (false, 1) | (true, 2) => {}
        (false, n) => return contract(format!("{} takes one sentence, got {n}", layout.name())),
        (true, n) => return contract(format!("{} takes two sentences, got {n}", layout.name())),
    }
    let fixed = layout.specials() + m;
    if fixed > max_seq {
        return contract(format!(
            "{m} masks and {} specials exceed max_seq {max_seq}",
            layout.specials()
        ));
    }
    let budget = max_seq - fixed;

    let mut s1 = sentences[0].clone();
    let mut s2 = sentences.get(1).cloned().unwrap_or_default();
    let mut truncated = 0;
    while s1.len() + s2.len() > budget {
        if s1.len() > s2.len() {
            s1.pop();
        } else {
            s2.pop();
        }
        truncated += 1;
    }

    let masks = vec![MASK; m];
    let mut ids = vec![CLS];
    let mut segments = vec![0];
    let push = |ids: &mut Vec<usize>, segs: &mut Vec<usize>, part: &[usize], seg: usize| {
        ids.extend_from_slice(part);
        segs.extend(std::iter::repeat_n(seg, part.len()));
    };
    match layout {
        MaskLayout::SingleSentenceSuffix => {
            push(&mut ids, &mut segments, &s1, 0);
            push(&mut ids, &mut segments, &masks, 0);
            push(&mut ids, &mut segments, &[SEP], 0);
        }
        MaskLayout::PairBetween => {
            push(&mut ids, &mut segments, &s1, 0);
            push(&mut ids, &mut segments, &masks, 0);
            push(&mut ids, &mut segments, &s2, 0);
            push(&mut ids, &mut segments, &[SEP], 0);
        }
        MaskLayout::PairSuffix => {
            push(&mut ids, &mut segments, &s1, 0);
            push(&mut ids, &mut segments, &s2, 0);
            push(&mut ids, &mut segments, &masks, 0);
            push(&mut ids, &mut segments, &[SEP], 0);
        }
        MaskLayout::PairTwoSegmentPrefix => {
            push(&mut ids, &mut segments, &s1, 0);
            push(&mut ids, &mut segments, &[SEP], 0);
            push(&mut ids, &mut segments, &masks, 1);
            push(&mut ids, &mut segments, &s2, 1);
            push(&mut ids, &mut segments, &[SEP], 1);
        }
        MaskLayout::PairTwoSegmentSuffix => {
            push(&mut ids, &mut segments, &s1, 0);
            push(&mut ids, &mut segments, &[SEP], 0);
            push(&mut ids, &mut segments, &s2, 1);
            push(&mut ids, &mut segments, &masks, 1);
            push(&mut ids, &mut segments, &[SEP], 1);
        }
    }
    let mask_positions = ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == MASK)
        .map(|(i, _)| i)
        .collect::<Vec<_>>();
    // Sentence tokens are never MASK unless the raw text spelled it out.
    if mask_positions.len() != m {
        return Err(Error::Input(
            "input text contains the mask token itself".into(),
        ));
    }
    Ok(MaskedExample {
        ids,
        segments,
        mask_positions,
        label,
        raw: Vec::new(),
        truncated,
    })
}

/// Padded batch tensors. Row `r` is valid on `0..lengths[r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub seq_len: usize,
    pub ids: Vec<Vec<usize>>,
    pub segments: Vec<Vec<usize>>,
    pub attention: Vec<Vec<u8>>,
    /// `n × M`, fixed width across the batch.
    pub mask_positions: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.mask_positions.first().map_or(0, Vec::len)
    }

    /// Valid ids of row `r` (padding stripped).
    pub fn row_ids(&self, r: usize) -> &[usize] {
        &self.ids[r][..self.lengths[r]]
    }

    pub fn row_segments(&self, r: usize) -> &[usize] {
        &self.segments[r][..self.lengths[r]]
    }

    /// Flat row indices into `n·seq_len` stacked hidden states, one per
    /// (example, mask slot) in row-major order.
    pub fn flat_mask_index(&self) -> Vec<usize> {
        self.mask_positions
            .iter()
            .enumerate()
            .flat_map(|(r, ps)| ps.iter().map(move |p| r * self.seq_len + p))
            .collect()
    }
}

/// Packs examples into fixed-width tensors padded with PAD to `seq_len`.
pub fn build_batch(examples: &[MaskedExample], seq_len: usize) -> Result<Batch> {
    let Some(first) = examples.first() else {
        return contract("cannot batch zero examples");
    };
    let m = first.mask_count();
    let mut batch = Batch {
        seq_len,
        ids: Vec::with_capacity(examples.len()),
        segments: Vec::with_capacity(examples.len()),
        attention: Vec::with_capacity(examples.len()),
        mask_positions: Vec::with_capacity(examples.len()),
        labels: Vec::with_capacity(examples.len()),
        lengths: Vec::with_capacity(examples.len()),
    };
    for (i, ex) in examples.iter().enumerate() {
        if ex.mask_count() != m {
            return contract(format!(
                "example {i} has {} masks, batch has {m}",
                ex.mask_count()
            ));
        }
        let n = ex.ids.len();
        if n > seq_len {
            return contract(format!("example {i} has {n} tokens, batch width {seq_len}"));
        }
        let mut ids = ex.ids.clone();
        ids.resize(seq_len, PAD);
        let mut segs = ex.segments.clone();
        segs.resize(seq_len, 0);
        let mut att = vec![1u8; n];
        att.resize(seq_len, 0);
        batch.ids.push(ids);
        batch.segments.push(segs);
        batch.attention.push(att);
        batch.mask_positions.push(ex.mask_positions.clone());
        batch.labels.push(ex.label);
        batch.lengths.push(n);
    }
    Ok(batch)
}
