//! Comparison systems: a linear head on the CLS state, verbalizer
//! scoring through the MLM output embedding (single-token probabilities,
//! multi-token margin training, autoregressive decoding), and the toy
//! pattern used to phrase inputs as cloze questions.
//!
//! Bias-only and soft-prompt tuning reuse the label-embedding head; they
//! differ only in the trainable set (see `trainer`) and, for prompts, in
//! the extra rows the encoder prepends.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::head::argmax;
use crate::masking::{MaskedExample, Vocab, MASK};
use crate::model::{Model, CLS_BIAS, CLS_WEIGHT};
use crate::params::BoundParams;
use crate::tensor::{Graph, Var};

/// Name of the tied input/output embedding.
pub const OUTPUT_EMBEDDING: &str = "embeddings.token";

/// Words placed between the input and the masks to phrase a toy cloze
/// question.
pub const TOY_PATTERN: [&str; 2] = ["it", "was"];

/// Per-class token sequences standing in for labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizerMap {
    classes: Vec<String>,
    tokens: Vec<Vec<usize>>,
}

impl VerbalizerMap {
    pub fn new(classes: Vec<String>, tokens: Vec<Vec<usize>>) -> Result<Self> {
        if classes.is_empty() || classes.len() != tokens.len() {
            return Err(Error::Config(format!(
                "{} classes with {} verbalizers",
                classes.len(),
                tokens.len()
            )));
        }
        if let Some(k) = tokens.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!(
                "class {} has an empty verbalizer",
                classes[k]
            )));
        }
        Ok(Self { classes, tokens })
    }

    /// Looks up words in `vocab`; every word must be known.
    pub fn from_words(classes: &[String], words: &[Vec<String>], vocab: &Vocab) -> Result<Self> {
        let mut tokens = Vec::with_capacity(words.len());
        for (class, ws) in classes.iter().zip(words) {
            let ids = ws
                .iter()
                .map(|w| {
                    vocab.get(&w.to_lowercase()).ok_or_else(|| {
                        Error::Config(format!(
                            "verbalizer word {w:?} of class {class} not in vocabulary"
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            tokens.push(ids);
        }
        Self::new(classes.to_vec(), tokens)
    }

    /// Reads `{class: [word, ...]}`; entries follow `classes`, which must
    /// match the file's keys exactly.
    pub fn from_json(text: &str, classes: &[String], vocab: &Vocab) -> Result<Self> {
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("verbalizer map: {e}")))?;
        let mut words = Vec::with_capacity(classes.len());
        for c in classes {
            words.push(
                map.get(c)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("verbalizer map lacks class {c}")))?,
            );
        }
        if map.len() != classes.len() {
            let extra: Vec<_> = map.keys().filter(|k| !classes.contains(k)).collect();
            return Err(Error::Config(format!(
                "verbalizer map has unknown classes {extra:?}"
            )));
        }
        Self::from_words(classes, &words, vocab)
    }

    pub fn load(path: &Path, classes: &[String], vocab: &Vocab) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, classes, vocab)
    }

    pub fn num_classes(&self) -> usize {
        self.tokens.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn tokens(&self) -> &[Vec<usize>] {
        &self.tokens
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.tokens.iter().map(Vec::len).collect()
    }

    /// Masks needed to hold the longest verbalizer.
    pub fn max_len(&self) -> usize {
        self.tokens.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Class logits `Wᵀ h_CLS + b`, `1×K`.
pub fn cls_finetune_logits(
    g: &mut Graph,
    model: &Model,
    bound: &BoundParams,
    example: &MaskedExample,
) -> Result<Var> {
    let enc = model.encode(g, bound, &example.ids, Some(&example.segments))?;
    let cls = g.gather_rows(enc.hidden, &[enc.prompt_len])?;
    let w = bound.get(CLS_WEIGHT)?;
    let b = bound.get(CLS_BIAS)?;
    let z = g.matmul(cls, w)?;
    g.add_bias(z, b)
}

/// Vocabulary log-probabilities at the mask slots, `M×V`.
pub fn mask_log_probs(
    g: &mut Graph,
    model: &Model,
    bound: &BoundParams,
    example: &MaskedExample,
) -> Result<Var> {
    let h = model.mask_hidden(g, bound, example)?;
    let w = bound.get(OUTPUT_EMBEDDING)?;
    let logits = crate::encoder::mlm_logits(g, h, w)?;
    Ok(g.log_softmax_rows(logits))
}

/// Class scores `s_k = Σ_{j<ℓ_k} log p(mask_j = v_k[j])`, `1×K`.
pub fn verbalizer_scores(
    g: &mut Graph,
    log_probs: Var,
    verbalizers: &VerbalizerMap,
) -> Result<Var> {
    let m = g.value(log_probs).rows();
    if verbalizers.max_len() > m {
        return contract(format!(
            "verbalizers need {} masks, input has {m}",
            verbalizers.max_len()
        ));
    }
    let groups: Vec<Vec<(usize, usize)>> = verbalizers
        .tokens()
        .iter()
        .map(|toks| toks.iter().enumerate().map(|(j, &t)| (j, t)).collect())
        .collect();
    g.grouped_pick(log_probs, &groups)
}

/// Vocabulary-softmax probability of each class's single verbalizer
/// token at the one mask. The values are not renormalized over classes;
/// doing so would not move the argmax.
pub fn pet_single_token_prob(
    model: &Model,
    example: &MaskedExample,
    verbalizers: &VerbalizerMap,
) -> Result<Vec<f64>> {
    if verbalizers.max_len() != 1 {
        return contract("multi-token verbalizers need the multi-token scoring path");
    }
    if example.mask_count() != 1 {
        return contract(format!(
            "single-token scoring takes one mask, input has {}",
            example.mask_count()
        ));
    }
    let mut g = Graph::new();
    let bound = model.params().bind_frozen(&mut g);
    let lp = mask_log_probs(&mut g, model, &bound, example)?;
    let row = g.value(lp).row(0);
    Ok(verbalizers
        .tokens()
        .iter()
        .map(|t| row[t[0]].exp())
        .collect())
}

/// `Σ_{k≠y} max(0, m − s_y + s_k)` over verbalizer log-probability
/// scores (no averaging over classes).
pub fn pet_margin(scores: &[f64], label: usize, margin: f64) -> f64 {
    scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, &s)| (margin - scores[label] + s).max(0.0))
        .sum()
}

/// Multi-token verbalizer loss for one example, differentiable.
pub fn pet_multitoken_train_loss(
    g: &mut Graph,
    model: &Model,
    bound: &BoundParams,
    example: &MaskedExample,
    verbalizers: &VerbalizerMap,
    margin: f64,
) -> Result<Var> {
    if example.mask_count() != verbalizers.max_len() {
        return contract(format!(
            "input has {} masks, verbalizers need {}",
            example.mask_count(),
            verbalizers.max_len()
        ));
    }
    let lp = mask_log_probs(g, model, bound, example)?;
    let scores = verbalizer_scores(g, lp, verbalizers)?;
    g.margin_loss(scores, &[example.label], margin, 1.0)
}

/// Drops all but the first `keep` masks.
fn trim_masks(example: &MaskedExample, keep: usize) -> MaskedExample {
    let drop: Vec<usize> = example.mask_positions[keep..].to_vec();
    let mut out = example.clone();
    out.ids.clear();
    out.segments.clear();
    for (i, (&id, &seg)) in example.ids.iter().zip(&example.segments).enumerate() {
        if !drop.contains(&i) {
            out.ids.push(id);
            out.segments.push(seg);
        }
    }
    out.mask_positions.truncate(keep);
    out
}

/// Outcome of autoregressive verbalizer decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub class: usize,
    /// Summed log-probabilities (divided by `ℓ_k` when length-normalized).
    pub scores: Vec<f64>,
    pub forward_passes: usize,
}

/// For each class, trims the masks to its verbalizer length and fills
/// them one per encoder pass: each pass picks the open slot whose
/// verbalizer token is most probable (lower position on ties),
/// substitutes the token, and adds its log-probability to the score.
pub fn pet_autoregressive_decode(
    model: &Model,
    example: &MaskedExample,
    verbalizers: &VerbalizerMap,
    length_normalize: bool,
) -> Result<DecodeResult> {
    if example.mask_count() < verbalizers.max_len() {
        return contract(format!(
            "input has {} masks, verbalizers need {}",
            example.mask_count(),
            verbalizers.max_len()
        ));
    }
    let mut passes = 0;
    let mut scores = Vec::with_capacity(verbalizers.num_classes());
    for toks in verbalizers.tokens() {
        let mut ex = trim_masks(example, toks.len());
        let mut open: Vec<usize> = (0..toks.len()).collect();
        let mut score = 0.0;
        while !open.is_empty() {
            let mut g = Graph::new();
            let bound = model.params().bind_frozen(&mut g);
            let enc = model.encode(&mut g, &bound, &ex.ids, Some(&ex.segments))?;
            passes += 1;
            let rows: Vec<usize> = open
                .iter()
                .map(|&j| ex.mask_positions[j] + enc.prompt_len)
                .collect();
            let h = g.gather_rows(enc.hidden, &rows)?;
            let w = bound.get(OUTPUT_EMBEDDING)?;
            let logits = crate::encoder::mlm_logits(&mut g, h, w)?;
            let lp = g.log_softmax_rows(logits);
            let lp = g.value(lp);
            let mut best = 0;
            for r in 1..open.len() {
                if lp.row(r)[toks[open[r]]] > lp.row(best)[toks[open[best]]] {
                    best = r;
                }
            }
            let j = open.remove(best);
            score += lp.row(best)[toks[j]];
            ex.ids[ex.mask_positions[j]] = toks[j];
        }
        debug_assert!(!ex.ids.contains(&MASK));
        if length_normalize {
            score /= toks.len() as f64;
        }
        scores.push(score);
    }
    Ok(DecodeResult {
        class: argmax(&scores),
        scores,
        forward_passes: passes,
    })
}

/// Appends the toy pattern words to a tokenized sentence.
pub fn apply_pattern(tokens: &[usize], vocab: &Vocab) -> Vec<usize> {
    let mut out = tokens.to_vec();
    out.extend(TOY_PATTERN.iter().map(|w| vocab.id(w)));
    out
}
