//! Builders and brute-force reference implementations shared by the
//! integration tests. The references use plain loops over the encoder's
//! hidden states and never call the head or loss code they check.

#![allow(dead_code)]

use perfect::baselines::VerbalizerMap;
use perfect::encoder::{AdapterConfig, AdapterPlacement, EncoderConfig};
use perfect::masking::{insert_masks, MaskLayout, MaskPolicy, MaskedExample, MASK};
use perfect::model::{HeadKind, Model, ModelConfig};
use perfect::tensor::{Rng, Tensor};

pub const VOCAB: usize = 24;

pub fn encoder(hidden: usize, layers: usize, bottleneck: Option<usize>) -> EncoderConfig {
    EncoderConfig {
        vocab_size: VOCAB,
        hidden,
        layers,
        heads: 2,
        ffn_mult: 2,
        max_seq: 16,
        adapter: bottleneck.map(AdapterConfig::new),
        adapter_placement: AdapterPlacement::AfterFfnOnly,
        init_std: 0.3,
    }
}

/// A label-embedding model with FFN adapters.
pub fn perfect_model(
    k: usize,
    m: usize,
    hidden: usize,
    layers: usize,
    sigma: f64,
    seed: u64,
) -> Model {
    let cfg = ModelConfig {
        encoder: encoder(hidden, layers, Some(2)),
        num_classes: k,
        mask_count: m,
        head: HeadKind::LabelEmbedding,
        prompt_tokens: 0,
        label_sigma: sigma,
        verbalizers: None,
    };
    Model::with_seeds(cfg, seed, seed.wrapping_add(1)).unwrap()
}

/// A verbalizer-head model whose mask count is the longest verbalizer.
pub fn verbalizer_model(verbalizers: VerbalizerMap, seed: u64) -> Model {
    let cfg = ModelConfig {
        encoder: encoder(8, 1, Some(2)),
        num_classes: verbalizers.num_classes(),
        mask_count: verbalizers.max_len(),
        head: HeadKind::Verbalizer,
        prompt_tokens: 0,
        label_sigma: 1e-4,
        verbalizers: Some(verbalizers),
    };
    Model::with_seeds(cfg, seed, seed.wrapping_add(1)).unwrap()
}

/// Verbalizers of the given lengths over ordinary (non-special) tokens.
pub fn random_verbalizers(lengths: &[usize], rng: &mut Rng) -> VerbalizerMap {
    let classes = (0..lengths.len()).map(|k| format!("c{k}")).collect();
    let tokens = lengths
        .iter()
        .map(|&l| {
            (0..l)
                .map(|_| MASK + 1 + rng.below(VOCAB - MASK - 1))
                .collect()
        })
        .collect();
    VerbalizerMap::new(classes, tokens).unwrap()
}

/// A single sentence of 1 to 6 ordinary tokens followed by `m` masks.
pub fn random_example(m: usize, label: usize, rng: &mut Rng) -> MaskedExample {
    let len = 1 + rng.below(6);
    let sentence: Vec<usize> = (0..len)
        .map(|_| MASK + 1 + rng.below(VOCAB - MASK - 1))
        .collect();
    let policy = MaskPolicy::new(MaskLayout::SingleSentenceSuffix, m).unwrap();
    insert_masks(&[sentence], policy, 16, label).unwrap()
}

pub fn random_scores(rows: usize, cols: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| 3.0 * rng.normal()).collect())
        .collect()
}

/// Mask-slot hidden states read off the full encoder output.
pub fn slot_states(model: &Model, ex: &MaskedExample) -> Vec<Vec<f64>> {
    let h = model.hidden_states(&ex.ids, Some(&ex.segments)).unwrap();
    ex.mask_positions
        .iter()
        .map(|&p| h.row(p).to_vec())
        .collect()
}

pub fn hinge_oracle(scores: &[f64], label: usize, margin: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..scores.len() {
        if k != label {
            let v = margin - scores[label] + scores[k];
            if v > 0.0 {
                total += v;
            }
        }
    }
    total / scores.len() as f64
}

/// Mean hinge over every (example, slot) row.
pub fn total_loss_oracle(blocks: &[Vec<Vec<f64>>], labels: &[usize], margin: f64) -> f64 {
    let mut sum = 0.0;
    let mut rows = 0;
    for (block, &y) in blocks.iter().zip(labels) {
        for row in block {
            sum += hinge_oracle(row, y, margin);
            rows += 1;
        }
    }
    sum / rows as f64
}

pub fn cross_entropy_oracle(blocks: &[Vec<Vec<f64>>], labels: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut rows = 0;
    for (block, &y) in blocks.iter().zip(labels) {
        for row in block {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            sum += z.ln() - row[y];
            rows += 1;
        }
    }
    sum / rows as f64
}

/// Summed verbalizer log-probabilities per class, then the margin sum.
pub fn pet_loss_oracle(
    model: &Model,
    ex: &MaskedExample,
    verbalizers: &VerbalizerMap,
    margin: f64,
) -> f64 {
    let emb = model.params().tensor("embeddings.token").unwrap();
    let states = slot_states(model, ex);
    let log_probs: Vec<Vec<f64>> = states
        .iter()
        .map(|h| {
            let logits: Vec<f64> = (0..emb.rows())
                .map(|v| emb.row(v).iter().zip(h).map(|(a, b)| a * b).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            logits.iter().map(|l| l - z.ln()).collect()
        })
        .collect();
    let scores: Vec<f64> = verbalizers
        .tokens()
        .iter()
        .map(|toks| toks.iter().enumerate().map(|(j, &t)| log_probs[j][t]).sum())
        .collect();
    let mut loss = 0.0;
    for k in 0..scores.len() {
        if k != ex.label {
            loss += (margin - scores[ex.label] + scores[k]).max(0.0);
        }
    }
    loss
}

/// `c[i][y]`: per-slot class means of the mask states.
pub fn prototype_oracle(model: &Model, train: &[MaskedExample], k: usize) -> Vec<Vec<Vec<f64>>> {
    let m = train[0].mask_count();
    let h = model.config().encoder.hidden;
    let mut sums = vec![vec![vec![0.0; h]; k]; m];
    let mut counts = vec![0usize; k];
    for ex in train {
        counts[ex.label] += 1;
        for (i, state) in slot_states(model, ex).iter().enumerate() {
            for (d, v) in state.iter().enumerate() {
                sums[i][ex.label][d] += v;
            }
        }
    }
    for slot in &mut sums {
        for (y, c) in slot.iter_mut().enumerate() {
            for v in c.iter_mut() {
                *v /= counts[y] as f64;
            }
        }
    }
    sums
}

/// `argmax_y max_i exp(−‖h_i − c_iy‖²)`, first index on ties.
pub fn exp_rule_oracle(states: &[Vec<f64>], centroids: &[Vec<Vec<f64>>]) -> usize {
    let k = centroids[0].len();
    let mut best = (0, f64::NEG_INFINITY);
    for y in 0..k {
        let mut score = f64::NEG_INFINITY;
        for (h, slot) in states.iter().zip(centroids) {
            let d: f64 = h.iter().zip(&slot[y]).map(|(a, b)| (a - b) * (a - b)).sum();
            score = score.max((-d).exp());
        }
        if score > best.1 {
            best = (y, score);
        }
    }
    best.0
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}
