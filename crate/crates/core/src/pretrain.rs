//! Masked-language-model pretraining of the toy encoder.
//!
//! The few-shot methods assume an encoder whose mask-slot states already
//! reflect the corpus. A randomly initialized encoder does not, so the
//! harness first trains the backbone on unlabeled text with the usual MLM
//! objective (random positions replaced by `[MASK]`, predicted through the
//! tied token embedding). Adapters are not part of this stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::masking::{MASK, SEP};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Graph, Rng};
use crate::trainer::AdamW;

/// Settings of the pretraining stage. `steps = 0` keeps the random
/// initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup: usize,
    /// Unlabeled sentences generated for synthetic tasks.
    pub corpus_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            mask_prob: 0.15,
            lr: 1e-3,
            warmup: 100,
            corpus_size: 4000,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!(
                "mask_prob {} outside (0, 1)",
                self.mask_prob
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "pretrain lr {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.lr * (step + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

/// One unlabeled input: token ids and segment ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
}

impl Sequence {
    pub fn single(ids: Vec<usize>) -> Self {
        let segments = vec![0; ids.len()];
        Self { ids, segments }
    }

    /// `a [SEP] b`, with `b` in segment 1.
    pub fn pair(a: &[usize], b: &[usize]) -> Self {
        let mut ids = a.to_vec();
        ids.push(SEP);
        let mut segments = vec![0; ids.len()];
        ids.extend_from_slice(b);
        segments.resize(ids.len(), 1);
        Self { ids, segments }
    }
}

/// Pretrained backbone tensors with their loss trace.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: ParamStore,
    pub losses: Vec<f64>,
}

impl PretrainOutcome {
    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// The encoder without adapters, whose tensors are the backbone.
pub fn backbone_config(cfg: &EncoderConfig) -> EncoderConfig {
    EncoderConfig {
        adapter: None,
        ..cfg.clone()
    }
}

/// Backbone tensors drawn as [`crate::model::Model::with_seeds`] draws them.
pub fn init_backbone(cfg: &EncoderConfig, backbone_seed: u64) -> Result<ParamStore> {
    ParamStore::from_specs_seeded(&backbone_config(cfg).param_specs(), |_| backbone_seed)
}

/// Picks the positions to hide: each with probability `p`, at least one.
fn choose_masks(len: usize, p: f64, rng: &mut Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = (0..len).filter(|_| rng.uniform() < p).collect();
    if picked.is_empty() {
        picked.push(rng.below(len));
    }
    picked
}

/// Summed MLM loss of `batch` and the number of predicted tokens.
fn mlm_loss(
    g: &mut Graph,
    params: &crate::params::BoundParams,
    cfg: &EncoderConfig,
    batch: &[&Sequence],
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<(crate::tensor::Var, usize)> {
    let mut parts = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for seq in batch {
        let picked = choose_masks(seq.ids.len(), mask_prob, rng);
        let mut ids = seq.ids.clone();
        for &p in &picked {
            targets.push(ids[p]);
            ids[p] = MASK;
        }
        let enc = encoder::encode(g, params, cfg, &ids, Some(&seq.segments), None)?;
        parts.push(g.gather_rows(enc.hidden, &picked)?);
    }
    let h = g.concat_rows(&parts)?;
    let logits = encoder::mlm_logits(g, h, params.get("embeddings.token")?)?;
    Ok((g.cross_entropy(logits, &targets)?, targets.len()))
}

/// Trains every backbone tensor on `corpus` with the MLM objective.
pub fn pretrain(
    cfg: &EncoderConfig,
    backbone_seed: u64,
    corpus: &[Sequence],
    pc: &PretrainConfig,
) -> Result<PretrainOutcome> {
    pc.validate()?;
    let enc_cfg = backbone_config(cfg);
    enc_cfg.validate()?;
    let mut params = init_backbone(cfg, backbone_seed)?;
    if pc.steps == 0 {
        return Ok(PretrainOutcome {
            params,
            losses: Vec::new(),
        });
    }
    let usable: Vec<&Sequence> = corpus
        .iter()
        .filter(|s| !s.ids.is_empty() && s.ids.len() <= enc_cfg.max_seq)
        .collect();
    if usable.is_empty() {
        return Err(Error::Input(
            "no pretraining sequence fits the encoder".into(),
        ));
    }
    let all = params.iter().map(|(n, _)| n.to_string()).collect();
    params.set_trainable(&all)?;
    let mut opt = AdamW::default();
    let mut rng = Rng::derive(pc.seed, "pretrain");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let mut batch = Vec::with_capacity(pc.batch_size);
        while batch.len() < pc.batch_size.min(usable.len()) {
            if cursor == order.len() {
                order = (0..usable.len()).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(usable[order[cursor]]);
            cursor += 1;
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let (loss, count) = mlm_loss(&mut g, &bound, &enc_cfg, &batch, pc.mask_prob, &mut rng)?;
        let loss = g.scale(loss, 1.0 / count as f64);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { step, lr: pc.lr });
        }
        g.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, _) in params.iter() {
            if let Some(grad) = g.grad(bound.get(name)?) {
                grads.insert(name.to_string(), grad.to_vec());
            }
        }
        drop(g);
        let lr = pc.lr_at(step);
        opt.step(&mut params, &grads, |_: ParamGroup| lr)?;
        losses.push(value);
    }
    params.set_trainable(&Default::default())?;
    Ok(PretrainOutcome { params, losses })
}
