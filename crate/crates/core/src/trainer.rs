//! Freezing policies, the optimizer, the training loop with checkpoint
//! selection on validation accuracy, and the trainable-parameter
//! accountant.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, VerbalizerMap};
use crate::error::{contract, Error, Result};
use crate::head::{self, InferenceMode, PrototypeBank};
use crate::masking::MaskedExample;
use crate::model::{HeadKind, Model, ModelConfig, LABEL_EMBEDDING};
use crate::params::{ParamGroup, ParamRole, ParamStore};
use crate::tensor::{Graph, Rng, Var};

/// Which tensors a method trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Adapters, layer norms and the label embedding.
    Perfect,
    /// Everything plus a linear head on the CLS state.
    Finetune,
    /// Everything, scored through verbalizers after a toy pattern.
    Pet,
    /// Every bias vector and the label embedding.
    BitfitMte,
    /// A soft prompt and the label embedding.
    PromptMte,
    /// Adapters and layer norms with a verbalizer head and no pattern.
    PatternFreePet,
    /// Everything plus the label embedding, no adapters.
    PerfectNoAdapters,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Perfect,
        PolicyKind::Finetune,
        PolicyKind::Pet,
        PolicyKind::BitfitMte,
        PolicyKind::PromptMte,
        PolicyKind::PatternFreePet,
        PolicyKind::PerfectNoAdapters,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Perfect => "perfect",
            PolicyKind::Finetune => "finetune",
            PolicyKind::Pet => "pet",
            PolicyKind::BitfitMte => "bitfit_mte",
            PolicyKind::PromptMte => "prompt_mte",
            PolicyKind::PatternFreePet => "pattern_free_pet",
            PolicyKind::PerfectNoAdapters => "perfect_no_adapters",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '+'], "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Contract(format!("unknown training policy {s:?}")))
    }

    pub fn head(self) -> HeadKind {
        match self {
            PolicyKind::Finetune => HeadKind::Classifier,
            PolicyKind::Pet | PolicyKind::PatternFreePet => HeadKind::Verbalizer,
            _ => HeadKind::LabelEmbedding,
        }
    }

    pub fn uses_adapters(self) -> bool {
        matches!(self, PolicyKind::Perfect | PolicyKind::PatternFreePet)
    }

    pub fn uses_prompt(self) -> bool {
        self == PolicyKind::PromptMte
    }

    /// Whether inputs carry the toy textual pattern.
    pub fn uses_pattern(self) -> bool {
        self == PolicyKind::Pet
    }

    /// Whether a tensor of `role` is trained.
    pub fn trains(self, role: ParamRole) -> bool {
        use ParamRole::*;
        match self {
            PolicyKind::Perfect => role.is_adapter() || role.is_norm() || role == LabelEmbedding,
            PolicyKind::Finetune | PolicyKind::Pet | PolicyKind::PerfectNoAdapters => true,
            PolicyKind::BitfitMte => role.is_bias() || role == LabelEmbedding,
            PolicyKind::PromptMte => matches!(role, Prompt | LabelEmbedding),
            PolicyKind::PatternFreePet => role.is_adapter() || role.is_norm(),
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A policy with its learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPolicy {
    pub kind: PolicyKind,
    pub lr_backbone: f64,
    pub lr_label_embedding: f64,
    pub lr_prompt: f64,
}

/// Label-embedding learning rates searched on validation accuracy.
pub const LABEL_LR_GRID: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];

/// Soft-prompt learning rates searched on validation accuracy.
pub const PROMPT_LR_GRID: [f64; 3] = [1e-1, 1e-2, 1e-3];

impl TrainPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        let lr_backbone = match kind {
            PolicyKind::Finetune | PolicyKind::Pet | PolicyKind::PerfectNoAdapters => 1e-5,
            _ => 1e-4,
        };
        Self {
            kind,
            lr_backbone,
            lr_label_embedding: 1e-2,
            lr_prompt: 1e-2,
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::LabelEmbedding => self.lr_label_embedding,
            ParamGroup::Prompt => self.lr_prompt,
        }
    }

    fn max_lr(&self) -> f64 {
        self.lr_backbone
            .max(self.lr_label_embedding)
            .max(self.lr_prompt)
    }
}

/// Tensors `kind` trains among `params`, without changing any flags.
pub fn trainable_set(params: &ParamStore, kind: PolicyKind) -> BTreeSet<String> {
    params
        .iter()
        .filter(|(_, p)| kind.trains(p.role))
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Marks exactly the tensors `kind` trains as trainable and returns them.
/// The model's head must be the one the policy scores with.
pub fn freeze_mask(model: &mut Model, kind: PolicyKind) -> Result<BTreeSet<String>> {
    if model.config().head != kind.head() {
        return contract(format!(
            "policy {kind} scores with a {:?} head, model has {:?}",
            kind.head(),
            model.config().head
        ));
    }
    let set = trainable_set(model.params(), kind);
    model.params_mut().set_trainable(&set)?;
    Ok(set)
}

/// Adam with decoupled weight decay and a learning rate per group.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    #[serde(skip)]
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.0)
    }
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable tensor that has a gradient in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if !p.trainable {
                return contract(format!("gradient for frozen tensor {name}"));
            }
            if g.len() != p.tensor.numel() {
                return Err(Error::Shape {
                    op: "optimizer",
                    left: p.tensor.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            let lr = lr(p.role.group());
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Hinge,
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Hinge => "hinge",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub margin: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub inference: InferenceMode,
    /// Stop once a checkpoint scores 1.0 on validation; no later
    /// checkpoint could be selected over it.
    pub stop_at_perfect_val: bool,
    /// Divide autoregressive verbalizer scores by verbalizer length.
    pub length_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            checkpoint_every: 50,
            margin: head::DEFAULT_MARGIN,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            loss: LossKind::Hinge,
            inference: InferenceMode::Prototypical,
            stop_at_perfect_val: true,
            length_normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.beta1, self.beta2, self.eps, self.weight_decay)
    }

    /// Steps at which validation accuracy is measured.
    pub fn checkpoint_steps(&self) -> Vec<usize> {
        if self.steps == 0 {
            return vec![0];
        }
        let mut v: Vec<usize> = (1..=self.steps / self.checkpoint_every)
            .map(|i| i * self.checkpoint_every)
            .collect();
        if v.last() != Some(&self.steps) {
            v.push(self.steps);
        }
        v
    }
}

/// Mean training loss of `batch` under the model's head.
pub fn batch_loss(
    g: &mut Graph,
    model: &Model,
    bound: &crate::params::BoundParams,
    batch: &[MaskedExample],
    cfg: &TrainConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return contract("loss over an empty batch");
    }
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let n = batch.len() as f64;
    match model.config().head {
        HeadKind::LabelEmbedding => {
            let l = bound.get(LABEL_EMBEDDING)?;
            let mut blocks = Vec::with_capacity(batch.len());
            for ex in batch {
                let h = model.mask_hidden(g, bound, ex)?;
                blocks.push(head::score_tokens(g, h, l)?);
            }
            match cfg.loss {
                LossKind::Hinge => head::total_loss(g, &blocks, &labels, cfg.margin),
                LossKind::CrossEntropy => head::cross_entropy_total_loss(g, &blocks, &labels),
            }
        }
        HeadKind::Classifier => {
            let mut rows = Vec::with_capacity(batch.len());
            for ex in batch {
                rows.push(baselines::cls_finetune_logits(g, model, bound, ex)?);
            }
            let logits = g.concat_rows(&rows)?;
            let sum = g.cross_entropy(logits, &labels)?;
            Ok(g.scale(sum, 1.0 / n))
        }
        HeadKind::Verbalizer => {
            let v = verbalizers(model)?;
            let mut rows = Vec::with_capacity(batch.len());
            for ex in batch {
                let lp = baselines::mask_log_probs(g, model, bound, ex)?;
                rows.push(baselines::verbalizer_scores(g, lp, v)?);
            }
            let scores = g.concat_rows(&rows)?;
            let sum = g.margin_loss(scores, &labels, cfg.margin, 1.0)?;
            Ok(g.scale(sum, 1.0 / n))
        }
    }
}

fn verbalizers(model: &Model) -> Result<&VerbalizerMap> {
    model
        .config()
        .verbalizers
        .as_ref()
        .ok_or_else(|| Error::Config("verbalizer head without a verbalizer map".into()))
}

/// Statistics of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Nodes' stored elements (values plus gradients) on the step graph.
    pub graph_elements: usize,
}

/// Forward, backward and one update of the trainable tensors.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    policy: &TrainPolicy,
    cfg: &TrainConfig,
    batch: &[MaskedExample],
    step: usize,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let loss_var = batch_loss(&mut g, model, &bound, batch, cfg)?;
    let loss = g.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            lr: policy.max_lr(),
        });
    }
    g.backward(loss_var)?;
    let mut grads = BTreeMap::new();
    for (name, p) in model.params().iter() {
        if !p.trainable {
            continue;
        }
        if let Some(grad) = g.grad(bound.get(name)?) {
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    lr: policy.max_lr(),
                });
            }
            grads.insert(name.to_string(), grad.to_vec());
        }
    }
    let graph_elements = g.element_count();
    drop(g);
    opt.step(model.params_mut(), &grads, |grp| policy.lr(grp))?;
    Ok(StepStats {
        loss,
        graph_elements,
    })
}

/// Per-example class predictions of a trained model.
pub fn predict(
    model: &Model,
    examples: &[MaskedExample],
    mode: InferenceMode,
    bank: Option<&PrototypeBank>,
    length_normalize: bool,
) -> Result<Vec<usize>> {
    match model.config().head {
        HeadKind::LabelEmbedding => {
            let emb = model.mask_embeddings(examples)?;
            emb.iter()
                .map(|h| match mode {
                    InferenceMode::Prototypical => {
                        let bank = bank.ok_or_else(|| {
                            Error::Contract("prototypical inference needs prototypes".into())
                        })?;
                        head::nearest_prototype(h, bank)
                    }
                    InferenceMode::LabelEmbedding => {
                        head::nearest_label_embedding(h, model.label_embedding()?)
                    }
                    InferenceMode::TrainingObjective => {
                        head::best_mean_score(h, model.label_embedding()?)
                    }
                })
                .collect()
        }
        HeadKind::Classifier => examples
            .iter()
            .map(|ex| {
                let mut g = Graph::new();
                let bound = model.params().bind_frozen(&mut g);
                let z = baselines::cls_finetune_logits(&mut g, model, &bound, ex)?;
                Ok(head::argmax(g.value(z).data()))
            })
            .collect(),
        HeadKind::Verbalizer => {
            let v = verbalizers(model)?;
            examples
                .iter()
                .map(|ex| {
                    Ok(baselines::pet_autoregressive_decode(model, ex, v, length_normalize)?.class)
                })
                .collect()
        }
    }
}

pub fn accuracy(predictions: &[usize], examples: &[MaskedExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    hits as f64 / examples.len() as f64
}

/// Prototypes from `train` when the mode needs them.
pub fn prototypes_for(
    model: &Model,
    train: &[MaskedExample],
    mode: InferenceMode,
) -> Result<Option<PrototypeBank>> {
    if model.config().head == HeadKind::LabelEmbedding && mode == InferenceMode::Prototypical {
        Ok(Some(head::compute_prototypes(model, train)?))
    } else {
        Ok(None)
    }
}

/// Accuracy on `examples`, with prototypes (if used) drawn from `train`.
pub fn evaluate(
    model: &Model,
    train: &[MaskedExample],
    examples: &[MaskedExample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let bank = prototypes_for(model, train, cfg.inference)?;
    let pred = predict(
        model,
        examples,
        cfg.inference,
        bank.as_ref(),
        cfg.length_normalize,
    )?;
    Ok(accuracy(&pred, examples))
}

/// Step with the highest validation score; the earliest on ties.
pub fn select_checkpoint(history: &[(usize, f64)]) -> Result<usize> {
    let Some(&(mut best, mut score)) = history.first() else {
        return contract("no checkpoints were evaluated");
    };
    for &(step, s) in &history[1..] {
        if s > score {
            best = step;
            score = s;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub val_accuracy: f64,
}

/// Result of [`train`]: the model restored to its selected checkpoint.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<CheckpointRecord>,
    pub selected_step: usize,
    pub losses: Vec<f64>,
    /// Prototypes recomputed from the selected parameters.
    pub prototypes: Option<PrototypeBank>,
    pub steps_run: usize,
    pub mean_step_seconds: f64,
    pub peak_graph_elements: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn val_accuracy(&self) -> f64 {
        self.history
            .iter()
            .find(|c| c.step == self.selected_step)
            .map_or(0.0, |c| c.val_accuracy)
    }
}

/// Trains under `policy`, measuring validation accuracy every
/// `checkpoint_every` steps and keeping the best checkpoint.
pub fn train(
    mut model: Model,
    train_set: &[MaskedExample],
    val_set: &[MaskedExample],
    policy: &TrainPolicy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return contract("empty training set");
    }
    freeze_mask(&mut model, policy.kind)?;
    let mut opt = cfg.optimizer();
    let mut rng = Rng::derive(cfg.seed, "batches");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let checkpoints = cfg.checkpoint_steps();
    let mut history = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut losses = Vec::new();
    let mut peak = 0;
    let mut step_seconds = 0.0;
    let mut step = 0;
    let mut stopped_early = false;

    for &target in &checkpoints {
        while step < target {
            let mut batch = Vec::with_capacity(cfg.batch_size.min(train_set.len()));
            while batch.len() < cfg.batch_size.min(train_set.len()) {
                if cursor == order.len() {
                    order = (0..train_set.len()).collect();
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                batch.push(train_set[order[cursor]].clone());
                cursor += 1;
            }
            let t0 = Instant::now();
            let stats = train_step(&mut model, &mut opt, policy, cfg, &batch, step)?;
            step_seconds += t0.elapsed().as_secs_f64();
            peak = peak.max(stats.graph_elements);
            losses.push(stats.loss);
            step += 1;
        }
        let acc = evaluate(&model, train_set, val_set, cfg)?;
        history.push(CheckpointRecord {
            step,
            val_accuracy: acc,
        });
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, model.params().clone()));
        }
        if cfg.stop_at_perfect_val && acc >= 1.0 {
            stopped_early = step < cfg.steps;
            break;
        }
    }

    let pairs: Vec<(usize, f64)> = history.iter().map(|c| (c.step, c.val_accuracy)).collect();
    let selected_step = select_checkpoint(&pairs)?;
    let (_, params) = best.expect("at least one checkpoint");
    let trainable = model.params().trainable_names();
    *model.params_mut() = params;
    model.params_mut().set_trainable(&trainable)?;
    let prototypes = prototypes_for(&model, train_set, cfg.inference)?;
    Ok(TrainOutcome {
        model,
        history,
        selected_step,
        losses,
        prototypes,
        steps_run: step,
        mean_step_seconds: if step > 0 {
            step_seconds / step as f64
        } else {
            0.0
        },
        peak_graph_elements: peak,
        stopped_early,
    })
}

/// Trainable and total parameter counts with a per-component breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub breakdown: BTreeMap<String, usize>,
}

impl ParamCount {
    /// Trainable share of the total, in percent.
    pub fn percent(&self) -> f64 {
        100.0 * self.trainable as f64 / self.total as f64
    }
}

/// Closed-form size of every component, tagged with a representative
/// role so the policy can decide whether it trains.
fn closed_form_components(cfg: &ModelConfig) -> Vec<(&'static str, ParamRole, usize)> {
    let e = &cfg.encoder;
    let (h, l, f, v, s) = (e.hidden, e.layers, e.ffn_inner(), e.vocab_size, e.max_seq);
    let (k, m) = (cfg.num_classes, cfg.mask_count);
    let mut c = vec![
        ("embeddings.token", ParamRole::Embedding, v * h),
        ("embeddings.position", ParamRole::Embedding, s * h),
        ("embeddings.segment", ParamRole::Embedding, 2 * h),
        ("layer_norms.gain", ParamRole::NormGain, h + l * 2 * h),
        ("layer_norms.bias", ParamRole::NormBias, h + l * 2 * h),
        ("attention.weight", ParamRole::Weight, l * 4 * h * h),
        ("attention.bias", ParamRole::Bias, l * 4 * h),
        ("ffn.weight", ParamRole::Weight, l * 2 * h * f),
        ("ffn.bias", ParamRole::Bias, l * (f + h)),
    ];
    if let Some(a) = &e.adapter {
        let sites = e.adapter_sites().len();
        c.push((
            "adapters.weight",
            ParamRole::AdapterWeight,
            sites * l * 2 * h * a.bottleneck,
        ));
        c.push((
            "adapters.bias",
            ParamRole::AdapterBias,
            sites * l * (a.bottleneck + h),
        ));
    }
    if cfg.prompt_tokens > 0 {
        c.push(("soft_prompt", ParamRole::Prompt, cfg.prompt_tokens * h));
    }
    match cfg.head {
        HeadKind::LabelEmbedding => {
            c.push(("label_embedding", ParamRole::LabelEmbedding, k * m * h))
        }
        HeadKind::Classifier => {
            c.push(("classifier.weight", ParamRole::HeadWeight, h * k));
            c.push(("classifier.bias", ParamRole::HeadBias, k));
        }
        HeadKind::Verbalizer => {}
    }
    c
}

/// Trainable parameters of `cfg` under `kind`, from the closed form and
/// cross-checked against the tensor registry (shapes only; nothing is
/// allocated).
pub fn count_trainable_params(cfg: &ModelConfig, kind: PolicyKind) -> Result<ParamCount> {
    cfg.validate()?;
    let components = closed_form_components(cfg);
    let mut breakdown = BTreeMap::new();
    let mut trainable = 0;
    let mut total = 0;
    for (name, role, n) in components {
        total += n;
        if kind.trains(role) && n > 0 {
            trainable += n;
            breakdown.insert(name.to_string(), n);
        }
    }
    let specs = cfg.param_specs();
    let registry_total: usize = specs.iter().map(|s| s.numel()).sum();
    let registry_trainable: usize = specs
        .iter()
        .filter(|s| kind.trains(s.role))
        .map(|s| s.numel())
        .sum();
    if registry_total != total || registry_trainable != trainable {
        return contract(format!(
            "parameter accounting disagrees: closed form {trainable}/{total}, registry {registry_trainable}/{registry_total}"
        ));
    }
    Ok(ParamCount {
        trainable,
        total,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{AdapterConfig, EncoderConfig};
    use crate::masking::{insert_masks, MaskLayout, MaskPolicy};

    fn tiny(kind: PolicyKind) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: 20,
                hidden: 8,
                layers: 1,
                heads: 2,
                ffn_mult: 2,
                max_seq: 12,
                adapter: kind.uses_adapters().then(|| AdapterConfig::new(2)),
                adapter_placement: Default::default(),
                init_std: 0.3,
            },
            num_classes: 2,
            mask_count: 1,
            head: kind.head(),
            prompt_tokens: if kind.uses_prompt() { 2 } else { 0 },
            label_sigma: 1e-2,
            verbalizers: (kind.head() == HeadKind::Verbalizer).then(|| {
                VerbalizerMap::new(vec!["a".into(), "b".into()], vec![vec![5], vec![6]]).unwrap()
            }),
        }
    }

    fn data() -> Vec<MaskedExample> {
        let p = MaskPolicy::new(MaskLayout::SingleSentenceSuffix, 1).unwrap();
        (0..4)
            .map(|i| insert_masks(&[vec![7 + i, 11 + i % 2]], p, 12, i % 2).unwrap())
            .collect()
    }

    #[test]
    fn parses_policies() {
        assert_eq!(
            PolicyKind::parse("bitfit+mte").unwrap(),
            PolicyKind::BitfitMte
        );
        assert_eq!(
            PolicyKind::parse("Pattern-Free-PET").unwrap(),
            PolicyKind::PatternFreePet
        );
        assert!(matches!(PolicyKind::parse("lora"), Err(Error::Contract(_))));
    }

    #[test]
    fn freeze_sets() {
        let mut m = Model::new(tiny(PolicyKind::Perfect), &mut Rng::new(0)).unwrap();
        let set = freeze_mask(&mut m, PolicyKind::Perfect).unwrap();
        assert!(set.contains(LABEL_EMBEDDING));
        assert!(set
            .iter()
            .all(|n| n == LABEL_EMBEDDING || n.contains("adapter") || n.contains("norm")));
        assert!(!set.iter().any(|n| n.contains("attention.query")));

        let mut m = Model::new(tiny(PolicyKind::BitfitMte), &mut Rng::new(0)).unwrap();
        let set = freeze_mask(&mut m, PolicyKind::BitfitMte).unwrap();
        assert!(set
            .iter()
            .all(|n| n == LABEL_EMBEDDING || n.ends_with("bias")));

        let mut m = Model::new(tiny(PolicyKind::Finetune), &mut Rng::new(0)).unwrap();
        let set = freeze_mask(&mut m, PolicyKind::Finetune).unwrap();
        assert_eq!(set.len(), m.params().len());
        assert!(freeze_mask(&mut m, PolicyKind::Perfect).is_err());
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut m = Model::new(tiny(PolicyKind::Perfect), &mut Rng::new(1)).unwrap();
        freeze_mask(&mut m, PolicyKind::Perfect).unwrap();
        let before = m.params().clone();
        let mut policy = TrainPolicy::new(PolicyKind::Perfect);
        policy.lr_backbone = 0.0;
        policy.lr_label_embedding = 0.0;
        let cfg = TrainConfig::default();
        let mut opt = cfg.optimizer();
        let d = data();
        let a = train_step(&mut m, &mut opt, &policy, &cfg, &d, 0)
            .unwrap()
            .loss;
        let b = train_step(&mut m, &mut opt, &policy, &cfg, &d, 1)
            .unwrap()
            .loss;
        assert_eq!(a, b);
        for (name, p) in before.iter() {
            assert_eq!(p.tensor, m.params().get(name).unwrap().tensor);
        }
    }

    #[test]
    fn every_policy_takes_a_step() {
        for kind in PolicyKind::ALL {
            let mut m = Model::new(tiny(kind), &mut Rng::new(2)).unwrap();
            freeze_mask(&mut m, kind).unwrap();
            let cfg = TrainConfig::default();
            let mut opt = cfg.optimizer();
            let s =
                train_step(&mut m, &mut opt, &TrainPolicy::new(kind), &cfg, &data(), 0).unwrap();
            assert!(s.loss.is_finite() && s.loss > 0.0, "{kind}: {}", s.loss);
        }
    }

    #[test]
    fn checkpoint_selection() {
        assert_eq!(select_checkpoint(&[(50, 0.5)]).unwrap(), 50);
        assert_eq!(
            select_checkpoint(&[(50, 0.5), (100, 0.6), (150, 0.7)]).unwrap(),
            150
        );
        assert_eq!(
            select_checkpoint(&[(50, 0.5), (100, 0.8), (150, 0.8)]).unwrap(),
            100
        );
        assert!(select_checkpoint(&[]).is_err());
    }

    #[test]
    fn checkpoint_schedule() {
        let mut c = TrainConfig::default();
        assert_eq!(c.checkpoint_steps().len(), 12);
        c.steps = 120;
        assert_eq!(c.checkpoint_steps(), vec![50, 100, 120]);
        c.steps = 0;
        assert_eq!(c.checkpoint_steps(), vec![0]);
    }

    #[test]
    fn registry_matches_closed_form_everywhere() {
        for kind in PolicyKind::ALL {
            let c = count_trainable_params(&tiny(kind), kind).unwrap();
            let m = Model::new(tiny(kind), &mut Rng::new(0)).unwrap();
            assert_eq!(c.total, m.params().total_count());
            assert_eq!(
                c.trainable,
                trainable_set(m.params(), kind)
                    .iter()
                    .map(|n| m.params().tensor(n).unwrap().numel())
                    .sum::<usize>()
            );
        }
        let c = count_trainable_params(&tiny(PolicyKind::Finetune), PolicyKind::Finetune).unwrap();
        assert_eq!(c.trainable, c.total);
    }

    #[test]
    fn adapter_count_grows_with_bottleneck() {
        let mut prev = 0;
        for b in 1..8 {
            let mut c = tiny(PolicyKind::Perfect);
            c.encoder.adapter = Some(AdapterConfig::new(b));
            let n = count_trainable_params(&c, PolicyKind::Perfect)
                .unwrap()
                .trainable;
            assert!(n > prev);
            prev = n;
        }
        let mut c = tiny(PolicyKind::Perfect);
        c.encoder.adapter = Some(AdapterConfig::new(0));
        assert!(count_trainable_params(&c, PolicyKind::Perfect).is_err());
    }
}
