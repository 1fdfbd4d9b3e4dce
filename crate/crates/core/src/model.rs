//! An encoder plus its task head, held as one parameter registry.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::baselines::VerbalizerMap;
use crate::encoder::{self, Encoded, EncoderConfig};
use crate::error::{Error, Result};
use crate::masking::MaskedExample;
use crate::params::{BoundParams, Init, ParamRole, ParamSpec, ParamStore};
use crate::tensor::{Graph, Rng, Tensor, Var};

pub const LABEL_EMBEDDING: &str = "label_embedding";
pub const SOFT_PROMPT: &str = "soft_prompt";
pub const CLS_WEIGHT: &str = "cls_head.weight";
pub const CLS_BIAS: &str = "cls_head.bias";

/// Soft prompts are initialized from embeddings of this many most
/// frequent tokens.
pub const PROMPT_INIT_POOL: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Per-slot label embeddings `L[K×M×H]`.
    LabelEmbedding,
    /// Linear classifier on the CLS hidden state.
    Classifier,
    /// Verbalizer tokens scored through the tied MLM output embedding.
    Verbalizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    /// Mask slots per input (`M`); for verbalizer heads, the longest
    /// verbalizer.
    pub mask_count: usize,
    pub head: HeadKind,
    #[serde(default)]
    pub prompt_tokens: usize,
    /// Std of the label-embedding initializer.
    pub label_sigma: f64,
    #[serde(default)]
    pub verbalizers: Option<VerbalizerMap>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes < 1 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.mask_count < 1 {
            return Err(Error::Config("mask count must be at least 1".into()));
        }
        if self.head == HeadKind::Verbalizer {
            let v = self
                .verbalizers
                .as_ref()
                .ok_or_else(|| Error::Config("verbalizer head needs a verbalizer map".into()))?;
            if v.num_classes() != self.num_classes {
                return Err(Error::Config(format!(
                    "verbalizer map has {} classes, model {}",
                    v.num_classes(),
                    self.num_classes
                )));
            }
            if v.max_len() != self.mask_count {
                return Err(Error::Config(format!(
                    "mask count {} differs from longest verbalizer {}",
                    self.mask_count,
                    v.max_len()
                )));
            }
        }
        if self.prompt_tokens >= self.encoder.max_seq {
            return Err(Error::Config("soft prompt fills the whole sequence".into()));
        }
        Ok(())
    }

    /// Every tensor of the model, encoder first.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let h = self.encoder.hidden;
        let mut specs = self.encoder.param_specs();
        if self.prompt_tokens > 0 {
            specs.push(ParamSpec::new(
                SOFT_PROMPT,
                vec![self.prompt_tokens, h],
                ParamRole::Prompt,
                Init::Zeros,
            ));
        }
        match self.head {
            HeadKind::LabelEmbedding => specs.push(ParamSpec::new(
                LABEL_EMBEDDING,
                vec![self.num_classes, self.mask_count, h],
                ParamRole::LabelEmbedding,
                Init::Normal(self.label_sigma),
            )),
            HeadKind::Classifier => {
                specs.push(ParamSpec::new(
                    CLS_WEIGHT,
                    vec![h, self.num_classes],
                    ParamRole::HeadWeight,
                    Init::Normal(self.encoder.init_std),
                ));
                specs.push(ParamSpec::new(
                    CLS_BIAS,
                    vec![self.num_classes],
                    ParamRole::HeadBias,
                    Init::Zeros,
                ));
            }
            HeadKind::Verbalizer => {}
        }
        specs
    }
}

/// Encoder parameters and head, with a count of encoder forward passes.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    passes: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            passes: AtomicUsize::new(self.forward_passes()),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::from_specs(&config.param_specs(), rng)?;
        if config.prompt_tokens > 0 {
            let prompt = sample_prompt_init(&params, config.prompt_tokens, rng)?;
            params.get_mut(SOFT_PROMPT)?.tensor = prompt;
        }
        Ok(Self {
            config,
            params,
            passes: AtomicUsize::new(0),
        })
    }

    /// Encoder weights drawn from `backbone_seed`, task-specific tensors
    /// (adapters, head, prompt) from `task_seed`. Every tensor has its own
    /// stream, so the backbone is the same for any head or adapter layout.
    pub fn with_seeds(config: ModelConfig, backbone_seed: u64, task_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::from_specs_seeded(&config.param_specs(), |s| {
            if s.role.is_task_specific() {
                task_seed
            } else {
                backbone_seed
            }
        })?;
        if config.prompt_tokens > 0 {
            let mut rng = Rng::derive(task_seed, SOFT_PROMPT);
            let prompt = sample_prompt_init(&params, config.prompt_tokens, &mut rng)?;
            params.get_mut(SOFT_PROMPT)?.tensor = prompt;
        }
        Ok(Self {
            config,
            params,
            passes: AtomicUsize::new(0),
        })
    }

    /// Like [`Model::with_seeds`], with every tensor named in `backbone`
    /// taken from it.
    pub fn with_backbone(
        config: ModelConfig,
        backbone: &ParamStore,
        task_seed: u64,
    ) -> Result<Self> {
        let mut model = Self::with_seeds(config, 0, task_seed)?;
        for (name, p) in backbone.iter() {
            let slot = model.params.get_mut(name)?;
            if slot.tensor.shape() != p.tensor.shape() {
                return Err(Error::Shape {
                    op: "backbone tensor",
                    left: slot.tensor.shape().to_vec(),
                    right: p.tensor.shape().to_vec(),
                });
            }
            slot.tensor = p.tensor.clone();
        }
        if model.config.prompt_tokens > 0 {
            let mut rng = Rng::derive(task_seed, SOFT_PROMPT);
            let prompt = sample_prompt_init(&model.params, model.config.prompt_tokens, &mut rng)?;
            model.params.get_mut(SOFT_PROMPT)?.tensor = prompt;
        }
        Ok(model)
    }

    /// Wraps existing tensors; used when loading checkpoints.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for spec in config.param_specs() {
            let t = params.tensor(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape {
                    op: "model tensor",
                    left: spec.shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            params,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Encoder forward passes performed so far.
    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// One encoder pass, counted.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        ids: &[usize],
        segments: Option<&[usize]>,
    ) -> Result<Encoded> {
        let prompt = if self.config.prompt_tokens > 0 {
            Some(bound.get(SOFT_PROMPT)?)
        } else {
            None
        };
        self.passes.fetch_add(1, Ordering::Relaxed);
        encoder::encode(g, bound, &self.config.encoder, ids, segments, prompt)
    }

    /// Hidden states at the mask slots of `example`, `M×H`.
    pub fn mask_hidden(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        example: &MaskedExample,
    ) -> Result<Var> {
        let enc = self.encode(g, bound, &example.ids, Some(&example.segments))?;
        if enc.truncated > 0 {
            return Err(Error::Input(format!(
                "example of {} tokens does not fit max_seq {}",
                example.ids.len(),
                self.config.encoder.max_seq
            )));
        }
        let rows: Vec<usize> = example
            .mask_positions
            .iter()
            .map(|p| p + enc.prompt_len)
            .collect();
        g.gather_rows(enc.hidden, &rows)
    }

    /// Mask-slot embeddings of each example, computed without gradients.
    pub fn mask_embeddings(&self, examples: &[MaskedExample]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(64) {
            let mut g = Graph::new();
            let bound = self.params.bind_frozen(&mut g);
            for ex in chunk {
                let h = self.mask_hidden(&mut g, &bound, ex)?;
                out.push(g.value(h).clone());
            }
        }
        Ok(out)
    }

    /// Final hidden states of one sequence, without gradients.
    pub fn hidden_states(&self, ids: &[usize], segments: Option<&[usize]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let enc = self.encode(&mut g, &bound, ids, segments)?;
        Ok(g.value(enc.hidden).clone())
    }

    pub fn label_embedding(&self) -> Result<&Tensor> {
        self.params.tensor(LABEL_EMBEDDING)
    }
}

fn sample_prompt_init(params: &ParamStore, count: usize, rng: &mut Rng) -> Result<Tensor> {
    let emb = params.tensor("embeddings.token")?;
    let vocab = emb.rows();
    // Ids after the specials are ordered by corpus frequency.
    let first = crate::masking::MASK + 1;
    let mut pool: Vec<usize> = (first.min(vocab)..vocab.min(first + PROMPT_INIT_POOL)).collect();
    if pool.is_empty() {
        pool = (0..vocab).collect();
    }
    rng.shuffle(&mut pool);
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let id = if i < pool.len() {
            pool[i]
        } else {
            pool[rng.below(pool.len())]
        };
        rows.push(emb.row(id).to_vec());
    }
    Tensor::from_rows(&rows)
}
