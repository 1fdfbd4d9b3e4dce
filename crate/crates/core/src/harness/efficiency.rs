//! Trainable-parameter share, forward passes per query, step time and
//! element counts of a method.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::config::PreparedTask;
use crate::harness::episode::{sample_episode, InputEncoding};
use crate::harness::experiment::{init_model, run_setup, Method};
use crate::masking::MaskPolicy;
use crate::trainer::{self, count_trainable_params, ParamCount};

/// Parameter count of RoBERTa-large, the reference backbone.
pub const ROBERTA_LARGE_PARAMS: f64 = 355.41e6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub method: String,
    pub policy: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub percent_trained: f64,
    pub breakdown: BTreeMap<String, usize>,
    /// The same recipe on the RoBERTa-large shape.
    pub reference_trainable_params: usize,
    pub reference_total_params: usize,
    /// Reference trainable count over [`ROBERTA_LARGE_PARAMS`], in percent.
    pub reference_percent_trained: f64,
    pub forward_passes_per_query: f64,
    pub mean_step_seconds: f64,
    /// Parameter elements held by the model.
    pub parameter_elements: usize,
    /// Largest number of values and gradients held by one step's graph.
    pub peak_activation_elements: usize,
    pub steps_timed: usize,
    pub queries: usize,
}

/// Trainable counts of `method` with the task's head on the reference
/// shape.
pub fn reference_count(task: &PreparedTask, method: &Method) -> Result<ParamCount> {
    let setup = run_setup(task, method, 0)?;
    let mut cfg = setup.model_config;
    cfg.encoder = EncoderConfig::roberta_large_shape();
    if !method.kind().uses_adapters() {
        cfg.encoder.adapter = None;
    }
    count_trainable_params(&cfg, method.kind())
}

/// Times `steps` training steps on one episode and counts forward passes
/// over up to `queries` test inputs.
pub fn efficiency_report(
    task: &PreparedTask,
    method: &Method,
    steps: usize,
    queries: usize,
) -> Result<EfficiencyReport> {
    let mut setup = run_setup(task, method, 0)?;
    let count = count_trainable_params(&setup.model_config, method.kind())?;
    let reference = reference_count(task, method)?;
    let episode = sample_episode(&task.corpus, task.test.as_ref(), task.config.n_per_class, 0)?;
    let enc = InputEncoding {
        vocab: &task.vocab,
        classes: &episode.classes,
        policy: MaskPolicy::new(setup.layout, setup.mask_count)?,
        max_seq: setup.model_config.encoder.max_seq - setup.model_config.prompt_tokens,
        pattern: method.kind().uses_pattern(),
    };
    let train = enc.encode_all(&episode.train)?;
    let val = enc.encode_all(&episode.val)?;
    let test = enc.encode_all(&episode.test[..queries.min(episode.test.len())])?;
    if test.is_empty() {
        return Err(Error::Input("no test queries to count passes over".into()));
    }
    setup.train_config.steps = steps;
    setup.train_config.checkpoint_every = steps.max(1);
    setup.train_config.stop_at_perfect_val = false;
    let model = init_model(task, method, &setup, 0)?;
    let outcome = trainer::train(model, &train, &val, &setup.policy, &setup.train_config)?;
    outcome.model.reset_forward_passes();
    trainer::predict(
        &outcome.model,
        &test,
        setup.train_config.inference,
        outcome.prototypes.as_ref(),
        setup.train_config.length_normalize,
    )?;
    Ok(EfficiencyReport {
        method: method.name.clone(),
        policy: method.kind().name().into(),
        trainable_params: count.trainable,
        total_params: count.total,
        percent_trained: count.percent(),
        breakdown: count.breakdown,
        reference_trainable_params: reference.trainable,
        reference_total_params: reference.total,
        reference_percent_trained: 100.0 * reference.trainable as f64 / ROBERTA_LARGE_PARAMS,
        forward_passes_per_query: outcome.model.forward_passes() as f64 / test.len() as f64,
        mean_step_seconds: outcome.mean_step_seconds,
        parameter_elements: outcome.model.params().total_count(),
        peak_activation_elements: outcome.peak_graph_elements,
        steps_timed: outcome.steps_run,
        queries: test.len(),
    })
}
