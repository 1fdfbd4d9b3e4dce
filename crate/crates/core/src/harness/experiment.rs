//! Seed cross-products of single runs, aggregation into mean / worst /
//! std, and the result files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::PreparedTask;
use crate::harness::episode::{sample_episode, FewShotEpisode, InputEncoding};
use crate::head::{self, InferenceMode};
use crate::masking::{MaskLayout, MaskPolicy};
use crate::model::{HeadKind, Model, ModelConfig, LABEL_EMBEDDING};
use crate::trainer::{
    self, count_trainable_params, LossKind, PolicyKind, TrainConfig, TrainPolicy,
};

/// Output directory used when no `--out` flag is given.
pub const OUTPUT_ENV: &str = "PERFECT_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelInit {
    #[default]
    Random,
    /// Rows of the output embedding for each class's verbalizer tokens.
    Verbalizer,
}

/// A named training and inference recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub policy: TrainPolicy,
    pub loss: LossKind,
    pub inference: InferenceMode,
    pub label_init: LabelInit,
    pub mask_count: Option<usize>,
    pub label_sigma: Option<f64>,
    pub layout: Option<MaskLayout>,
    /// Overrides the task's step budget (`Some(0)` evaluates the model as
    /// initialized).
    pub steps: Option<usize>,
}

impl Method {
    pub const PRESETS: [&'static str; 12] = [
        "perfect",
        "perfect_init",
        "untrained",
        "perfect_ce",
        "perfect_label_emb",
        "perfect_objective",
        "perfect_no_adapters",
        "bitfit_mte",
        "prompt_mte",
        "finetune",
        "pet",
        "pattern_free_pet",
    ];

    fn base(name: &str, kind: PolicyKind) -> Self {
        Self {
            name: name.to_string(),
            policy: TrainPolicy::new(kind),
            loss: LossKind::Hinge,
            inference: InferenceMode::Prototypical,
            label_init: LabelInit::Random,
            mask_count: None,
            label_sigma: None,
            layout: None,
            steps: None,
        }
    }

    /// Looks up a preset. `perfect_ce` swaps the hinge loss for
    /// cross-entropy; `perfect_label_emb` and `perfect_objective` swap
    /// prototype inference for the label embedding or the training
    /// objective; `untrained` scores the initialized model with the
    /// training objective.
    pub fn preset(name: &str) -> Result<Self> {
        let norm = name.to_ascii_lowercase().replace(['-', '+'], "_");
        let m = match norm.as_str() {
            "perfect" => Self::base("perfect", PolicyKind::Perfect),
            "perfect_init" => Self {
                label_init: LabelInit::Verbalizer,
                ..Self::base("perfect_init", PolicyKind::Perfect)
            },
            "untrained" => Self {
                inference: InferenceMode::TrainingObjective,
                steps: Some(0),
                ..Self::base("untrained", PolicyKind::Perfect)
            },
            "perfect_ce" => Self {
                loss: LossKind::CrossEntropy,
                ..Self::base("perfect_ce", PolicyKind::Perfect)
            },
            "perfect_label_emb" => Self {
                inference: InferenceMode::LabelEmbedding,
                ..Self::base("perfect_label_emb", PolicyKind::Perfect)
            },
            "perfect_objective" => Self {
                inference: InferenceMode::TrainingObjective,
                ..Self::base("perfect_objective", PolicyKind::Perfect)
            },
            other => {
                let kind = PolicyKind::parse(other)
                    .map_err(|_| Error::Config(format!("unknown method {name:?}")))?;
                Self::base(kind.name(), kind)
            }
        };
        Ok(m)
    }

    pub fn kind(&self) -> PolicyKind {
        self.policy.kind
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub data_seed: u64,
    pub train_seed: u64,
    pub policy: String,
    #[serde(rename = "M")]
    pub mask_count: usize,
    pub sigma: f64,
    /// Empty when the run aborted.
    pub accuracy: Option<f64>,
    pub selected_step: Option<usize>,
    pub trainable_params: usize,
}

/// Everything known about one run, written as JSON next to the CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    pub record: RunRecord,
    pub task: String,
    pub policy: TrainPolicy,
    pub loss: LossKind,
    pub inference: InferenceMode,
    pub label_init: LabelInit,
    pub layout: MaskLayout,
    pub optimizer: String,
    pub steps: usize,
    pub steps_run: usize,
    pub checkpoint_every: usize,
    pub history: Vec<trainer::CheckpointRecord>,
    pub val_accuracy: Option<f64>,
    pub total_params: usize,
    pub trainable_breakdown: BTreeMap<String, usize>,
    pub forward_passes_per_query: Option<f64>,
    pub mean_step_seconds: Option<f64>,
    pub peak_graph_elements: Option<usize>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
    pub notes: Vec<String>,
}

/// Resolved shape of one run's inputs and model.
#[derive(Clone, Debug)]
pub struct RunSetup {
    pub model_config: ModelConfig,
    pub layout: MaskLayout,
    pub mask_count: usize,
    pub sigma: f64,
    pub policy: TrainPolicy,
    pub train_config: TrainConfig,
}

pub fn run_setup(task: &PreparedTask, method: &Method, train_seed: u64) -> Result<RunSetup> {
    let kind = method.kind();
    let head = kind.head();
    let mut encoder = task.config.encoder.clone();
    if !kind.uses_adapters() {
        encoder.adapter = None;
    } else if encoder.adapter.is_none() {
        return Err(Error::Config(format!(
            "method {} needs an adapter config",
            method.name
        )));
    }
    let verbalizers =
        match head {
            HeadKind::Verbalizer => Some(task.verbalizers.clone().ok_or_else(|| {
                Error::Config(format!("method {} needs verbalizers", method.name))
            })?),
            _ => None,
        };
    let mask_count = match &verbalizers {
        Some(v) => v.max_len(),
        None => method.mask_count.unwrap_or(task.config.mask_count),
    };
    let sigma = method.label_sigma.unwrap_or(task.config.label_sigma);
    let layout = method.layout.unwrap_or_else(|| task.default_layout());
    if layout.is_pair() != task.is_pair() {
        return Err(Error::Config(format!(
            "layout {} does not fit a {} task",
            layout.name(),
            if task.is_pair() {
                "pair"
            } else {
                "single-sentence"
            }
        )));
    }
    let model_config = ModelConfig {
        encoder,
        num_classes: task.classes.len(),
        mask_count,
        head,
        prompt_tokens: if kind.uses_prompt() {
            task.config.prompt_tokens
        } else {
            0
        },
        label_sigma: sigma,
        verbalizers,
    };
    model_config.validate()?;
    let mut train_config = task.config.train.clone();
    train_config.seed = train_seed;
    train_config.loss = method.loss;
    train_config.inference = method.inference;
    if let Some(s) = method.steps {
        train_config.steps = s;
    }
    let mut policy = method.policy;
    let c = &task.config;
    policy.lr_backbone = c.lr_backbone.unwrap_or(policy.lr_backbone);
    policy.lr_label_embedding = c.lr_label_embedding.unwrap_or(policy.lr_label_embedding);
    policy.lr_prompt = c.lr_prompt.unwrap_or(policy.lr_prompt);
    Ok(RunSetup {
        model_config,
        layout,
        mask_count,
        sigma,
        policy,
        train_config,
    })
}

/// Builds the untrained model of a run.
pub fn init_model(
    task: &PreparedTask,
    method: &Method,
    setup: &RunSetup,
    train_seed: u64,
) -> Result<Model> {
    let mut model = Model::with_backbone(setup.model_config.clone(), &task.backbone, train_seed)?;
    if method.label_init == LabelInit::Verbalizer {
        let v = task
            .verbalizers
            .as_ref()
            .ok_or_else(|| Error::Config("verbalizer initialization needs verbalizers".into()))?;
        let emb = model
            .params()
            .tensor(crate::baselines::OUTPUT_EMBEDDING)?
            .clone();
        let l = head::label_embedding_from_verbalizers(&emb, v, setup.mask_count)?;
        model.params_mut().get_mut(LABEL_EMBEDDING)?.tensor = l;
    }
    Ok(model)
}

fn optimizer_name(c: &TrainConfig) -> String {
    format!(
        "adamw(beta1={}, beta2={}, eps={}, weight_decay={})",
        c.beta1, c.beta2, c.eps, c.weight_decay
    )
}

/// Metadata of a run before it executes, with its resolved setup.
fn pending_run(
    task: &PreparedTask,
    method: &Method,
    data_seed: u64,
    train_seed: u64,
) -> (RunMetadata, Result<RunSetup>) {
    let setup = run_setup(task, method, train_seed);
    let (mask_count, sigma, layout, tc, policy) = match &setup {
        Ok(s) => (
            s.mask_count,
            s.sigma,
            s.layout,
            s.train_config.clone(),
            s.policy,
        ),
        Err(_) => (
            method.mask_count.unwrap_or(task.config.mask_count),
            method.label_sigma.unwrap_or(task.config.label_sigma),
            method.layout.unwrap_or_else(|| task.default_layout()),
            task.config.train.clone(),
            method.policy,
        ),
    };
    let counted = setup
        .as_ref()
        .ok()
        .and_then(|s| count_trainable_params(&s.model_config, method.kind()).ok());
    let mut meta = RunMetadata {
        record: RunRecord {
            method: method.name.clone(),
            data_seed,
            train_seed,
            policy: method.kind().name().into(),
            mask_count,
            sigma,
            accuracy: None,
            selected_step: None,
            trainable_params: counted.as_ref().map_or(0, |c| c.trainable),
        },
        task: task.config.name.clone(),
        policy,
        loss: method.loss,
        inference: method.inference,
        label_init: method.label_init,
        layout,
        optimizer: optimizer_name(&tc),
        steps: tc.steps,
        steps_run: 0,
        checkpoint_every: tc.checkpoint_every,
        history: Vec::new(),
        val_accuracy: None,
        total_params: counted.as_ref().map_or(0, |c| c.total),
        trainable_breakdown: counted.map(|c| c.breakdown).unwrap_or_default(),
        forward_passes_per_query: None,
        mean_step_seconds: None,
        peak_graph_elements: None,
        final_loss: None,
        error: None,
        notes: Vec::new(),
    };
    if method.kind() == PolicyKind::Pet {
        meta.notes
            .push("single toy pattern and verbalizer map; no pattern ensemble".into());
    }
    (meta, setup)
}

/// Trains on `episode` and reports test accuracy. Errors are recorded in
/// the returned metadata.
pub fn run_single(
    task: &PreparedTask,
    method: &Method,
    episode: &FewShotEpisode,
    train_seed: u64,
) -> RunMetadata {
    let (mut meta, setup) = pending_run(task, method, episode.data_seed, train_seed);
    let result = setup.and_then(|s| execute(task, method, episode, train_seed, &s, &mut meta));
    if let Err(e) = result {
        meta.error = Some(e.to_string());
    }
    meta
}

fn execute(
    task: &PreparedTask,
    method: &Method,
    episode: &FewShotEpisode,
    train_seed: u64,
    setup: &RunSetup,
    meta: &mut RunMetadata,
) -> Result<()> {
    let enc = InputEncoding {
        vocab: &task.vocab,
        classes: &episode.classes,
        policy: MaskPolicy::new(setup.layout, setup.mask_count)?,
        max_seq: setup.model_config.encoder.max_seq - setup.model_config.prompt_tokens,
        pattern: method.kind().uses_pattern(),
    };
    let train = enc.encode_all(&episode.train)?;
    let val = enc.encode_all(&episode.val)?;
    let test = enc.encode_all(&episode.test)?;
    if test.is_empty() {
        return Err(Error::Input("episode has no test examples".into()));
    }
    let model = init_model(task, method, setup, train_seed)?;
    let outcome = trainer::train(model, &train, &val, &setup.policy, &setup.train_config)?;
    outcome.model.reset_forward_passes();
    let pred = trainer::predict(
        &outcome.model,
        &test,
        setup.train_config.inference,
        outcome.prototypes.as_ref(),
        setup.train_config.length_normalize,
    )?;
    meta.forward_passes_per_query = Some(outcome.model.forward_passes() as f64 / test.len() as f64);
    meta.record.accuracy = Some(trainer::accuracy(&pred, &test));
    meta.record.selected_step = Some(outcome.selected_step);
    meta.val_accuracy = Some(outcome.val_accuracy());
    meta.history = outcome.history.clone();
    meta.steps_run = outcome.steps_run;
    meta.mean_step_seconds = Some(outcome.mean_step_seconds);
    meta.peak_graph_elements = Some(outcome.peak_graph_elements);
    meta.final_loss = outcome.losses.last().copied();
    if outcome.stopped_early {
        meta.notes.push(format!(
            "stopped at step {} with perfect validation accuracy",
            outcome.steps_run
        ));
    }
    Ok(())
}

/// Mean, minimum and sample standard deviation (divisor `n − 1`; zero for
/// a single value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub worst: f64,
    pub std: f64,
    pub n: usize,
}

pub const STD_DIVISOR: &str = "n-1";

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Contract("cannot aggregate an empty list".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let worst = values.iter().copied().fold(f64::INFINITY, f64::min);
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Aggregate {
        mean,
        worst,
        std,
        n,
    })
}

/// Aggregate of one (method, policy, M, σ) group of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub method: String,
    pub policy: String,
    #[serde(rename = "M")]
    pub mask_count: usize,
    pub sigma: f64,
    pub runs: usize,
    pub completed: usize,
    pub complete: bool,
    pub mean: Option<f64>,
    pub worst: Option<f64>,
    pub std: Option<f64>,
    pub std_divisor: String,
}

fn group_key(r: &RunRecord) -> (String, String, usize, u64) {
    (
        r.method.clone(),
        r.policy.clone(),
        r.mask_count,
        r.sigma.to_bits(),
    )
}

/// Sorts rows by group and then by seeds.
pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| {
        (&a.method, &a.policy, a.mask_count)
            .cmp(&(&b.method, &b.policy, b.mask_count))
            .then(a.sigma.total_cmp(&b.sigma))
            .then((a.data_seed, a.train_seed).cmp(&(b.data_seed, b.train_seed)))
    });
}

/// One summary per group, in order of first appearance.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<GroupSummary>> {
    let mut order: Vec<(String, String, usize, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, String, usize, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let k = group_key(r);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let rows = &groups[&k];
            let acc: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
            let agg = if acc.is_empty() {
                None
            } else {
                Some(aggregate(&acc)?)
            };
            Ok(GroupSummary {
                method: k.0,
                policy: k.1,
                mask_count: k.2,
                sigma: f64::from_bits(k.3),
                runs: rows.len(),
                completed: acc.len(),
                complete: acc.len() == rows.len(),
                mean: agg.map(|a| a.mean),
                worst: agg.map(|a| a.worst),
                std: agg.map(|a| a.std),
                std_divisor: STD_DIVISOR.into(),
            })
        })
        .collect()
}

/// Result of a seed cross-product.
#[derive(Clone, Debug)]
pub struct RunMetrics {
    pub runs: Vec<RunMetadata>,
    pub summary: GroupSummary,
}

impl RunMetrics {
    pub fn records(&self) -> Vec<RunRecord> {
        self.runs.iter().map(|r| r.record.clone()).collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.record.accuracy).collect()
    }

    pub fn failures(&self) -> Vec<&RunMetadata> {
        self.runs.iter().filter(|r| r.error.is_some()).collect()
    }
}

/// Every (data seed, train seed) pair: sample an episode, train, select
/// the checkpoint on validation, score the test set. Failed runs are kept
/// with their error and left out of the aggregate.
pub fn run_experiment(
    task: &PreparedTask,
    method: &Method,
    data_seeds: &[u64],
    train_seeds: &[u64],
    mut progress: impl FnMut(&RunMetadata),
) -> Result<RunMetrics> {
    if data_seeds.is_empty() || train_seeds.is_empty() {
        return Err(Error::Config(
            "need at least one data seed and one train seed".into(),
        ));
    }
    let mut runs = Vec::with_capacity(data_seeds.len() * train_seeds.len());
    for &ds in data_seeds {
        let episode = sample_episode(
            &task.corpus,
            task.test.as_ref(),
            task.config.n_per_class,
            ds,
        );
        for &ts in train_seeds {
            let meta = match &episode {
                Ok(ep) => run_single(task, method, ep, ts),
                Err(e) => {
                    let (mut m, _) = pending_run(task, method, ds, ts);
                    m.error = Some(e.to_string());
                    m
                }
            };
            progress(&meta);
            runs.push(meta);
        }
    }
    runs.sort_by_key(|r| (r.record.data_seed, r.record.train_seed));
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let summary = summarize(&records)?
        .into_iter()
        .next()
        .expect("one group per experiment");
    Ok(RunMetrics { runs, summary })
}

/// Where result files go: `--out` if given, else `$PERFECT_OUTPUT_DIR`,
/// else `results/`.
pub fn output_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

pub fn write_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Writes `results.csv`, `aggregates.json` and `runs/*.json`; returns the
/// summaries written.
pub fn write_results(dir: &Path, runs: &[RunMetadata]) -> Result<Vec<GroupSummary>> {
    fs::create_dir_all(dir.join("runs"))?;
    let mut records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    sort_records(&mut records);
    write_csv(&dir.join("results.csv"), &records)?;
    let summary = summarize(&records)?;
    fs::write(
        dir.join("aggregates.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    for r in runs {
        let name = format!(
            "{}_M{}_s{:e}_d{}_t{}.json",
            r.record.method,
            r.record.mask_count,
            r.record.sigma,
            r.record.data_seed,
            r.record.train_seed
        );
        fs::write(
            dir.join("runs").join(name),
            serde_json::to_string_pretty(r)?,
        )?;
    }
    Ok(summary)
}

pub fn read_aggregates(path: &Path) -> Result<Vec<GroupSummary>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
