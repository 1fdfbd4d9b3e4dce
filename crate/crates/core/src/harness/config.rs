//! Task configuration and the data a task run needs.
//!
//! A task file is TOML. Every key is optional:
//!
//! ```toml
//! name = "sentiment"
//! synthetic = "keyword_sentiment"   # ignored when train_path is set
//! synthetic_train = 400              # pool the episodes are drawn from
//! synthetic_test = 200               # separate held-out set
//! synthetic_seed = 0
//! verbalizers = "single"            # or "mixed", or verbalizers_path
//! n_per_class = 16
//! mask_count = 2
//! layout = "single_sentence_suffix" # default depends on the corpus
//! label_sigma = 1e-4
//! prompt_tokens = 20
//! backbone_seed = 0
//! cache_dir = "cache"                # reuse pretrained backbones
//! lr_backbone = 1e-4                 # per-group learning-rate overrides
//! lr_label_embedding = 1e-2
//!
//! [encoder]                          # toy encoder unless overridden
//! hidden = 64
//!
//! [pretrain]                         # MLM stage; steps = 0 skips it
//! steps = 600
//!
//! [train]
//! steps = 600
//! checkpoint_every = 50
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{VerbalizerMap, TOY_PATTERN};
use crate::corpus::Corpus;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::synth::{self, SynthTask};
use crate::masking::{tokenize, MaskLayout, Vocab};
use crate::params::ParamStore;
use crate::pretrain::{self, PretrainConfig, Sequence};
use crate::trainer::TrainConfig;

/// Environment variable naming the backbone cache directory when the
/// config does not.
pub const CACHE_ENV: &str = "PERFECT_CACHE_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerbalizerStyle {
    /// One token per class.
    #[default]
    Single,
    /// Lengths `1, 3, 1, 3, ...` by class, built by prefixing the single
    /// token with two filler words.
    Mixed,
}

/// Filler words used by [`VerbalizerStyle::Mixed`].
pub const MIXED_FILLER: [&str; 2] = ["quite", "really"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub name: String,
    pub synthetic: Option<String>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub verbalizers_path: Option<PathBuf>,
    pub verbalizers: VerbalizerStyle,
    pub n_per_class: usize,
    pub mask_count: usize,
    pub layout: Option<MaskLayout>,
    pub label_sigma: f64,
    pub prompt_tokens: usize,
    pub backbone_seed: u64,
    /// Learning-rate overrides for every method run on this task.
    pub lr_backbone: Option<f64>,
    pub lr_label_embedding: Option<f64>,
    pub lr_prompt: Option<f64>,
    /// Where pretrained backbones are stored and looked up.
    pub cache_dir: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            name: "keyword_sentiment".into(),
            synthetic: Some("keyword_sentiment".into()),
            synthetic_train: 400,
            synthetic_test: 200,
            synthetic_seed: 0,
            train_path: None,
            test_path: None,
            verbalizers_path: None,
            verbalizers: VerbalizerStyle::Single,
            n_per_class: 16,
            mask_count: 2,
            layout: None,
            label_sigma: crate::head::DEFAULT_SIGMA,
            prompt_tokens: 20,
            backbone_seed: 0,
            lr_backbone: None,
            lr_label_embedding: None,
            lr_prompt: None,
            cache_dir: None,
            encoder: EncoderConfig::toy(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl TaskConfig {
    pub fn synthetic(task: SynthTask) -> Self {
        Self {
            name: task.to_string(),
            synthetic: Some(task.to_string()),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        // Relative corpus paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.train_path,
            &mut cfg.test_path,
            &mut cfg.verbalizers_path,
            &mut cfg.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Corpus, vocabulary and verbalizers of a configured task.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub config: TaskConfig,
    pub corpus: Corpus,
    pub test: Option<Corpus>,
    pub classes: Vec<String>,
    pub vocab: Vocab,
    pub verbalizers: Option<VerbalizerMap>,
    /// Encoder tensors every run of the task starts from.
    pub backbone: ParamStore,
    /// Mean MLM loss over the last pretraining steps.
    pub pretrain_loss: Option<f64>,
}

impl PreparedTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        // A file corpus overrides the (defaulted) synthetic task.
        let synth_task = match config.train_path {
            Some(_) => None,
            None => config
                .synthetic
                .as_deref()
                .map(SynthTask::parse)
                .transpose()?,
        };
        let (corpus, test) = match (&config.train_path, synth_task) {
            (Some(p), _) => {
                let test = config.test_path.as_deref().map(Corpus::load).transpose()?;
                (Corpus::load(p)?, test)
            }
            (None, Some(t)) => (
                synth::generate(t, config.synthetic_train, config.synthetic_seed),
                Some(synth::generate(
                    t,
                    config.synthetic_test,
                    config.synthetic_seed.wrapping_add(1),
                )),
            ),
            (None, None) => {
                return Err(Error::Config("task needs train_path or synthetic".into()));
            }
        };
        if corpus.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        let classes = corpus.classes();

        let mut extra: Vec<String> = TOY_PATTERN.iter().map(|s| s.to_string()).collect();
        extra.extend(MIXED_FILLER.iter().map(|s| s.to_string()));
        let default_words = synth_task.map(|t| {
            extra.extend(t.extra_words());
            t.verbalizer_words()
        });
        let mut file_words = None;
        if let Some(p) = &config.verbalizers_path {
            let text = std::fs::read_to_string(p)?;
            let map: std::collections::BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            extra.extend(map.values().flatten().map(|w| w.to_lowercase()));
            file_words = Some(text);
        }
        let texts = corpus
            .examples
            .iter()
            .chain(test.iter().flat_map(|t| t.examples.iter()))
            .flat_map(|e| e.texts());
        let extra_refs: Vec<&str> = extra.iter().map(String::as_str).collect();
        let vocab = Vocab::build(texts, &extra_refs);
        if vocab.len() > config.encoder.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocabulary of {} exceeds encoder vocab_size {}",
                vocab.len(),
                config.encoder.vocab_size
            )));
        }

        let verbalizers = match (file_words, default_words) {
            (Some(text), _) => Some(VerbalizerMap::from_json(&text, &classes, &vocab)?),
            (None, Some(words)) => {
                let words: Vec<Vec<String>> = classes
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let mut w = words
                            .iter()
                            .find(|(name, _)| name == c)
                            .map(|(_, w)| w.clone())
                            .ok_or_else(|| Error::Config(format!("no verbalizer for class {c}")))?;
                        if config.verbalizers == VerbalizerStyle::Mixed && k % 2 == 1 {
                            let mut long: Vec<String> =
                                MIXED_FILLER.iter().map(|s| s.to_string()).collect();
                            long.append(&mut w);
                            w = long;
                        }
                        Ok(w)
                    })
                    .collect::<Result<_>>()?;
                Some(VerbalizerMap::from_words(&classes, &words, &vocab)?)
            }
            (None, None) => None,
        };
        let sequences = match synth_task {
            Some(t) => {
                let seed = config.synthetic_seed.wrapping_add(2);
                pretrain_sequences(
                    &synth::generate(t, config.pretrain.corpus_size, seed),
                    &vocab,
                )
            }
            None => pretrain_sequences(&corpus, &vocab),
        };
        let (backbone, pretrain_loss) = load_or_pretrain(&config, &vocab, &sequences)?;
        Ok(Self {
            config,
            corpus,
            test,
            classes,
            vocab,
            verbalizers,
            backbone,
            pretrain_loss,
        })
    }

    pub fn is_pair(&self) -> bool {
        self.corpus.is_pair()
    }

    pub fn default_layout(&self) -> MaskLayout {
        self.config.layout.unwrap_or(if self.is_pair() {
            MaskLayout::PairBetween
        } else {
            MaskLayout::SingleSentenceSuffix
        })
    }
}

/// Unlabeled inputs for the MLM stage.
pub fn pretrain_sequences(corpus: &Corpus, vocab: &Vocab) -> Vec<Sequence> {
    corpus
        .examples
        .iter()
        .map(|e| match &e.text_b {
            Some(b) => Sequence::pair(&tokenize(&e.text_a, vocab), &tokenize(b, vocab)),
            None => Sequence::single(tokenize(&e.text_a, vocab)),
        })
        .collect()
}

/// FNV-1a over the inputs that determine a pretrained backbone.
fn backbone_key(config: &TaskConfig, vocab: &Vocab, sequences: &[Sequence]) -> Result<String> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    feed(&serde_json::to_vec(&pretrain::backbone_config(
        &config.encoder,
    ))?);
    feed(&serde_json::to_vec(&config.pretrain)?);
    feed(&config.backbone_seed.to_le_bytes());
    for id in 0..vocab.len() {
        feed(vocab.token(id).unwrap_or_default().as_bytes());
        feed(&[0]);
    }
    for s in sequences {
        for (&i, &g) in s.ids.iter().zip(&s.segments) {
            feed(&(i as u64).to_le_bytes());
            feed(&(g as u64).to_le_bytes());
        }
        feed(&[0xff]);
    }
    Ok(format!("{h:016x}"))
}

fn load_or_pretrain(
    config: &TaskConfig,
    vocab: &Vocab,
    sequences: &[Sequence],
) -> Result<(ParamStore, Option<f64>)> {
    if config.pretrain.steps == 0 {
        return Ok((
            pretrain::init_backbone(&config.encoder, config.backbone_seed)?,
            None,
        ));
    }
    let dir = config
        .cache_dir
        .clone()
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from));
    let path = match &dir {
        Some(d) => Some(d.join(format!(
            "backbone-{}.bin",
            backbone_key(config, vocab, sequences)?
        ))),
        None => None,
    };
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let (store, meta) = crate::checkpoint::store_from_bytes(&std::fs::read(p)?)?;
        return Ok((store, meta["tail_loss"].as_f64()));
    }
    let out = pretrain::pretrain(
        &config.encoder,
        config.backbone_seed,
        sequences,
        &config.pretrain,
    )?;
    let loss = out.tail_loss(100);
    if let Some(p) = path {
        std::fs::create_dir_all(p.parent().unwrap_or(Path::new(".")))?;
        let meta = serde_json::json!({ "tail_loss": loss, "steps": config.pretrain.steps });
        // Write then rename so concurrent readers never see a partial file.
        let tmp = p.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, crate::checkpoint::store_to_bytes(&out.params, &meta)?)?;
        std::fs::rename(&tmp, &p)?;
    }
    Ok((out.params, loss))
}
