use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use perfect::checkpoint;
use perfect::harness::ablate::{run_ablation, Sweep};
use perfect::harness::config::CACHE_ENV;
use perfect::harness::efficiency::efficiency_report;
use perfect::harness::experiment::{self, output_dir, write_results, Method, RunMetadata};
use perfect::harness::synth::{self, SynthTask};
use perfect::harness::{sample_episode, PreparedTask, TaskConfig};

#[derive(Parser)]
#[command(
    name = "perfect",
    version,
    about = "Pattern-free few-shot fine-tuning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one run, saving its checkpoint.
    Train(TrainArgs),
    /// Run a method over every (data seed, train seed) pair.
    Experiment(ExperimentArgs),
    /// Sweep one factor around a base method.
    Ablate(AblateArgs),
    /// Report parameter share, forward passes and step cost.
    Bench(BenchArgs),
    /// Write a synthetic corpus.
    GenSynth(GenSynthArgs),
}

#[derive(Args)]
struct TaskArgs {
    /// TOML task configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic task when no config is given.
    #[arg(long, default_value = "keyword_sentiment")]
    task: String,
    /// Override the training step budget.
    #[arg(long)]
    steps: Option<usize>,
    /// Override examples per class in train and validation.
    #[arg(long)]
    n_per_class: Option<usize>,
    /// Override the backbone pretraining steps (0 keeps it random).
    #[arg(long)]
    pretrain_steps: Option<usize>,
    /// Output directory (default: $PERFECT_OUTPUT_DIR, else results/).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TaskArgs {
    fn prepare(&self) -> anyhow::Result<PreparedTask> {
        let mut cfg = match &self.config {
            Some(p) => TaskConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TaskConfig::synthetic(SynthTask::parse(&self.task)?),
        };
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(n) = self.n_per_class {
            cfg.n_per_class = n;
        }
        if let Some(s) = self.pretrain_steps {
            cfg.pretrain.steps = s;
        }
        if cfg.cache_dir.is_none() && std::env::var_os(CACHE_ENV).is_none() {
            cfg.cache_dir = Some(self.out_dir().join("cache"));
        }
        let task = PreparedTask::new(cfg)?;
        if let Some(loss) = task.pretrain_loss {
            eprintln!("backbone ready (final MLM loss {loss:.3})");
        }
        Ok(task)
    }

    fn out_dir(&self) -> PathBuf {
        output_dir(self.out.as_deref())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value = "perfect")]
    method: String,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
}

#[derive(Args)]
struct SeedArgs {
    /// A count `N` (seeds 0..N) or a comma-separated list.
    #[arg(long, default_value = "5")]
    data_seeds: String,
    /// A count `N` (seeds 0..N) or a comma-separated list.
    #[arg(long, default_value = "4")]
    train_seeds: String,
}

impl SeedArgs {
    fn resolve(&self) -> anyhow::Result<(Vec<u64>, Vec<u64>)> {
        Ok((
            parse_seeds(&self.data_seeds)?,
            parse_seeds(&self.train_seeds)?,
        ))
    }
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let s = s.trim();
    if s.contains(',') {
        return s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u64>()
                    .with_context(|| format!("bad seed {p:?}"))
            })
            .collect();
    }
    let n: u64 = s.parse().with_context(|| format!("bad seed count {s:?}"))?;
    if n == 0 {
        bail!("seed count must be positive");
    }
    Ok((0..n).collect())
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    seeds: SeedArgs,
    #[arg(long, default_value = "perfect")]
    method: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    seeds: SeedArgs,
    /// masks, sigma, loss, inference or positions.
    #[arg(long)]
    sweep: String,
    /// Comma-separated values; defaults to the sweep's standard grid.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long, default_value = "perfect")]
    method: String,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// Methods to report, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "perfect,pet")]
    method: Vec<String>,
    /// Training steps to time.
    #[arg(long, default_value_t = 5)]
    time_steps: usize,
    /// Test queries to count passes over.
    #[arg(long, default_value_t = 10)]
    queries: usize,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination `.jsonl` or `.tsv` (default: <out>/<task>.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn report(meta: &RunMetadata) {
    let r = &meta.record;
    match (&meta.error, r.accuracy) {
        (Some(e), _) => eprintln!(
            "{} d{} t{}: failed: {e}",
            r.method, r.data_seed, r.train_seed
        ),
        (None, Some(acc)) => eprintln!(
            "{} M={} sigma={:e} d{} t{}: accuracy {acc:.4} (step {})",
            r.method,
            r.mask_count,
            r.sigma,
            r.data_seed,
            r.train_seed,
            r.selected_step.unwrap_or(0)
        ),
        (None, None) => {}
    }
}

fn print_summaries(summaries: &[experiment::GroupSummary]) {
    println!("method\tpolicy\tM\tsigma\truns\tmean\tworst\tstd");
    for s in summaries {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.4}", x));
        println!(
            "{}\t{}\t{}\t{:e}\t{}/{}\t{}\t{}\t{}",
            s.method,
            s.policy,
            s.mask_count,
            s.sigma,
            s.completed,
            s.runs,
            f(s.mean),
            f(s.worst),
            f(s.std)
        );
    }
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let task = args.task.prepare()?;
    let method = Method::preset(&args.method)?;
    let episode = sample_episode(
        &task.corpus,
        task.test.as_ref(),
        task.config.n_per_class,
        args.data_seed,
    )?;
    let setup = experiment::run_setup(&task, &method, args.train_seed)?;
    let enc = perfect::harness::episode::InputEncoding {
        vocab: &task.vocab,
        classes: &episode.classes,
        policy: perfect::masking::MaskPolicy::new(setup.layout, setup.mask_count)?,
        max_seq: setup.model_config.encoder.max_seq - setup.model_config.prompt_tokens,
        pattern: method.kind().uses_pattern(),
    };
    let train = enc.encode_all(&episode.train)?;
    let val = enc.encode_all(&episode.val)?;
    let test = enc.encode_all(&episode.test)?;
    let model = experiment::init_model(&task, &method, &setup, args.train_seed)?;
    let outcome = perfect::trainer::train(model, &train, &val, &setup.policy, &setup.train_config)?;
    let pred = perfect::trainer::predict(
        &outcome.model,
        &test,
        setup.train_config.inference,
        outcome.prototypes.as_ref(),
        setup.train_config.length_normalize,
    )?;
    let acc = perfect::trainer::accuracy(&pred, &test);
    let dir = args.task.out_dir();
    std::fs::create_dir_all(&dir)?;
    let meta = serde_json::json!({
        "method": method.name,
        "policy": setup.policy,
        "data_seed": args.data_seed,
        "train_seed": args.train_seed,
        "selected_step": outcome.selected_step,
        "steps_run": outcome.steps_run,
        "history": outcome.history,
        "test_accuracy": acc,
        "trainable_params": outcome.model.params().trainable_count(),
    });
    let ckpt = dir.join("checkpoint.bin");
    checkpoint::save(&ckpt, &outcome.model, outcome.prototypes.as_ref(), &meta)?;
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&meta)?)?;
    println!(
        "{}: test accuracy {acc:.4}, selected step {}, checkpoint {}",
        method.name,
        outcome.selected_step,
        ckpt.display()
    );
    Ok(())
}

fn experiment_cmd(args: &ExperimentArgs) -> anyhow::Result<()> {
    let task = args.task.prepare()?;
    let method = Method::preset(&args.method)?;
    let (ds, ts) = args.seeds.resolve()?;
    let metrics = experiment::run_experiment(&task, &method, &ds, &ts, report)?;
    let dir = args.task.out_dir();
    let summaries = write_results(&dir, &metrics.runs)?;
    print_summaries(&summaries);
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let task = args.task.prepare()?;
    let sweep = Sweep::parse(&args.sweep)?;
    let values = if args.values.is_empty() {
        sweep.default_values()
    } else {
        args.values.clone()
    };
    let base = Method::preset(&args.method)?;
    let (ds, ts) = args.seeds.resolve()?;
    let all = run_ablation(&task, sweep, &values, &base, &ds, &ts, report)?;
    let runs: Vec<RunMetadata> = all.into_iter().flat_map(|m| m.runs).collect();
    let dir = args.task.out_dir();
    let summaries = write_results(&dir, &runs)?;
    print_summaries(&summaries);
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn bench(args: &BenchArgs) -> anyhow::Result<()> {
    let task = args.task.prepare()?;
    let mut reports = Vec::new();
    for name in &args.method {
        let m = Method::preset(name)?;
        reports.push(efficiency_report(&task, &m, args.time_steps, args.queries)?);
    }
    println!("method\ttrainable\ttotal\tpercent\treference\treference%\tpasses/query\tstep_s\tparams\tpeak_activations");
    for r in &reports {
        println!(
            "{}\t{}\t{}\t{:.3}\t{}\t{:.4}\t{:.2}\t{:.4}\t{}\t{}",
            r.method,
            r.trainable_params,
            r.total_params,
            r.percent_trained,
            r.reference_trainable_params,
            r.reference_percent_trained,
            r.forward_passes_per_query,
            r.mean_step_seconds,
            r.parameter_elements,
            r.peak_activation_elements
        );
    }
    let dir = args.task.out_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("efficiency.json"),
        serde_json::to_string_pretty(&reports)?,
    )?;
    Ok(())
}

fn gen_synth(args: &GenSynthArgs) -> anyhow::Result<()> {
    let task = SynthTask::parse(&args.task)?;
    let corpus = synth::generate(task, args.n, args.seed);
    let path = match &args.out {
        Some(p) => p.clone(),
        None => {
            let dir = output_dir(None);
            std::fs::create_dir_all(&dir)?;
            dir.join(format!("{task}.jsonl"))
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    corpus.save(&path)?;
    write_verbalizers(task, &path)?;
    println!("{} examples -> {}", corpus.len(), path.display());
    Ok(())
}

/// Writes the task's single-token verbalizer map next to the corpus.
fn write_verbalizers(task: SynthTask, corpus_path: &Path) -> anyhow::Result<()> {
    let map: std::collections::BTreeMap<String, Vec<String>> =
        task.verbalizer_words().into_iter().collect();
    let path = corpus_path.with_extension("verbalizers.json");
    std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench(a),
        Command::GenSynth(a) => gen_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
