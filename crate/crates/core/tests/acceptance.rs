//! Acceptance criteria 1 to 10, one PASS/FAIL line each. Runs without the
//! libtest harness so every line prints; exits nonzero if any fails.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use perfect::baselines::{pet_autoregressive_decode, pet_multitoken_train_loss};
use perfect::encoder::{self, AdapterConfig, AdapterPlacement, EncoderConfig};
use perfect::harness::config::{PreparedTask, TaskConfig, CACHE_ENV};
use perfect::harness::efficiency::ROBERTA_LARGE_PARAMS;
use perfect::harness::experiment::{
    aggregate, read_aggregates, read_csv, run_experiment, summarize, write_results, GroupSummary,
    Method, RunMetrics,
};
use perfect::harness::synth::SynthTask;
use perfect::head::{self, classify_prototypical, compute_prototypes, hinge_loss, SIGMA_GRID};
use perfect::masking::MaskedExample;
use perfect::model::{HeadKind, ModelConfig};
use perfect::params::ParamStore;
use perfect::tensor::{finite_difference_check, Graph, Rng, Tensor};
use perfect::trainer::{
    batch_loss, count_trainable_params, freeze_mask, train_step, PolicyKind, TrainConfig,
    TrainPolicy,
};

use common::*;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($msg)+)),
        }
    };
}

fn lib<T>(r: perfect::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn c1_parameter_accounting() -> Check {
    let cfg = ModelConfig {
        encoder: EncoderConfig::roberta_large_shape(),
        num_classes: 2,
        mask_count: 2,
        head: HeadKind::LabelEmbedding,
        prompt_tokens: 0,
        label_sigma: head::DEFAULT_SIGMA,
        verbalizers: None,
    };
    let count = lib(count_trainable_params(&cfg, PolicyKind::Perfect))?;
    let (h, l, b) = (1024, 24, 64);
    let adapters = l * (h * b + b + b * h + h);
    let norms = (2 * l + 1) * 2 * h;
    let labels = 2 * 2 * h;
    let expected = adapters + norms + labels;
    ensure!(
        count.trainable == expected,
        "trainable {} vs hand count {expected}",
        count.trainable
    );
    let millions = count.trainable as f64 / 1e6;
    ensure!(
        (millions - 3.28).abs() <= 0.02 * 3.28,
        "{millions:.4}M outside 3.28M ±2%"
    );
    let share = 100.0 * count.trainable as f64 / ROBERTA_LARGE_PARAMS;
    ensure!(
        (share - 0.92).abs() <= 0.1,
        "{share:.4}% outside 0.92 ±0.1 pp"
    );
    Ok(format!(
        "{millions:.4}M trainable, {share:.3}% of 355.41M ({:.3}% of the {:.2}M counted here)",
        count.percent(),
        count.total as f64 / 1e6
    ))
}

fn c2_gradient_check() -> Check {
    let mut rng = Rng::new(2);
    let mut model = perfect_model(3, 2, 8, 2, 0.1, 5);
    // Nonzero up-projections so the down-projections receive gradient.
    for (name, p) in model.params_mut().iter_mut() {
        if name.contains("adapter.up") {
            let shape = p.tensor.shape().to_vec();
            p.tensor = Tensor::randn(&shape, 0.1, &mut rng);
        }
    }
    let names: Vec<String> = lib(freeze_mask(&mut model, PolicyKind::Perfect))?
        .into_iter()
        .collect();
    let batch: Vec<MaskedExample> = (0..3).map(|b| random_example(2, b % 3, &mut rng)).collect();
    let tensors: Vec<Tensor> = names
        .iter()
        .map(|n| model.params().tensor(n).cloned())
        .collect::<perfect::Result<_>>()
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig::default();
    let report = lib(finite_difference_check(
        |g, vars| {
            let mut bound = model.params().bind_frozen(g);
            for (n, &v) in names.iter().zip(vars) {
                bound.replace(n, v)?;
            }
            batch_loss(g, &model, &bound, &batch, &cfg)
        },
        &tensors,
        1e-5,
        1e-4,
        1e-6,
    ))?;
    let entries: usize = tensors.iter().map(Tensor::numel).sum();
    ensure!(
        report.passed(),
        "flagged entries in {:?}",
        report
            .tensors
            .iter()
            .filter(|t| !t.flagged.is_empty())
            .map(|t| &names[t.index])
            .collect::<Vec<_>>()
    );
    Ok(format!(
        "{} tensors, {entries} entries, max rel error {:.2e}",
        names.len(),
        report.max_rel_error()
    ))
}

fn c3_freeze_contract() -> Check {
    let mut rng = Rng::new(3);
    let mut model = perfect_model(2, 2, 8, 2, 1e-2, 9);
    let init = model.params().clone();
    let set = lib(freeze_mask(&mut model, PolicyKind::Perfect))?;
    let expected: BTreeSet<String> = init
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| {
            n.contains("_adapter.")
                || n.ends_with("norm.gain")
                || n.ends_with("norm.bias")
                || n == "label_embedding"
        })
        .collect();
    ensure!(
        set == expected,
        "trainable set {set:?} differs from {expected:?}"
    );
    let policy = TrainPolicy::new(PolicyKind::Perfect);
    let cfg = TrainConfig::default();
    let mut opt = cfg.optimizer();
    let batch: Vec<MaskedExample> = (0..4).map(|b| random_example(2, b % 2, &mut rng)).collect();
    for step in 0..200 {
        lib(train_step(
            &mut model, &mut opt, &policy, &cfg, &batch, step,
        ))?;
    }
    let mut frozen = 0;
    let mut moved = 0;
    for (name, before) in init.iter() {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let same = bits(&before.tensor) == bits(lib(model.params().tensor(name))?);
        if set.contains(name) {
            moved += usize::from(!same);
        } else {
            ensure!(same, "frozen tensor {name} changed");
            frozen += 1;
        }
    }
    ensure!(
        moved == set.len(),
        "only {moved} of {} trainable tensors moved",
        set.len()
    );
    Ok(format!(
        "200 steps: {frozen} frozen tensors bit-identical, {moved} trainable tensors (adapters, layer norms, label embedding) updated"
    ))
}

fn c4_inference_oracle() -> Check {
    let mut rng = Rng::new(4);
    let mut agree = 0;
    let mut worst: f64 = 0.0;
    for t in 0..100u64 {
        let k = 2 + rng.below(4);
        let m = 1 + rng.below(3);
        let h = [4, 6, 8][rng.below(3)];
        let model = perfect_model(k, m, h, 1, head::DEFAULT_SIGMA, t);
        let mut train = Vec::new();
        for y in 0..k {
            for _ in 0..1 + rng.below(3) {
                train.push(random_example(m, y, &mut rng));
            }
        }
        let bank = lib(compute_prototypes(&model, &train))?;
        let oracle = prototype_oracle(&model, &train, k);
        for (i, slot) in oracle.iter().enumerate() {
            for (y, c) in slot.iter().enumerate() {
                worst = worst.max(max_abs_diff(bank.centroid(i, y), c));
            }
        }
        let query = random_example(m, 0, &mut rng);
        let got = lib(classify_prototypical(&query, &model, &bank))?;
        agree += usize::from(got == exp_rule_oracle(&slot_states(&model, &query), &oracle));
    }
    ensure!(agree == 100, "decision rule agreed on {agree}/100");
    ensure!(worst <= 1e-12, "prototype error {worst:.2e}");
    Ok(format!(
        "100/100 decisions agree, max prototype error {worst:.1e}"
    ))
}

fn c5_loss_oracles() -> Check {
    let mut rng = Rng::new(5);
    let mut err = [0.0f64; 4];
    for t in 0..100u64 {
        let k = 2 + rng.below(4);
        let margin = 0.5 + 1.5 * rng.uniform();
        let s = random_scores(1, k, &mut rng).remove(0);
        let y = rng.below(k);
        err[0] = err[0].max((hinge_loss(&s, y, margin) - hinge_oracle(&s, y, margin)).abs());

        let b = 1 + rng.below(4);
        let m = 1 + rng.below(3);
        let blocks: Vec<Vec<Vec<f64>>> = (0..b).map(|_| random_scores(m, k, &mut rng)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
        let mut g = Graph::new();
        let vars: Vec<_> = blocks.iter().map(|bl| g.constant(to_tensor(bl))).collect();
        let hinge = lib(head::total_loss(&mut g, &vars, &labels, margin))?;
        let ce = lib(head::cross_entropy_total_loss(&mut g, &vars, &labels))?;
        err[1] = err[1]
            .max((g.value(hinge).data()[0] - total_loss_oracle(&blocks, &labels, margin)).abs());
        err[2] = err[2].max((g.value(ce).data()[0] - cross_entropy_oracle(&blocks, &labels)).abs());

        let lengths: Vec<usize> = (0..k.min(4)).map(|_| 1 + rng.below(3)).collect();
        let map = random_verbalizers(&lengths, &mut rng);
        let model = verbalizer_model(map.clone(), t);
        let ex = random_example(map.max_len(), rng.below(lengths.len()), &mut rng);
        let mut g = Graph::new();
        let bound = model.params().bind_frozen(&mut g);
        let loss = lib(pet_multitoken_train_loss(
            &mut g, &model, &bound, &ex, &map, margin,
        ))?;
        err[3] = err[3]
            .max((g.value(loss).data()[0] - pet_loss_oracle(&model, &ex, &map, margin)).abs());
    }
    let names = [
        "hinge_loss",
        "total_loss",
        "cross_entropy_total_loss",
        "pet_multitoken_train_loss",
    ];
    for (n, e) in names.iter().zip(err) {
        ensure!(e <= 1e-10, "{n} off by {e:.2e}");
    }
    Ok(format!(
        "max errors over 100 instances: hinge {:.1e}, total {:.1e}, ce {:.1e}, pet {:.1e}",
        err[0], err[1], err[2], err[3]
    ))
}

fn c6_forward_passes() -> Check {
    let mut rng = Rng::new(6);
    let map = random_verbalizers(&[1, 3], &mut rng);
    let model = verbalizer_model(map.clone(), 0);
    let ex = random_example(3, 0, &mut rng);
    model.reset_forward_passes();
    let decoded = lib(pet_autoregressive_decode(&model, &ex, &map, false))?;
    ensure!(
        decoded.forward_passes == 4 && model.forward_passes() == 4,
        "lengths (1,3) took {} passes",
        model.forward_passes()
    );

    let pm = perfect_model(2, 2, 8, 2, head::DEFAULT_SIGMA, 0);
    let train: Vec<MaskedExample> = (0..4).map(|b| random_example(2, b % 2, &mut rng)).collect();
    let bank = lib(compute_prototypes(&pm, &train))?;
    let query = random_example(2, 0, &mut rng);
    pm.reset_forward_passes();
    lib(classify_prototypical(&query, &pm, &bank))?;
    ensure!(
        pm.forward_passes() == 1,
        "prototype inference took {} passes",
        pm.forward_passes()
    );

    for t in 0..30u64 {
        let lengths: Vec<usize> = (0..2 + rng.below(4)).map(|_| 1 + rng.below(4)).collect();
        let map = random_verbalizers(&lengths, &mut rng);
        let model = verbalizer_model(map.clone(), t);
        let ex = random_example(map.max_len(), 0, &mut rng);
        model.reset_forward_passes();
        let d = lib(pet_autoregressive_decode(&model, &ex, &map, t % 2 == 0))?;
        let sum: usize = lengths.iter().sum();
        ensure!(
            d.forward_passes == sum && model.forward_passes() == sum,
            "lengths {lengths:?} took {} passes",
            d.forward_passes
        );
    }
    Ok("lengths (1,3): 4 passes; prototype inference: 1 pass; 30 random maps: passes == sum of lengths".into())
}

fn task(kind: SynthTask, cache: &Path) -> Result<PreparedTask, String> {
    let mut cfg = TaskConfig::synthetic(kind);
    cfg.cache_dir = Some(cache.to_path_buf());
    lib(PreparedTask::new(cfg))
}

fn protocol(task: &PreparedTask, method: &str) -> Result<RunMetrics, String> {
    let data: Vec<u64> = (0..5).collect();
    let train: Vec<u64> = (0..4).collect();
    lib(run_experiment(
        task,
        &lib(Method::preset(method))?,
        &data,
        &train,
        |_| {},
    ))
}

fn completed(
    metrics: &RunMetrics,
    label: &str,
) -> Result<perfect::harness::experiment::Aggregate, String> {
    if let Some(f) = metrics.failures().first() {
        return Err(format!("{label} run failed: {:?}", f.error));
    }
    lib(aggregate(&metrics.accuracies()))
}

fn c7_learnability(cache: &Path, keep: &mut Option<RunMetrics>) -> Check {
    let start = Instant::now();
    let keyword = task(SynthTask::KeywordSentiment, cache)?;
    ensure!(
        keyword.config.n_per_class == 16 && keyword.classes.len() == 2,
        "keyword task is not N=16, K=2"
    );
    let perfect = protocol(&keyword, "perfect")?;
    let p = completed(&perfect, "perfect")?;
    let untrained = protocol(&keyword, "untrained")?;
    let u = completed(&untrained, "untrained")?;
    *keep = Some(perfect);
    let topic = task(SynthTask::Topic(3), cache)?;
    let t = completed(&protocol(&topic, "perfect")?, "topic3")?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "keyword perfect mean {:.3} worst {:.3}, untrained mean {:.3}, topic3 mean {:.3}, {secs:.0}s with pretraining",
        p.mean, p.worst, u.mean, t.mean
    );
    ensure!(
        p.n == 20 && u.n == 20 && t.n == 20,
        "expected 20 runs each: {detail}"
    );
    ensure!(
        p.mean >= 0.95 && p.worst >= 0.85,
        "perfect too weak: {detail}"
    );
    ensure!(
        (u.mean - 0.5).abs() <= 0.1,
        "untrained not at chance: {detail}"
    );
    ensure!(t.mean >= 1.0 / 3.0 + 0.4, "topic3 too weak: {detail}");
    ensure!(secs < 600.0, "too slow: {detail}");
    Ok(detail)
}

fn ablate(cache: &Path, out: &Path, extra: &[&str]) -> Result<Vec<GroupSummary>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_perfect"))
        .arg("ablate")
        .args(extra)
        .args(["--data-seeds", "2", "--train-seeds", "1", "--out"])
        .arg(out)
        .env(CACHE_ENV, cache)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        status.status.success(),
        "ablate {extra:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
    lib(read_aggregates(&out.join("aggregates.json")))
}

fn triples(groups: &[GroupSummary]) -> bool {
    groups
        .iter()
        .all(|g| g.complete && g.mean.is_some() && g.worst.is_some() && g.std.is_some())
}

fn c8_ablations(cache: &Path) -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let masks = ablate(
        cache,
        &root.path().join("masks"),
        &["--sweep", "masks", "--values", "1,2,5,10"],
    )?;
    let ms: Vec<usize> = masks.iter().map(|g| g.mask_count).collect();
    ensure!(
        ms == [1, 2, 5, 10] && triples(&masks),
        "mask sweep gave {ms:?}"
    );

    let sigma = ablate(cache, &root.path().join("sigma"), &["--sweep", "sigma"])?;
    let mut got: Vec<f64> = sigma.iter().map(|g| g.sigma).collect();
    got.sort_by(|a, b| b.total_cmp(a));
    ensure!(
        got == SIGMA_GRID && triples(&sigma),
        "sigma sweep gave {got:?}"
    );

    let loss = ablate(cache, &root.path().join("loss"), &["--sweep", "loss"])?;
    let names: BTreeSet<&str> = loss.iter().map(|g| g.method.as_str()).collect();
    ensure!(
        names == BTreeSet::from(["perfect", "perfect_ce"]) && triples(&loss),
        "loss ablation gave {names:?}"
    );

    let inference = ablate(
        cache,
        &root.path().join("inference"),
        &["--sweep", "inference"],
    )?;
    let names: BTreeSet<&str> = inference.iter().map(|g| g.method.as_str()).collect();
    ensure!(
        names == BTreeSet::from(["perfect", "perfect_label_emb", "perfect_objective"])
            && triples(&inference),
        "inference ablation gave {names:?}"
    );
    let show = |gs: &[GroupSummary]| {
        gs.iter()
            .map(|g| {
                format!(
                    "{}/M{}/{:e}={:.2}",
                    g.method,
                    g.mask_count,
                    g.sigma,
                    g.mean.unwrap_or(f64::NAN)
                )
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok(format!(
        "masks [{}]; sigma [{}]; loss [{}]; inference [{}]",
        show(&masks),
        show(&sigma),
        show(&loss),
        show(&inference)
    ))
}

fn c9_protocol(cache: &Path, kept: Option<RunMetrics>) -> Check {
    let a = lib(aggregate(&[0.8, 0.9, 1.0]))?;
    ensure!(
        (a.mean - 0.9).abs() < 1e-15 && a.worst == 0.8 && (a.std - 0.1).abs() < 1e-15,
        "aggregate gave {a:?}"
    );
    let metrics = match kept {
        Some(m) => m,
        None => protocol(&task(SynthTask::KeywordSentiment, cache)?, "perfect")?,
    };
    let pairs: BTreeSet<(u64, u64)> = metrics
        .records()
        .iter()
        .map(|r| (r.data_seed, r.train_seed))
        .collect();
    ensure!(
        metrics.runs.len() == 20 && pairs.len() == 20,
        "{} runs",
        metrics.runs.len()
    );
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    lib(write_results(dir.path(), &metrics.runs))?;
    let rows = lib(read_csv(&dir.path().join("results.csv")))?;
    ensure!(rows.len() == 20, "csv has {} rows", rows.len());
    let again = lib(summarize(&rows))?;
    let stored = lib(read_aggregates(&dir.path().join("aggregates.json")))?;
    let bits = |g: &GroupSummary| [g.mean, g.worst, g.std].map(|v| v.map(f64::to_bits));
    ensure!(
        again == stored && again.iter().zip(&stored).all(|(a, b)| bits(a) == bits(b)),
        "re-aggregated {again:?} vs stored {stored:?}"
    );
    Ok(format!(
        "20 rows, 20 distinct seed pairs, aggregate(0.8,0.9,1.0) = ({}, {}, {:.17}), csv re-aggregation bit-exact",
        a.mean, a.worst, a.std
    ))
}

fn c10_adapter_identity() -> Check {
    let mut rng = Rng::new(10);
    for t in 0..50u64 {
        let placement = if t % 2 == 0 {
            AdapterPlacement::AfterFfnOnly
        } else {
            AdapterPlacement::AfterAttnAndFfn
        };
        let with = EncoderConfig {
            adapter: Some(AdapterConfig::new(1 + rng.below(4))),
            adapter_placement: placement,
            ..encoder(8, 2, None)
        };
        let without = EncoderConfig {
            adapter: None,
            ..with.clone()
        };
        let full = lib(ParamStore::from_specs_seeded(&with.param_specs(), |_| t))?;
        let mut plain = ParamStore::new();
        for spec in without.param_specs() {
            lib(plain.insert(&spec.name, lib(full.tensor(&spec.name))?.clone(), spec.role))?;
        }
        let len = 1 + rng.below(16);
        let ids: Vec<usize> = (0..len).map(|_| rng.below(VOCAB)).collect();
        let segs: Vec<usize> = (0..len).map(|_| rng.below(2)).collect();
        let run = |cfg: &EncoderConfig, store: &ParamStore| -> perfect::Result<Vec<u64>> {
            let mut g = Graph::new();
            let bound = store.bind_frozen(&mut g);
            let enc = encoder::encode(&mut g, &bound, cfg, &ids, Some(&segs), None)?;
            Ok(g.value(enc.hidden)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect())
        };
        ensure!(
            lib(run(&with, &full))? == lib(run(&without, &plain))?,
            "input {t} differs with adapters"
        );
    }
    Ok("50 random inputs, both placements: outputs bit-identical".into())
}

fn main() {
    let cache = tempfile::tempdir().expect("temp dir");
    let mut kept = None;
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Check| match r {
        Ok(d) => println!("criterion {n:>2} {name}: PASS ({d})"),
        Err(e) => {
            failed += 1;
            println!("criterion {n:>2} {name}: FAIL ({e})");
        }
    };
    report(1, "parameter accounting", c1_parameter_accounting());
    report(2, "gradient soundness", c2_gradient_check());
    report(3, "freeze contract", c3_freeze_contract());
    report(4, "inference oracle equivalence", c4_inference_oracle());
    report(5, "loss oracles", c5_loss_oracles());
    report(6, "forward-pass contrast", c6_forward_passes());
    report(7, "learnability", c7_learnability(cache.path(), &mut kept));
    report(8, "ablation machinery", c8_ablations(cache.path()));
    report(
        9,
        "protocol and aggregation",
        c9_protocol(cache.path(), kept.take()),
    );
    report(10, "adapter identity", c10_adapter_identity());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
