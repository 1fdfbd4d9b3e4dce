use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use perfect::checkpoint;
use perfect::harness::config::CACHE_ENV;
use perfect::harness::experiment::{read_aggregates, read_csv, OUTPUT_ENV};

fn perfect(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_perfect"));
    cmd.args(args).env_remove(OUTPUT_ENV).env_remove(CACHE_ENV);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: [&str; 6] = [
    "--pretrain-steps",
    "0",
    "--steps",
    "20",
    "--n-per-class",
    "4",
];

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&perfect(
        &[
            "gen-synth",
            "--task",
            "parity",
            "--n",
            "50",
            "--seed",
            "3",
            "--out",
            s(&a),
        ],
        &[],
    ));
    ok(&perfect(
        &[
            "gen-synth",
            "--task",
            "parity",
            "--n",
            "50",
            "--seed",
            "3",
            "--out",
            s(&b),
        ],
        &[],
    ));
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 50);
    assert!(dir.path().join("a.verbalizers.json").exists());

    // Without --out the file lands under the output root.
    ok(&perfect(
        &["gen-synth", "--task", "topic3", "--n", "10"],
        &[(OUTPUT_ENV, dir.path())],
    ));
    assert!(dir.path().join("topic3.jsonl").exists());
}

#[test]
fn experiment_writes_rows_aggregates_and_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "experiment",
        "--data-seeds",
        "2",
        "--train-seeds",
        "0,7",
        "--out",
        s(dir.path()),
    ];
    args.extend(QUICK);
    ok(&perfect(&args, &[]));
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "method,data_seed,train_seed,policy,M,sigma,accuracy,selected_step,trainable_params"
    );
    let rows = read_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    let pairs: Vec<(u64, u64)> = rows.iter().map(|r| (r.data_seed, r.train_seed)).collect();
    assert_eq!(pairs, [(0, 0), (0, 7), (1, 0), (1, 7)]);
    let agg = read_aggregates(&dir.path().join("aggregates.json")).unwrap();
    assert_eq!(agg.len(), 1);
    assert_eq!(agg[0].runs, 4);
    assert_eq!(agg[0].std_divisor, "n-1");
    assert_eq!(fs::read_dir(dir.path().join("runs")).unwrap().count(), 4);
}

#[test]
fn train_saves_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--method", "perfect", "--out", s(dir.path())];
    args.extend(QUICK);
    ok(&perfect(&args, &[]));
    let ckpt = checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    assert!(ckpt.prototypes.is_some());
    assert_eq!(ckpt.metadata["method"], "perfect");
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert!(run["test_accuracy"].as_f64().is_some());
}

#[test]
fn bench_reports_one_pass_for_prototypes() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "bench",
        "--method",
        "perfect,pet",
        "--time-steps",
        "2",
        "--queries",
        "3",
        "--pretrain-steps",
        "0",
        "--out",
        s(dir.path()),
    ];
    ok(&perfect(&args, &[]));
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("efficiency.json")).unwrap())
            .unwrap();
    let passes = |i: usize| reports[i]["forward_passes_per_query"].as_f64().unwrap();
    assert_eq!(passes(0), 1.0);
    assert!(passes(1) >= 2.0);
}

#[test]
fn config_file_with_a_file_corpus() {
    let dir = tempfile::tempdir().unwrap();
    ok(&perfect(
        &[
            "gen-synth",
            "--task",
            "keyword_sentiment",
            "--n",
            "80",
            "--out",
            s(&dir.path().join("data.jsonl")),
        ],
        &[],
    ));
    fs::write(
        dir.path().join("task.toml"),
        "name = \"file_task\"\ntrain_path = \"data.jsonl\"\nverbalizers_path = \"data.verbalizers.json\"\n\
         n_per_class = 4\n\n[pretrain]\nsteps = 3\nbatch_size = 4\n\n[train]\nsteps = 10\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let cache = dir.path().join("cache");
    let cfg = dir.path().join("task.toml");
    ok(&perfect(
        &["train", "--config", s(&cfg), "--out", s(&out)],
        &[(CACHE_ENV, &cache)],
    ));
    let cached: Vec<_> = fs::read_dir(&cache)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(cached.len(), 1);
    assert!(cached[0].to_str().unwrap().starts_with("backbone-"));
    // A second run reuses the stored backbone.
    ok(&perfect(
        &["train", "--config", s(&cfg), "--out", s(&out)],
        &[(CACHE_ENV, &cache)],
    ));
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
}

#[test]
fn bad_input_exits_nonzero() {
    let bad = [
        vec!["experiment", "--no-such-flag"],
        vec!["frobnicate"],
        vec![
            "ablate",
            "--sweep",
            "depth",
            "--pretrain-steps",
            "0",
            "--out",
            "/nonexistent/x",
        ],
        vec![
            "train",
            "--method",
            "nonsense",
            "--pretrain-steps",
            "0",
            "--out",
            "/nonexistent/x",
        ],
        vec!["gen-synth", "--task", "chess"],
    ];
    for args in bad {
        let out = perfect(&args, &[]);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }
}
