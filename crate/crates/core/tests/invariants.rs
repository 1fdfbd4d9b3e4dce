mod common;

use perfect::harness::config::{PreparedTask, TaskConfig};
use perfect::harness::experiment::{
    aggregate, read_csv, run_experiment, summarize, write_csv, Method, RunRecord,
};
use perfect::harness::synth::SynthTask;
use perfect::head::{self, nearest_prototype, prototypes_from_embeddings};
use perfect::masking::{insert_masks, MaskLayout, MaskPolicy, CLS, MASK, SEP};
use perfect::tensor::{Graph, Tensor};
use proptest::prelude::*;

use common::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-4.0..4.0f64, cols), rows)
}

fn blocks() -> impl Strategy<Value = (Vec<Vec<Vec<f64>>>, Vec<usize>)> {
    (1usize..4, 1usize..4, 2usize..5).prop_flat_map(|(b, m, k)| {
        (
            prop::collection::vec(matrix(m, k), b),
            prop::collection::vec(0..k, b),
        )
    })
}

fn hinge_value(blocks: &[Vec<Vec<f64>>], labels: &[usize], margin: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<_> = blocks.iter().map(|b| g.constant(to_tensor(b))).collect();
    let v = head::total_loss(&mut g, &vars, labels, margin).unwrap();
    g.value(v).data()[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hinge_is_zero_exactly_when_every_margin_holds((blocks, labels) in blocks(), margin in 0.1..2.0f64) {
        let loss = hinge_value(&blocks, &labels, margin);
        let satisfied = blocks.iter().zip(&labels).all(|(b, &y)| {
            b.iter().all(|row| row.iter().enumerate().all(|(k, &s)| k == y || row[y] >= s + margin))
        });
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, satisfied);
    }

    #[test]
    fn hinge_is_bounded_by_margin_plus_spread(row in prop::collection::vec(-4.0..4.0f64, 2..6), margin in 0.1..2.0f64, pick in 0usize..6) {
        let k = row.len();
        let y = pick % k;
        let spread = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
        let loss = head::hinge_loss(&row, y, margin);
        prop_assert!(loss >= 0.0);
        prop_assert!(loss <= (k - 1) as f64 * (margin + spread) / k as f64 + 1e-12);
    }

    #[test]
    fn cross_entropy_is_non_negative((blocks, labels) in blocks()) {
        let mut g = Graph::new();
        let vars: Vec<_> = blocks.iter().map(|b| g.constant(to_tensor(b))).collect();
        let v = head::cross_entropy_total_loss(&mut g, &vars, &labels).unwrap();
        prop_assert!(g.value(v).data()[0] >= 0.0);
    }

    #[test]
    fn label_gradient_vanishes_only_when_margins_hold(
        h in matrix(2, 3),
        l in prop::collection::vec(-2.0..2.0f64, 12),
        y in 0usize..2,
    ) {
        let mut g = Graph::new();
        let hv = g.constant(to_tensor(&h));
        let lv = g.param(Tensor::new(vec![2, 2, 3], l).unwrap());
        let t = head::score_tokens(&mut g, hv, lv).unwrap();
        let scores: Vec<Vec<f64>> = (0..2).map(|i| g.value(t).row(i).to_vec()).collect();
        let loss = head::total_loss(&mut g, &[t], &[y], 1.0).unwrap();
        g.backward(loss).unwrap();
        let grad_norm: f64 = g.grad(lv).map_or(0.0, |gr| gr.iter().map(|x| x.abs()).sum());
        let violated = scores.iter().any(|row| 1.0 - row[y] + row[1 - y] > 0.0);
        let h_zero = h.iter().any(|row| row.iter().all(|&v| v == 0.0));
        prop_assume!(!h_zero);
        prop_assert_eq!(grad_norm > 0.0, violated);
    }

    #[test]
    fn prototypes_of_a_union_are_weighted_means(
        a in prop::collection::vec(matrix(2, 3), 2..6),
        b in prop::collection::vec(matrix(2, 3), 2..6),
    ) {
        // Each part holds both classes (alternating labels).
        let la: Vec<usize> = (0..a.len()).map(|i| i % 2).collect();
        let lb: Vec<usize> = (0..b.len()).map(|i| i % 2).collect();
        let ta: Vec<Tensor> = a.iter().map(|m| to_tensor(m)).collect();
        let tb: Vec<Tensor> = b.iter().map(|m| to_tensor(m)).collect();
        let pa = prototypes_from_embeddings(&ta, &la, 2).unwrap();
        let pb = prototypes_from_embeddings(&tb, &lb, 2).unwrap();
        let all: Vec<Tensor> = ta.iter().chain(&tb).cloned().collect();
        let labels: Vec<usize> = la.iter().chain(&lb).cloned().collect();
        let pu = prototypes_from_embeddings(&all, &labels, 2).unwrap();
        for i in 0..2 {
            for y in 0..2 {
                let (na, nb) = (pa.counts[y] as f64, pb.counts[y] as f64);
                for d in 0..3 {
                    let want = (na * pa.centroid(i, y)[d] + nb * pb.centroid(i, y)[d]) / (na + nb);
                    prop_assert!((pu.centroid(i, y)[d] - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn min_distance_rule_equals_exp_rule(
        q in matrix(2, 4),
        c in prop::collection::vec(matrix(3, 4), 2),
    ) {
        let counts = vec![1; 3];
        let flat: Vec<f64> = c.iter().flatten().flatten().cloned().collect();
        let bank = perfect::head::PrototypeBank::from_tensor(&Tensor::new(vec![2, 3, 4], flat).unwrap(), counts).unwrap();
        prop_assert_eq!(nearest_prototype(&to_tensor(&q), &bank).unwrap(), exp_rule_oracle(&q, &c));
    }

    #[test]
    fn aggregate_orders_and_ignores_permutation(mut v in prop::collection::vec(0.0..1.0f64, 1..20)) {
        let a = aggregate(&v).unwrap();
        let max = v.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(a.worst <= a.mean + 1e-15 && a.mean <= max + 1e-15);
        prop_assert!(a.std >= 0.0);
        prop_assert_eq!(a.n, v.len());
        if v.len() == 1 {
            prop_assert_eq!(a.std, 0.0);
        }
        v.reverse();
        let b = aggregate(&v).unwrap();
        prop_assert!((a.mean - b.mean).abs() <= 1e-12 && a.worst == b.worst && (a.std - b.std).abs() <= 1e-12);
    }

    #[test]
    fn masks_survive_layout_and_truncation(
        s1 in prop::collection::vec(5usize..50, 0..20),
        s2 in prop::collection::vec(5usize..50, 0..20),
        m in 1usize..6,
        max_seq in 10usize..40,
        layout in 0usize..5,
    ) {
        let layout = [MaskLayout::SingleSentenceSuffix, MaskLayout::PairBetween, MaskLayout::PairSuffix,
            MaskLayout::PairTwoSegmentPrefix, MaskLayout::PairTwoSegmentSuffix][layout];
        let sentences = if layout.is_pair() { vec![s1.clone(), s2.clone()] } else { vec![s1.clone()] };
        let ex = insert_masks(&sentences, MaskPolicy::new(layout, m).unwrap(), max_seq, 0).unwrap();
        let specials = ex.ids.iter().filter(|&&t| t == CLS || t == SEP).count();
        let given: usize = sentences.iter().map(Vec::len).sum();
        let budget = max_seq - specials - m;
        prop_assert_eq!(ex.mask_positions.len(), m);
        prop_assert!(ex.mask_positions.iter().all(|&p| ex.ids[p] == MASK));
        prop_assert_eq!(ex.ids.len(), ex.segments.len());
        prop_assert!(ex.ids.len() <= max_seq);
        prop_assert_eq!(ex.truncated, given.saturating_sub(budget));
        prop_assert_eq!(ex.ids.len(), given.min(budget) + specials + m);
        prop_assert_eq!(ex.ids[0], CLS);
        prop_assert_eq!(*ex.ids.last().unwrap(), SEP);
    }

    #[test]
    fn csv_reaggregation_is_bit_exact(acc in prop::collection::vec(prop::option::of(0.0..1.0f64), 1..12)) {
        let records: Vec<RunRecord> = acc.iter().enumerate().map(|(i, &a)| RunRecord {
            method: if i % 3 == 0 { "perfect".into() } else { "pet".into() },
            data_seed: i as u64,
            train_seed: 0,
            policy: "perfect".into(),
            mask_count: 2,
            sigma: 1e-4,
            accuracy: a,
            selected_step: a.map(|_| 50),
            trainable_params: 7,
        }).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        write_csv(&path, &records).unwrap();
        let back = read_csv(&path).unwrap();
        prop_assert_eq!(&back, &records);
        let a = summarize(&records).unwrap();
        let b = summarize(&back).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.mean.map(f64::to_bits), y.mean.map(f64::to_bits));
            prop_assert_eq!(x.std.map(f64::to_bits), y.std.map(f64::to_bits));
            prop_assert_eq!(x.worst.map(f64::to_bits), y.worst.map(f64::to_bits));
        }
    }
}

#[test]
fn run_count_is_the_seed_product() {
    let mut cfg = TaskConfig::synthetic(SynthTask::KeywordSentiment);
    cfg.pretrain.steps = 0;
    cfg.synthetic_train = 120;
    cfg.synthetic_test = 20;
    let task = PreparedTask::new(cfg).unwrap();
    let method = Method::preset("untrained").unwrap();
    for (nd, nt) in [(1, 1), (2, 3), (3, 2)] {
        let ds: Vec<u64> = (0..nd).collect();
        let ts: Vec<u64> = (10..10 + nt).collect();
        let m = run_experiment(&task, &method, &ds, &ts, |_| {}).unwrap();
        assert_eq!(m.runs.len() as u64, nd * nt);
        let pairs: std::collections::BTreeSet<_> = m
            .records()
            .iter()
            .map(|r| (r.data_seed, r.train_seed))
            .collect();
        assert_eq!(pairs.len() as u64, nd * nt);
        assert_eq!(m.summary.runs as u64, nd * nt);
    }
}
