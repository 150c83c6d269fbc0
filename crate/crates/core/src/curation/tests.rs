use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::checkpoint::ModelConfig;
use crate::encoder::tokenize;

#[test]
fn instructed_query_template() {
    let task = "Given a question, retrieve passages that answer the question";
    assert_eq!(
        format_instructed_query(task, "who wrote hamlet").unwrap(),
        "Instruct: Given a question, retrieve passages that answer the question Query: who wrote hamlet"
    );
    assert_eq!(format_instructed_query("T", "q").unwrap(), "Instruct: T Query: q");
    assert!(matches!(format_instructed_query("", "q"), Err(Error::Input(_))));
    assert!(matches!(format_instructed_query("T", ""), Err(Error::Input(_))));
}

#[test]
fn instruction_end_follows_query_marker() {
    for (task, q) in [("T", "q"), ("find the doc", "rust borrow checker"), ("a b", "c")] {
        let text = format_instructed_query(task, q).unwrap();
        let seq = tokenize(&text, 512).unwrap();
        // BOS occupies position 0, so byte offset b sits at position b + 1
        let marker_end = text.find(" Query: ").unwrap() + " Query: ".len();
        assert_eq!(seq.instruction_end, marker_end + 1, "{text}");
        assert_eq!(seq.ids[seq.instruction_end], q.as_bytes()[0] as usize);
    }
}

fn table(query: &str, positive: (&str, f64), docs: &[(&str, f64)]) -> ScoreTable {
    let mut t = ScoreTable::default();
    t.insert(query, positive.0, positive.1);
    for (d, s) in docs {
        t.insert(query, d, *s);
    }
    t
}

#[test]
fn mining_threshold_example() {
    let docs = [("a", 0.90), ("b", 0.77), ("c", 0.75), ("d", 0.50)];
    let t = table("q", ("p", 0.80), &docs);
    let corpus: Vec<String> = ["a", "b", "c", "d", "p"].iter().map(|s| s.to_string()).collect();
    let cfg = MiningConfig { top_k: 7, percentage_margin: 0.95 };
    let m = mine_hard_negatives("q", "p", &corpus, &t, &cfg).unwrap();
    assert!((m.threshold - 0.76).abs() < 1e-15);
    assert_eq!(m.negatives, ["c", "d"]);
    assert!(m.short);
}

#[test]
fn mining_margin_one_keeps_everything_below_positive() {
    let docs = [("a", 0.7), ("b", 0.2), ("c", 0.79)];
    let t = table("q", ("p", 0.8), &docs);
    let corpus: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let cfg = MiningConfig { top_k: 3, percentage_margin: 1.0 };
    let m = mine_hard_negatives("q", "p", &corpus, &t, &cfg).unwrap();
    assert_eq!(m.negatives, ["c", "a", "b"]);
    assert!(!m.short);
}

#[test]
fn mining_boundary_is_removed_and_ties_go_to_earlier_index() {
    // 0.5 × 0.5 = 0.25 exactly in binary
    let docs = [("x", 0.25), ("y", 0.125), ("z", 0.125), ("w", 0.0625)];
    let t = table("q", ("p", 0.5), &docs);
    let corpus: Vec<String> = ["x", "z", "y", "w"].iter().map(|s| s.to_string()).collect();
    let cfg = MiningConfig { top_k: 2, percentage_margin: 0.5 };
    let m = mine_hard_negatives("q", "p", &corpus, &t, &cfg).unwrap();
    assert_eq!(m.negatives, ["z", "y"]);
}

#[test]
fn mining_dedupes_and_skips_positive() {
    let docs = [("a", 0.1), ("b", 0.2)];
    let t = table("q", ("p", 0.9), &docs);
    let corpus: Vec<String> = ["b", "p", "b", "a", "p"].iter().map(|s| s.to_string()).collect();
    let cfg = MiningConfig { top_k: 5, percentage_margin: 0.95 };
    let m = mine_hard_negatives("q", "p", &corpus, &t, &cfg).unwrap();
    assert_eq!(m.negatives, ["b", "a"]);
    assert!(matches!(mine_hard_negatives("q", "p", &[], &t, &cfg), Err(Error::Validation(_))));
    let bad = MiningConfig { top_k: 0, percentage_margin: 0.95 };
    assert!(matches!(mine_hard_negatives("q", "p", &corpus, &t, &bad), Err(Error::Config(_))));
    let bad = MiningConfig { top_k: 1, percentage_margin: 1.5 };
    assert!(bad.validate().is_err());
}

/// Brute-force reference: filter every candidate, sort all, cut.
fn mining_oracle(pos: f64, margin: f64, scores: &[f64], k: usize) -> Vec<usize> {
    let thr = pos * margin;
    let mut all: Vec<(f64, usize)> = scores.iter().copied().zip(0..).filter(|(s, _)| !(*s >= thr)).collect();
    // bubble sort on (score desc, index asc)
    for i in 0..all.len() {
        for j in 0..all.len() - 1 - i {
            let (a, b) = (all[j], all[j + 1]);
            if a.0 < b.0 || (a.0 == b.0 && a.1 > b.1) {
                all.swap(j, j + 1);
            }
        }
    }
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

#[test]
fn mining_matches_sort_and_filter_oracle_with_checkpoint_teacher() {
    let mut cfg = ModelConfig::default();
    cfg.encoder.d_model = 8;
    cfg.encoder.n_heads = 2;
    cfg.encoder.d_ff = 16;
    cfg.encoder.n_layers = 1;
    cfg.encoder.max_len = 48;
    cfg.pooling.kind = crate::pooling::PoolingKind::Mean;
    let teacher = CheckpointTeacher::new(Checkpoint::init(cfg, 3).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let corpus: Vec<String> = (0..50)
        .map(|_| (0..rng.random_range(3..10)).map(|_| rng.random_range(b'a'..=b'h') as char).collect())
        .collect();
    let mut seen = HashSet::new();
    let unique: Vec<String> = corpus.iter().filter(|d| seen.insert(d.as_str())).cloned().collect();
    for trial in 0..5 {
        let positive = &unique[trial];
        let query = format_instructed_query("t", &unique[trial + 10]).unwrap();
        let mcfg = MiningConfig { top_k: 7, percentage_margin: 0.95 };
        let m = mine_hard_negatives(&query, positive, &corpus, &teacher, &mcfg).unwrap();
        let cands: Vec<&str> = unique.iter().map(String::as_str).filter(|d| d != positive).collect();
        let scores = teacher.score(&query, &cands).unwrap();
        let pos = teacher.score(&query, &[positive]).unwrap()[0];
        let want: Vec<&str> = mining_oracle(pos, 0.95, &scores, 7).into_iter().map(|i| cands[i]).collect();
        assert_eq!(m.negatives, want);
    }
}

proptest! {
    #[test]
    fn mining_safety_and_oracle(
        pos in -1.0f64..1.0,
        margin in 0.05f64..=1.0,
        scores in prop::collection::vec(prop::sample::select(vec![-0.5, -0.1, 0.0, 0.2, 0.3, 0.5, 0.7, 0.9]), 1..30),
        k in 1usize..10,
    ) {
        let docs: Vec<String> = (0..scores.len()).map(|i| format!("d{i}")).collect();
        let mut t = ScoreTable::default();
        t.insert("q", "p", pos);
        for (d, s) in docs.iter().zip(&scores) {
            t.insert("q", d, *s);
        }
        let cfg = MiningConfig { top_k: k, percentage_margin: margin };
        let m = mine_hard_negatives("q", "p", &docs, &t, &cfg).unwrap();
        let want: Vec<String> = mining_oracle(pos, margin, &scores, k).into_iter().map(|i| docs[i].clone()).collect();
        prop_assert_eq!(&m.negatives, &want);
        prop_assert!(m.scores.iter().all(|&s| s < pos * margin));
        prop_assert!(m.scores.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(m.short, want.len() < k);
    }
}

#[test]
fn parallel_mining_matches_sequential() {
    let mut t = ScoreTable::default();
    let corpus: Vec<String> = (0..20).map(|i| format!("doc{i}")).collect();
    let mut examples = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for q in 0..12 {
        let ex = TrainingExample::new("t", &format!("q{q}"), &corpus[q], vec![]);
        for d in &corpus {
            t.insert(&ex.query_text().unwrap(), d, rng.random_range(-1.0..1.0));
        }
        examples.push(ex);
    }
    let cfg = MiningConfig { top_k: 3, percentage_margin: 0.9 };
    let sequential: Vec<Vec<String>> = examples
        .iter()
        .map(|ex| mine_hard_negatives(&ex.query_text().unwrap(), &ex.positive, &corpus, &t, &cfg).unwrap().negatives)
        .collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    pool.install(|| mine_dataset(&mut examples, &corpus, &t, &cfg)).unwrap();
    let parallel: Vec<Vec<String>> = examples.into_iter().map(|e| e.negatives).collect();
    assert_eq!(parallel, sequential);
}

fn labeled(pairs: &[(&str, &str)]) -> Vec<LabeledExample> {
    pairs.iter().map(|(t, l)| LabeledExample { text: t.to_string(), label: l.to_string() }).collect()
}

#[test]
fn example_based_pairs_for_two_member_classes() {
    let data = labeled(&[("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")]);
    let out = build_multiclass_pairs(&data, PairMode::ExampleBased, "classify", 7, 1).unwrap();
    assert_eq!(out.skipped, 0);
    let a1 = &out.examples[0];
    assert_eq!(a1.query, "a1");
    assert_eq!(a1.positive, "a2");
    let mut negs = a1.negatives.clone();
    negs.sort();
    assert_eq!(negs, ["b1", "b2"]);
    for ex in &out.examples {
        assert_ne!(ex.query, ex.positive);
    }
}

#[test]
fn label_based_pairs_use_label_text() {
    let data = labeled(&[("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")]);
    let out = build_multiclass_pairs(&data, PairMode::LabelBased, "classify", 7, 1).unwrap();
    assert_eq!(out.examples[0].positive, "A");
    assert_eq!(out.examples[0].negatives, ["B"]);
    assert_eq!(out.examples[2].positive, "B");
    assert_eq!(out.examples[2].negatives, ["A"]);
}

#[test]
fn binary_label_batches_collide() {
    let data = labeled(&[("x", "yes"), ("y", "no"), ("z", "yes"), ("w", "no")]);
    let out = build_multiclass_pairs(&data, PairMode::LabelBased, "classify", 7, 2).unwrap();
    let batch = &out.examples;
    let collision = batch.iter().enumerate().any(|(i, a)| {
        batch.iter().enumerate().any(|(j, b)| i != j && a.negatives.contains(&b.positive))
    });
    assert!(collision);
}

#[test]
fn singleton_classes_are_skipped_and_determinism_holds() {
    let data = labeled(&[("a1", "A"), ("a2", "A"), ("a3", "A"), ("b1", "B"), ("c1", "C"), ("c2", "C")]);
    let one = build_multiclass_pairs(&data, PairMode::ExampleBased, "t", 2, 7).unwrap();
    let two = build_multiclass_pairs(&data, PairMode::ExampleBased, "t", 2, 7).unwrap();
    assert_eq!(one.skipped, 1);
    assert_eq!(one.examples, two.examples);
    assert!(one.examples.iter().all(|e| e.negatives.len() <= 2 && e.query != e.positive));
    assert!(build_multiclass_pairs(&labeled(&[("a", "A"), ("b", "A")]), PairMode::LabelBased, "t", 7, 0).is_err());
}

#[test]
fn sts_rule() {
    let t = ScoreTable::default();
    let cfg = MiningConfig::default();
    let two = build_sts_pairs("a", "b", 4.5, "sim", &[], &t, &cfg).unwrap();
    assert_eq!(two.len(), 2);
    assert_eq!((two[0].query.as_str(), two[0].positive.as_str()), ("a", "b"));
    assert_eq!((two[1].query.as_str(), two[1].positive.as_str()), ("b", "a"));
    assert!(two.iter().all(|e| e.symmetric));
    assert_eq!(two[0].document_text("b").unwrap(), "Instruct: sim Query: b");
    assert!(build_sts_pairs("a", "b", 3.9, "sim", &[], &t, &cfg).unwrap().is_empty());
    assert_eq!(build_sts_pairs("a", "b", 4.0, "sim", &[], &t, &cfg).unwrap().len(), 2);
}

#[test]
fn sts_toy_set_matches_rule_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<(String, String, f64)> =
        (0..10).map(|i| (format!("s{i}a"), format!("s{i}b"), (rng.random_range(0..=10) as f64) / 2.0)).collect();
    let pool: Vec<String> = pairs.iter().flat_map(|(a, b, _)| [a.clone(), b.clone()]).collect();
    let mut t = ScoreTable::default();
    for q in &pool {
        let iq = format_instructed_query("sim", q).unwrap();
        for d in &pool {
            t.insert(&iq, d, rng.random_range(-1.0..0.5));
        }
    }
    let cfg = MiningConfig { top_k: 2, percentage_margin: 0.95 };
    let mut got = Vec::new();
    for (a, b, s) in &pairs {
        for ex in build_sts_pairs(a, b, *s, "sim", &pool, &t, &cfg).unwrap() {
            assert!(!ex.negatives.contains(&ex.query) && !ex.negatives.contains(&ex.positive));
            got.push((ex.query, ex.positive));
        }
    }
    let mut want: Vec<(String, String)> = pairs
        .iter()
        .filter(|p| p.2 >= 4.0)
        .flat_map(|(a, b, _)| [(a.clone(), b.clone()), (b.clone(), a.clone())])
        .collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn dataset_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("retrieval.jsonl");
    let mut ex = TrainingExample::new("t", "q", "p", vec!["n1".into(), "n2".into()]);
    ex.label = Some("L".into());
    let mut sts = TrainingExample::new("t", "a", "b", vec![]);
    sts.pair_score = Some(4.5);
    Dataset::new("x", vec![ex.clone(), sts]).save(&path).unwrap();
    let ds = Dataset::load(&path).unwrap();
    assert_eq!(ds.name, "retrieval");
    assert_eq!(ds.examples[0].negatives, ex.negatives);
    assert!(ds.examples[1].symmetric);
    assert_eq!(ds.examples[0].source_dataset, "retrieval");

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, r#"{"task_definition":"t","query":"q","positive":"p","negatives":["p"]}"#).unwrap();
    assert!(matches!(Dataset::load(&bad), Err(Error::Validation(_))));
    let missing = dir.path().join("missing.jsonl");
    match Dataset::load(&missing) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("{other:?}"),
    }
}

fn numbered(name: &str, n: usize) -> Dataset {
    Dataset::new(name, (0..n).map(|i| TrainingExample::new("t", &format!("{name}{i}"), "p", vec![])).collect())
}

#[test]
fn blended_stream_is_uniform_over_datasets() {
    let mut s = BlendedStream::new(vec![numbered("a", 3), numbered("b", 50)], 17).unwrap();
    let mut counts = [0usize; 2];
    for _ in 0..10_000 {
        counts[s.next_index().0] += 1;
    }
    // binomial(10000, 1/2): σ = 50
    for c in counts {
        assert!((c as f64 - 5000.0).abs() <= 150.0, "{counts:?}");
    }
}

#[test]
fn single_dataset_stream_resamples_uniformly() {
    let mut s = BlendedStream::new(vec![numbered("a", 4)], 3).unwrap();
    let mut counts = [0usize; 4];
    for _ in 0..8000 {
        counts[s.next_index().1] += 1;
    }
    // binomial(8000, 1/4): σ ≈ 38.7
    assert!(counts.iter().all(|&c| (c as f64 - 2000.0).abs() <= 3.0 * 38.73), "{counts:?}");
}

#[test]
fn blended_stream_is_deterministic() {
    let make = || BlendedStream::new(vec![numbered("a", 5), numbered("b", 7)], 99).unwrap();
    let (mut x, mut y) = (make(), make());
    for _ in 0..500 {
        assert_eq!(x.next_example().query, y.next_example().query);
    }
    assert!(BlendedStream::new(vec![], 0).is_err());
    assert!(load_blended(&[PathBuf::from("/nonexistent/data.jsonl")], 0).is_err());
}
