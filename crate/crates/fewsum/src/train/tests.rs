use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bench::{Dataset, Example, Split};
use crate::error::Error;
use crate::model::PrefixId;

use super::*;

fn dataset(task: &str, n: usize) -> Dataset {
    let examples = (0..n)
        .map(|i| Example {
            id: format!("{task}-{i}"),
            document: format!("doc {i} alpha beta"),
            summaries: vec![format!("sum {i}")],
            query: None,
        })
        .collect();
    Dataset::new(task, Split::TrainPool, examples).unwrap()
}

fn registry(sizes: &[(&str, usize, usize)]) -> TaskRegistry {
    let mut r = TaskRegistry::new();
    for (task, raw, target) in sizes {
        r.register(*task, dataset(task, *raw), *target);
    }
    r
}

fn multiplicities(corpus: &[(usize, usize)], task_idx: usize) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &(ti, ei) in corpus {
        if ti == task_idx {
            *m.entry(ei).or_insert(0) += 1;
        }
    }
    m
}

#[test]
fn balancing_mirrors_published_downsampling_arithmetic() {
    // 23,455 raw examples balanced up to 113,694: four full copies plus a
    // sampled remainder, so every example appears 4 or 5 times
    let r = registry(&[("billsum", 23_455, 113_694)]);
    let corpus = balance_datasets(&r, 0).unwrap();
    assert_eq!(corpus.len(), 113_694);
    let m = multiplicities(&corpus, 0);
    assert_eq!(m.len(), 23_455);
    assert!(m.values().all(|&c| c == 4 || c == 5));
    let fives = m.values().filter(|&&c| c == 5).count();
    assert_eq!(fives, 113_694 - 4 * 23_455);
}

#[test]
fn upsampling_small_pools_repeats_every_example() {
    let r = registry(&[("tiny", 10, 25)]);
    let corpus = balance_datasets(&r, 1).unwrap();
    assert_eq!(corpus.len(), 25);
    let m = multiplicities(&corpus, 0);
    assert!(m.values().all(|&c| c == 2 || c == 3));
}

#[test]
fn exact_size_is_identity_multiset() {
    let r = registry(&[("even", 100, 100)]);
    let corpus = balance_datasets(&r, 2).unwrap();
    let m = multiplicities(&corpus, 0);
    assert_eq!(m.len(), 100);
    assert!(m.values().all(|&c| c == 1));
}

#[test]
fn downsampling_draws_without_replacement() {
    let r = registry(&[("big", 50, 20)]);
    let corpus = balance_datasets(&r, 3).unwrap();
    assert_eq!(corpus.len(), 20);
    let m = multiplicities(&corpus, 0);
    assert_eq!(m.len(), 20);
    assert!(m.values().all(|&c| c == 1));
}

#[test]
fn balanced_composition_matches_targets_exactly() {
    let r = registry(&[("a", 7, 19), ("b", 30, 11), ("c", 13, 13)]);
    let corpus = balance_datasets(&r, 4).unwrap();
    let count = |ti: usize| corpus.iter().filter(|&&(t, _)| t == ti).count();
    assert_eq!(count(0), 19);
    assert_eq!(count(1), 11);
    assert_eq!(count(2), 13);
}

#[test]
fn empty_dataset_is_rejected() {
    let mut r = TaskRegistry::new();
    r.register(
        "empty",
        Dataset {
            task_id: "empty".into(),
            split: Split::TrainPool,
            examples: vec![],
        },
        5,
    );
    assert!(balance_datasets(&r, 0).is_err());
}

#[test]
fn batches_are_task_homogeneous_and_cover_the_corpus() {
    let r = registry(&[("a", 10, 10), ("b", 8, 8)]);
    let corpus = balance_datasets(&r, 5).unwrap();
    let batches = build_batches(&corpus, 2, 4, 5);
    let mut per_task = [0usize; 2];
    for b in &batches {
        per_task[b.task_index] += b.example_indices.len();
        assert!(b.example_indices.len() <= 4);
    }
    assert_eq!(per_task, [10, 8]);
}

#[test]
fn select_prefix_degenerate_probabilities() {
    let r = registry(&[("t", 3, 3)]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        assert_eq!(
            select_prefix(&r, "t", 0.0, &mut rng).unwrap(),
            PrefixId::task("t")
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        assert_eq!(
            select_prefix(&r, "t", 1.0, &mut rng).unwrap(),
            PrefixId::Universal
        );
    }
}

#[test]
fn select_prefix_rejects_unknown_tasks() {
    let r = registry(&[("t", 3, 3)]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        select_prefix(&r, "nope", 0.5, &mut rng),
        Err(Error::UnknownTask(_))
    ));
}

#[test]
fn select_prefix_consumes_exactly_one_draw() {
    // with one draw per call, the stream after n calls is independent of
    // the probability parameter
    let r = registry(&[("t", 3, 3)]);
    let observe = |p: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..17 {
            select_prefix(&r, "t", p, &mut rng).unwrap();
        }
        rand::Rng::gen::<u64>(&mut rng)
    };
    assert_eq!(observe(0.0), observe(1.0));
    assert_eq!(observe(0.15), observe(0.5));
}

#[test]
fn empirical_universal_frequency_sits_in_binomial_band() {
    let r = registry(&[("t", 3, 3)]);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let mut hits = 0usize;
    for _ in 0..n {
        if select_prefix(&r, "t", 0.15, &mut rng).unwrap() == PrefixId::Universal {
            hits += 1;
        }
    }
    let frac = hits as f64 / n as f64;
    assert!((0.146..=0.154).contains(&frac), "universal fraction {frac}");
}

#[test]
fn uniform_logit_loss_is_log_vocab() {
    // a zeroed backbone cannot be built through the public constructor, so
    // check the objective directly: uniform logits over V=16 -> ln 16
    let mut g = crate::tensor::Graph::<f64>::new();
    let logits = g.constant(crate::tensor::Tensor::zeros(vec![3, 16]));
    let loss = g.cross_entropy(logits, &[1, 2, 3], None, true).unwrap();
    assert!((g.value(loss)[0] - 16f64.ln()).abs() < 1e-15);
}

#[test]
fn batch_loss_is_invariant_to_example_order() {
    let vocab = crate::vocab::Vocab::from_corpus(["alpha beta gamma delta"], &[]);
    let cfg = crate::model::ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        max_src_len: 8,
        max_tgt_len: 4,
        prefix_len: 2,
        ..Default::default()
    };
    let store = crate::model::build_model::<f64>(&cfg, vocab.clone(), 3).unwrap();
    let mut rng = crate::seed::derive_rng(4, &["p"]);
    let prefix = crate::model::PrefixParams::init_random(
        store.config(),
        PrefixId::task("t"),
        &mut rng,
    );

    let exs: Vec<EncodedExample> = [("alpha beta", "beta"), ("gamma delta", "gamma"), ("beta", "alpha")]
        .iter()
        .enumerate()
        .map(|(i, (d, s))| {
            encode_example(
                &vocab,
                &Example {
                    id: format!("e{i}"),
                    document: d.to_string(),
                    summaries: vec![s.to_string()],
                    query: None,
                },
            )
        })
        .collect();
    let fwd: Vec<&EncodedExample> = exs.iter().collect();
    let rev: Vec<&EncodedExample> = exs.iter().rev().collect();
    let a = task_loss(&store, &prefix, &fwd).unwrap().data()[0];
    let b = task_loss(&store, &prefix, &rev).unwrap().data()[0];
    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn queries_are_prepended_with_a_separator() {
    let vocab = crate::vocab::Vocab::from_corpus(["what where doc body answer"], &[]);
    let ex = Example {
        id: "q1".into(),
        document: "doc body".into(),
        summaries: vec!["answer".into()],
        query: Some("what where".into()),
    };
    let enc = encode_example(&vocab, &ex);
    assert_eq!(enc.src[2], crate::vocab::SEP);
    assert_eq!(enc.src.len(), 5);
    assert_eq!(*enc.tgt.last().unwrap(), crate::vocab::EOS);
}

#[test]
fn rng_state_round_trips_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..13 {
        rand::Rng::gen::<f64>(&mut rng);
    }
    let saved = RngState::capture(&rng);
    let mut restored = saved.restore();
    for _ in 0..50 {
        assert_eq!(
            rand::Rng::gen::<u64>(&mut rng),
            rand::Rng::gen::<u64>(&mut restored)
        );
    }
}

#[test]
fn plain_sgd_step_matches_closed_form_over_random_tensors() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vocab = crate::vocab::Vocab::from_corpus(["alpha beta gamma"], &[]);
    let cfg = crate::model::ModelConfig {
        d_model: 4,
        n_heads: 1,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 8,
        max_src_len: 4,
        max_tgt_len: 4,
        prefix_len: 2,
        ..Default::default()
    };
    let r = registry(&[("t", 3, 3)]);
    let mut state: TrainState<f64> = init_state(&r, &cfg, vocab, 6).unwrap();
    let opt = OptimizerConfig {
        kind: OptimizerKind::PlainSgd,
        learning_rate: 0.07,
        prefix_learning_rate: 0.03,
        weight_decay: 0.05,
        prefix_weight_decay: 0.01,
        warmup_steps: 0,
        total_steps: 10_000_000, // factor at step 0 is exactly 1
        batch_size: 1,
        universal_prob: 0.0,
    };

    let mut grads = GradSet {
        backbone: BTreeMap::new(),
        prefix: BTreeMap::new(),
        prefix_id: PrefixId::task("t"),
    };
    let mut expected: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, t) in state.backbone.iter() {
        let g: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        expected.insert(
            name.clone(),
            t.data()
                .iter()
                .zip(&g)
                .map(|(&p, &gv)| (1.0 - 0.05) * p - 0.07 * gv)
                .collect(),
        );
        grads.backbone.insert(name.clone(), g);
    }
    let mut expected_prefix: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    {
        let p = state.bank.get(&PrefixId::task("t")).unwrap();
        for (path, t) in p.named_blocks() {
            let g: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            expected_prefix.insert(
                path.clone(),
                t.data()
                    .iter()
                    .zip(&g)
                    .map(|(&pv, &gv)| (1.0 - 0.01) * pv - 0.03 * gv)
                    .collect(),
            );
            grads.prefix.insert(path, g);
        }
    }

    asymmetric_decay_step(&mut state, &grads, &opt).unwrap();

    for (name, want) in &expected {
        let got = state.backbone.get(name).unwrap().data();
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() <= 1e-15, "{name}: {a} vs {b}");
        }
    }
    let p = state.bank.get(&PrefixId::task("t")).unwrap();
    for (path, t) in p.named_blocks() {
        let want = &expected_prefix[&path];
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() <= 1e-15, "{path}: {a} vs {b}");
        }
    }
}

#[test]
fn missing_gradient_is_a_contract_error() {
    let vocab = crate::vocab::Vocab::from_corpus(["alpha"], &[]);
    let cfg = crate::model::ModelConfig {
        d_model: 4,
        n_heads: 1,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 8,
        max_src_len: 4,
        max_tgt_len: 4,
        prefix_len: 1,
        ..Default::default()
    };
    let r = registry(&[("t", 2, 2)]);
    let mut state: TrainState<f64> = init_state(&r, &cfg, vocab, 1).unwrap();
    let grads = GradSet {
        backbone: BTreeMap::new(), // nothing supplied
        prefix: BTreeMap::new(),
        prefix_id: PrefixId::task("t"),
    };
    let err = asymmetric_decay_step(&mut state, &grads, &OptimizerConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn reserved_task_name_is_rejected() {
    let r = registry(&[(UNIVERSAL_NAME, 2, 2)]);
    assert!(r.validate().is_err());
}
