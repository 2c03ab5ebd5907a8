//! End-to-end acceptance suite. Each test prints one PASS line with the
//! measured quantity so a full run reads as a checklist.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bidtreecrf::autodiff::Tensor;
use bidtreecrf::bidtree::WeightSharing;
use bidtreecrf::corpus::{random_embeddings, DepTree, Label, Token, Vocabulary, NUM_LABELS};
use bidtreecrf::crf::{
    brute_force_best, brute_force_log_partition, log_likelihood, log_partition, viterbi,
    CrfParams, NUM_PAIRS,
};
use bidtreecrf::pipeline::{
    build_model, load_model, model_grad_check, save_model, Ablation, Model, ModelConfig,
};
use bidtreecrf::spans::{decode_spans, AspectSpan};
use bidtreecrf::synthetic::{gradcheck_fixture, template_corpus};

fn random_crf_instance(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<f64>>, CrfParams) {
    let features = (0..n)
        .map(|_| (0..NUM_LABELS).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let weights = Tensor::matrix(
        NUM_PAIRS,
        NUM_LABELS,
        (0..NUM_PAIRS * NUM_LABELS)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    );
    let biases = Tensor::vector((0..NUM_PAIRS).map(|_| rng.gen_range(-1.0..1.0)).collect());
    (features, CrfParams::from_tensors(weights, biases))
}

/// CRF oracle equivalence: forward-algorithm partition and Viterbi agree
/// with exhaustive enumeration on 200 seeded instances, within 1e-8 and
/// in under 5 seconds.
#[test]
fn criterion_crf_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut worst = 0.0f64;
    for case in 0..200usize {
        let n = 1 + case % 6;
        let (features, params) = random_crf_instance(&mut rng, n);
        let fast_z = log_partition(&features, &params).unwrap();
        let slow_z = brute_force_log_partition(&features, &params).unwrap();
        let err = (fast_z - slow_z).abs();
        worst = worst.max(err);
        assert!(err < 1e-8, "case {case}: partition err {err}");
        let (v_seq, v_score) = viterbi(&features, &params).unwrap();
        let (b_seq, b_score) = brute_force_best(&features, &params).unwrap();
        assert_eq!(v_seq, b_seq, "case {case}: decoded sequences differ");
        assert!(
            (v_score - b_score).abs() < 1e-9,
            "case {case}: scores {v_score} vs {b_score}"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!(
        "PASS crf-oracle-equivalence: 200/200 instances, worst partition err {worst:.2e}, {elapsed:?}"
    );
}

/// Probability normalization: exp(log-likelihood) sums to 1 over all 3^N
/// sequences for 50 random instances with N <= 5.
#[test]
fn criterion_probability_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let mut worst = 0.0f64;
    for case in 0..50usize {
        let n = 1 + case % 5;
        let (features, params) = random_crf_instance(&mut rng, n);
        let mut total = 0.0;
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let labels: Vec<Label> = (0..n)
                .map(|_| {
                    let l = Label::from_id(c % 3);
                    c /= 3;
                    l
                })
                .collect();
            total += log_likelihood(&features, &labels, &params).unwrap().exp();
        }
        let err = (total - 1.0).abs();
        worst = worst.max(err);
        assert!(err < 1e-8, "case {case}: sum {total}");
    }
    println!("PASS probability-normalization: 50/50 instances, worst deviation {worst:.2e}");
}

/// Gradient check: every parameter group of the full variant-3 model
/// (d = 8, branching 5-token sentence) matches central finite differences
/// below 1e-4 relative error, in under 60 seconds.
#[test]
fn criterion_gradient_check_full_variant3() {
    let start = Instant::now();
    let fixture = gradcheck_fixture();
    let vocab = Vocabulary::build(&fixture);
    let config = ModelConfig {
        dim: 8,
        variant: WeightSharing::PerRelation,
        ablation: Ablation::Full,
        l2: 0.001,
        seed: 4242,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let table = random_embeddings(&vocab, config.dim, &mut rng);
    let mut model = build_model(config, vocab, &table).unwrap();
    let batch = vec![&fixture[0]];
    let checks = model_grad_check(&mut model, &batch, 1e-5, 24).unwrap();

    // Every group kind must be present and below threshold.
    for needle in [
        "embed.words",
        "tree.up.word.",
        "tree.up.rel.",
        "tree.up.bias.",
        "tree.up.rel_embed",
        "tree.down.word.",
        "tree.down.rel.",
        "tree.down.bias.",
        "tree.down.rel_embed",
        "bilstm.fwd.",
        "bilstm.bwd.",
        "proj.",
        "crf.",
    ] {
        assert!(
            checks.iter().any(|c| c.name.starts_with(needle)),
            "no parameter group matching {needle:?}"
        );
    }
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for c in &checks {
        if c.max_rel_err > worst {
            worst = c.max_rel_err;
            worst_name = c.name.clone();
        }
        assert!(c.max_rel_err < 1e-4, "{}: rel err {}", c.name, c.max_rel_err);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    println!(
        "PASS gradient-check: {} groups, worst {worst:.2e} ({worst_name}), {elapsed:?}",
        checks.len()
    );
}

/// Independent span-finder: maximal B (I)* runs, orphan I skipped.
fn reference_spans(labels: &[Label], tokens: &[&str]) -> Vec<AspectSpan> {
    let mut out = Vec::new();
    let n = labels.len();
    let mut i = 0;
    while i < n {
        if labels[i] == Label::BeginAspect {
            let mut j = i + 1;
            while j < n && labels[j] == Label::InsideAspect {
                j += 1;
            }
            out.push(AspectSpan {
                text: tokens[i..j].join(" "),
                begin: i + 1,
                end: j + 1,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// Label-decoding fidelity: agreement with the independent reference on
/// all 1,092 label sequences of length <= 6, including the documented
/// B-AP B-AP I-AP O case.
#[test]
fn criterion_span_decoding_fidelity() {
    use Label::{BeginAspect as B, InsideAspect as I, Outside as O};
    let w4 = ["w1", "w2", "w3", "w4"];
    let printed = decode_spans(&[B, B, I, O], &w4).unwrap();
    assert_eq!(
        printed,
        vec![
            AspectSpan {
                text: "w1".into(),
                begin: 1,
                end: 2
            },
            AspectSpan {
                text: "w2 w3".into(),
                begin: 2,
                end: 4
            },
        ]
    );

    let mut total = 0usize;
    for n in 1..=6usize {
        let toks: Vec<String> = (1..=n).map(|i| format!("w{i}")).collect();
        let tok_refs: Vec<&str> = toks.iter().map(|s| s.as_str()).collect();
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let labels: Vec<Label> = (0..n)
                .map(|_| {
                    let l = Label::from_id(c % 3);
                    c /= 3;
                    l
                })
                .collect();
            let got = decode_spans(&labels, &tok_refs).unwrap();
            let want = reference_spans(&labels, &tok_refs);
            assert_eq!(got, want, "labels {labels:?}");
            total += 1;
        }
    }
    assert_eq!(total, 1092);
    println!("PASS span-decoding-fidelity: {total} sequences agree with the reference span finder");
}

/// Random sentences over a fixed relation/word pool (valid trees by
/// construction: token i attaches to an earlier token).
fn random_sentences(rng: &mut ChaCha8Rng, count: usize, max_len: usize) -> Vec<DepTree> {
    let relations = ["det", "nsubj", "obj", "amod", "case", "nmod", "conj"];
    let words = [
        "the", "screen", "battery", "keyboard", "is", "good", "bad", "works", "i", "love",
    ];
    (0..count)
        .map(|_| {
            let n = 1 + rng.gen_range(0..max_len);
            let tokens: Vec<Token> = (1..=n)
                .map(|i| Token {
                    index: i,
                    surface: words[rng.gen_range(0..words.len())].to_string(),
                    head: if i == 1 { 0 } else { rng.gen_range(1..i) },
                    relation: if i == 1 {
                        "root".to_string()
                    } else {
                        relations[rng.gen_range(0..relations.len())].to_string()
                    },
                    label: None,
                })
                .collect();
            DepTree::new(tokens).expect("random trees are valid")
        })
        .collect()
}

/// Variant collapse: with variant 3's relation-specific matrices set to
/// variant 1's shared values, forward outputs coincide within 1e-12 on 50
/// random sentences.
#[test]
fn criterion_variant_collapse() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x51AB);
    let sentences = random_sentences(&mut rng, 50, 9);
    let vocab = Vocabulary::build(&sentences);
    let base = ModelConfig {
        dim: 6,
        ablation: Ablation::Full,
        seed: 99,
        ..ModelConfig::default()
    };
    let mut erng = ChaCha8Rng::seed_from_u64(7);
    let table = random_embeddings(&vocab, base.dim, &mut erng);

    let v1 = build_model(
        ModelConfig {
            variant: WeightSharing::SharedAll,
            ..base.clone()
        },
        vocab.clone(),
        &table,
    )
    .unwrap();
    let mut v3 = build_model(
        ModelConfig {
            variant: WeightSharing::PerRelation,
            ..base
        },
        vocab.clone(),
        &table,
    )
    .unwrap();

    // Copy every variant-1 tensor into its variant-3 counterpart; each
    // relation-specific pair takes the gate's shared pair.
    let find = |m: &Model, name: &str| {
        m.store
            .iter()
            .find(|(_, e)| e.name == name)
            .map(|(id, _)| id)
            .unwrap_or_else(|| panic!("missing param {name}"))
    };
    for (_, entry) in v3.store.iter().map(|(id, e)| (id, e.name.clone())).collect::<Vec<_>>() {
        let source_name = if let Some(rest) = entry
            .strip_prefix("tree.up.rel.")
            .or_else(|| entry.strip_prefix("tree.down.rel."))
        {
            let dir = if entry.starts_with("tree.up.") { "up" } else { "down" };
            if rest.ends_with("rel_embed") {
                entry.clone()
            } else {
                // "<r>.input.<g>" -> word matrix; "<r>.hidden.<g>" -> hidden
                let mut parts = rest.split('.');
                let _r = parts.next().unwrap();
                let kind = parts.next().unwrap();
                let gate = parts.next().unwrap();
                match kind {
                    "input" => format!("tree.{dir}.word.{gate}"),
                    "hidden" => format!("tree.{dir}.hidden.{gate}"),
                    other => panic!("unexpected relation tensor kind {other}"),
                }
            }
        } else {
            entry.clone()
        };
        let src = find(&v1, &source_name);
        let dst = find(&v3, &entry);
        *v3.store.tensor_mut(dst) = v1.store.tensor(src).clone();
    }

    let mut worst = 0.0f64;
    for tree in &sentences {
        let f1 = v1.sentence_features(tree);
        let f3 = v3.sentence_features(tree);
        for (a, b) in f1.iter().zip(&f3) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }
    println!("PASS variant-collapse: 50/50 sentences, max deviation {worst:.2e}");
}

/// Overfitting integration: the full variant-3 model at d = 25 reaches
/// span-F1 >= 0.99 on a 50-sentence synthetic corpus within 50 epochs and
/// 5 minutes.
///
/// Oracle run recorded at seed 42: train F1 first hits 1.0 at epoch 39 of
/// 50 (loss 123.2 -> 3.8). Span-F1 sits flat for the first 18 epochs while
/// the loss falls, so the patience-5 default would stop this run at epoch
/// 6; the 50-epoch budget of the criterion takes precedence here and
/// patience is widened to cover it.
#[test]
fn criterion_overfit_synthetic() {
    let start = Instant::now();
    let corpus = template_corpus(50);
    let vocab = Vocabulary::build(&corpus);
    let config = ModelConfig {
        dim: 25,
        variant: WeightSharing::PerRelation,
        ablation: Ablation::Full,
        max_epochs: 50,
        patience: 50,
        seed: 42,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let table = random_embeddings(&vocab, config.dim, &mut rng);
    let model = build_model(config, vocab, &table).unwrap();
    let (model, history) = model.train(&corpus, &corpus, 1).unwrap();
    let report = model.evaluate(&corpus).unwrap();
    let elapsed = start.elapsed();
    assert!(history.epochs.len() <= 50);
    assert!(
        report.f1 >= 0.99,
        "training span-F1 {} after {} epochs",
        report.f1,
        history.epochs.len()
    );
    assert!(elapsed.as_secs_f64() < 300.0, "took {elapsed:?}");
    // epoch-mean loss must collapse along with the F1
    let first = history.epochs.first().unwrap().train_loss;
    let last = history.epochs.last().unwrap().train_loss;
    assert!(
        last < 0.10 * first,
        "epoch-mean loss {last} not below 10% of epoch-1 loss {first}"
    );
    println!(
        "PASS overfit-synthetic: F1 {:.4} at epoch {} (stop after {}), loss {:.3} -> {:.3}, {elapsed:?}",
        report.f1,
        history.best_epoch,
        history.epochs.len(),
        first,
        last
    );
}

/// Determinism: equal seeds give identical histories and bit-identical
/// model files; a 4-worker run matches a 1-worker run.
#[test]
fn criterion_determinism() {
    let corpus = template_corpus(16);
    let vocab = Vocabulary::build(&corpus);
    let config = ModelConfig {
        dim: 8,
        max_epochs: 3,
        patience: 10,
        seed: 2024,
        ..ModelConfig::default()
    };
    let run = |workers: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = random_embeddings(&vocab, config.dim, &mut rng);
        let model = build_model(config.clone(), vocab.clone(), &table).unwrap();
        model.train(&corpus, &corpus, workers).unwrap()
    };
    let (m1, h1) = run(1);
    let (m2, h2) = run(1);
    let (m4, h4) = run(4);
    assert_eq!(h1, h2, "same-seed histories differ");
    assert_eq!(h1, h4, "worker counts change the history");

    let dir = tempfile::tempdir().unwrap();
    let paths = [
        dir.path().join("a.bin"),
        dir.path().join("b.bin"),
        dir.path().join("c.bin"),
    ];
    save_model(&m1, &paths[0]).unwrap();
    save_model(&m2, &paths[1]).unwrap();
    save_model(&m4, &paths[2]).unwrap();
    let bytes: Vec<Vec<u8>> = paths.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(bytes[0], bytes[1], "same-seed model files differ");
    assert_eq!(bytes[0], bytes[2], "worker counts change the model file");
    println!(
        "PASS determinism: identical histories and model files ({} bytes) across seeds and workers",
        bytes[0].len()
    );
}

/// Closed-form parameter count for one configuration.
///
/// With d the embedding dimension, V words, Rf forward and Ri inverse
/// relations, T = 3 labels and P = (T+1)*T CRF pairs:
///   words                     V*d
///   tree bank (R relations):  variant 1: 8d^2 + 4d
///                             variant 2: (7 + 2R)d^2 + 4d
///                             variant 3: (4 + 8R)d^2 + 4d
///                             plus R*d relation embeddings
///   BiLSTM (input k):         2 * (4dk + 4d^2 + 4d)
///   projection:               T*2d + T
///   CRF:                      P*T + P
fn expected_parameter_count(
    d: usize,
    v: usize,
    rf: usize,
    ri: usize,
    variant: WeightSharing,
    ablation: Ablation,
) -> usize {
    let t = NUM_LABELS;
    let pairs = NUM_PAIRS;
    let tree_bank = |r: usize| {
        let mats = match variant {
            WeightSharing::SharedAll => 8,
            WeightSharing::PerRelationForget => 7 + 2 * r,
            WeightSharing::PerRelation => 4 + 8 * r,
        };
        mats * d * d + 4 * d + r * d
    };
    let mut total = v * d;
    if ablation.has_up() {
        total += tree_bank(rf);
    }
    if ablation.has_down() {
        total += tree_bank(ri);
    }
    if ablation.has_bilstm() {
        let k = match ablation {
            Ablation::Full => 2 * d,
            _ => d,
        };
        total += 2 * (4 * d * k + 4 * d * d + 4 * d);
    }
    total += t * 2 * d + t;
    total += pairs * t + pairs;
    total
}

/// Ablation wiring: enumerated parameter counts match the closed-form
/// formulas for all documented configurations.
#[test]
fn criterion_ablation_parameter_counts() {
    let corpus = template_corpus(12);
    let vocab = Vocabulary::build(&corpus);
    let (v, rf, ri) = (
        vocab.num_words(),
        vocab.num_fwd_relations(),
        vocab.num_inv_relations(),
    );
    let cases = [
        (WeightSharing::SharedAll, Ablation::Full, "full #1"),
        (WeightSharing::PerRelationForget, Ablation::Full, "full #2"),
        (WeightSharing::PerRelation, Ablation::Full, "full #3"),
        (WeightSharing::PerRelation, Ablation::DtreeUp, "dtree-up"),
        (WeightSharing::PerRelation, Ablation::DtreeDown, "dtree-down"),
        (WeightSharing::PerRelation, Ablation::BidtreeCrf, "bidtree-crf"),
        (WeightSharing::PerRelation, Ablation::BilstmCrf, "bilstm-crf"),
    ];
    let d = 7;
    for (variant, ablation, name) in cases {
        let config = ModelConfig {
            dim: d,
            variant,
            ablation,
            seed: 5,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = random_embeddings(&vocab, d, &mut rng);
        let model = build_model(config, vocab.clone(), &table).unwrap();
        let expect = expected_parameter_count(d, v, rf, ri, variant, ablation);
        assert_eq!(
            model.parameter_count(),
            expect,
            "{name}: enumerated {} vs formula {expect}",
            model.parameter_count()
        );
    }
    println!("PASS ablation-parameter-counts: 7/7 configurations match the closed-form formulas");
}

/// Serialization: a save/load round trip reproduces predictions
/// bit-identically on 100 random sentences, and corrupted files are
/// rejected.
#[test]
fn criterion_serialization_roundtrip() {
    let train = template_corpus(20);
    let vocab = Vocabulary::build(&train);
    let config = ModelConfig {
        dim: 10,
        seed: 77,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let table = random_embeddings(&vocab, config.dim, &mut rng);
    let model = build_model(config, vocab, &table).unwrap();

    let mut srng = ChaCha8Rng::seed_from_u64(0xF00D);
    let sentences = random_sentences(&mut srng, 100, 12);
    let before = model.predict(&sentences);
    let features_before: Vec<_> = sentences.iter().map(|t| model.sentence_features(t)).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    let after = loaded.predict(&sentences);
    assert_eq!(before, after, "predictions changed across save/load");
    for (fa, fb) in features_before.iter().zip(sentences.iter().map(|t| loaded.sentence_features(t))) {
        assert_eq!(fa, &fb, "features changed across save/load");
    }

    let mut raw = std::fs::read(&path).unwrap();
    let mid = raw.len() / 3;
    raw[mid] ^= 0x01;
    let bad = dir.path().join("tampered.bin");
    std::fs::write(&bad, &raw).unwrap();
    assert!(load_model(&bad).is_err(), "tampered file accepted");
    println!("PASS serialization: 100/100 sentences predict bit-identically; corruption rejected");
}
