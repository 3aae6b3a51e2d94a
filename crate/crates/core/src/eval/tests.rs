use super::*;
use crate::bundle::{DataBundle, DataConfig};
use crate::model::{Model, ModelConfig};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
use proptest::collection::vec as pvec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Expected values come from sacreBLEU 2.6.0, BLEU(smooth_method="exp",
// tokenize="none").corpus_score.
const FIXTURES: &[(&[&str], &[&str], f64)] = &[
    (&["a b c d e", "f g h"], &["a b c d e", "f g h"], 100.0),
    (&["a b"], &["a b c d"], 0.0),
    (&["x y z"], &["a b c"], 0.0),
    (&["a b c d e f g h"], &["a b c d e f g h i j"], 77.88007830714052),
    (
        &["the cat sat on the mat", "a b c d e f", "p q r"],
        &["the cat sat on a mat", "a b x d e f g", "p q r s"],
        39.80621052093372,
    ),
    (&["the the the the"], &["the cat the dog"], 18.99589214128981),
    (&["a b c d e f"], &["a b c d"], 50.81327481546149),
];

#[test]
fn bleu_matches_reference_implementation() {
    for (hyp, refs, want) in FIXTURES {
        let got = bleu(hyp, refs).unwrap();
        assert!((got - want).abs() < 5e-5, "{hyp:?} vs {refs:?}: {got} != {want}");
    }
}

#[test]
fn brevity_penalty_case_by_hand() {
    // All precisions are 1; BP = exp(1 - 10/8).
    let got = bleu(&["a b c d e f g h"], &["a b c d e f g h i j"]).unwrap();
    assert!((got - 100.0 * (1.0f64 - 10.0 / 8.0).exp()).abs() < 1e-9);
}

#[test]
fn smoothing_counts_by_hand() {
    // p1 = 2/4, p2..p4 have no matches: 1/(2·3), 1/(4·2), 1/(8·1).
    let mut s = BleuStats::default();
    s.add("the the the the", "the cat the dog");
    assert_eq!(s.correct, [2, 0, 0, 0]);
    assert_eq!(s.total, [4, 3, 2, 1]);
    let want = 100.0 * (0.5f64 * (1.0 / 6.0) * (1.0 / 8.0) * (1.0 / 8.0)).powf(0.25);
    assert!((s.score() - want).abs() < 1e-9);
}

#[test]
fn bleu_rejects_bad_inputs() {
    assert!(bleu::<&str, &str>(&[], &[]).is_err());
    assert!(bleu(&["a"], &["a", "b"]).is_err());
}

proptest! {
    #[test]
    fn bleu_of_identical_corpus_is_100(lines in pvec(pvec(0u8..6, 1..12), 1..6)) {
        let text: Vec<String> = lines.iter().map(|l| l.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ")).collect();
        let score = bleu(&text, &text).unwrap();
        // Corpora without any 4-gram score 0 under the reference semantics.
        if text.iter().any(|l| l.split_whitespace().count() >= 4) {
            prop_assert!((score - 100.0).abs() < 1e-9);
        } else {
            prop_assert_eq!(score, 0.0);
        }
    }

    #[test]
    fn bleu_is_permutation_equivariant(
        pairs in pvec((pvec(0u8..5, 1..10), pvec(0u8..5, 1..10)), 1..6),
        rot in 0usize..6,
    ) {
        let join = |l: &Vec<u8>| l.iter().map(|w| format!("w{w}")).collect::<Vec<_>>().join(" ");
        let hyp: Vec<String> = pairs.iter().map(|p| join(&p.0)).collect();
        let refs: Vec<String> = pairs.iter().map(|p| join(&p.1)).collect();
        let a = bleu(&hyp, &refs).unwrap();
        let k = rot % hyp.len();
        let (mut h2, mut r2) = (hyp.clone(), refs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        prop_assert_eq!(a, bleu(&h2, &r2).unwrap());
        prop_assert!((0.0..=100.0 + 1e-9).contains(&a));
    }
}

#[test]
fn spearman_matches_reference_values() {
    // scipy.stats.spearmanr
    let a = spearman(&[0.5, 1.0, 1.5, 2.0, 2.5], &[0.1, 0.4, 0.35, 0.8, 0.8]).unwrap();
    assert!((a - 0.8720815992723809).abs() < 1e-12);
    let b = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[6.0, 5.0, 4.0, 4.0, 2.0, 1.0]).unwrap();
    assert!((b + 0.9856107606091623).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 2.0], &[3.0, 3.0]), None);
    assert_eq!(spearman(&[1.0], &[1.0]), None);
}

fn bundle() -> DataBundle {
    let cfg = DataConfig { mono_lines: 20, parallel_lines: 20, concept_count: 50, ..DataConfig::default() };
    DataBundle::generate(&cfg).unwrap()
}

fn engine(b: &DataBundle) -> Engine {
    let cfg = ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, n_enc_layers: 1, n_dec_layers: 1, ..ModelConfig::new(b.vocab.len()) };
    let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    Engine::new(model, b.vocab.clone(), true).unwrap()
}

#[test]
fn transfer_accuracy_examples() {
    let b = bundle();
    let w = &b.world;
    let index = LanguageIndex::new(w);
    let pivot = b.pivot().to_string();
    let pos = generate_sentences(w.pivot().unwrap(), &w.attribute, "positive", 4, 9).unwrap();
    let targets = vec!["positive".to_string(); 4];
    let all = transfer_accuracy(&pos, &targets, w, &index, &pivot).unwrap();
    assert_eq!(all, TransferScore { accuracy: 1.0, wrong_language_rate: 0.0 });

    let neutral: Vec<String> = pos
        .iter()
        .map(|s| {
            let markers = w.attribute.marker_index(&pivot).unwrap();
            s.split_whitespace().filter(|t| !markers.contains_key(t)).collect::<Vec<_>>().join(" ")
        })
        .collect();
    assert_eq!(transfer_accuracy(&neutral, &targets, w, &index, &pivot).unwrap().accuracy, 0.0);

    let mut half = pos.clone();
    half[0] = neutral[0].clone();
    half[1] = w.translate(&pos[1], &pivot, "x2").unwrap();
    let s = transfer_accuracy(&half, &targets, w, &index, &pivot).unwrap();
    assert_eq!(s, TransferScore { accuracy: 0.5, wrong_language_rate: 0.25 });
    // Correct value in the wrong language is not a success.
    let s = transfer_accuracy(&half[1..2], &targets[..1], w, &index, &pivot).unwrap();
    assert_eq!(s, TransferScore { accuracy: 0.0, wrong_language_rate: 1.0 });
}

proptest! {
    #[test]
    fn transfer_rates_are_bounded(picks in pvec(0usize..4, 1..12)) {
        let b = bundle();
        let w = &b.world;
        let index = LanguageIndex::new(w);
        let pool = [
            generate_sentences(w.pivot().unwrap(), &w.attribute, "positive", 1, 1).unwrap().remove(0),
            generate_sentences(w.pivot().unwrap(), &w.attribute, "negative", 1, 1).unwrap().remove(0),
            generate_sentences(w.language("x3").unwrap(), &w.attribute, "positive", 1, 1).unwrap().remove(0),
            String::new(),
        ];
        let outputs: Vec<&str> = picks.iter().map(|&i| pool[i].as_str()).collect();
        let targets = vec!["positive".to_string(); outputs.len()];
        let s = transfer_accuracy(&outputs, &targets, w, &index, "x1").unwrap();
        prop_assert!((0.0..=1.0).contains(&s.accuracy) && (0.0..=1.0).contains(&s.wrong_language_rate));
        prop_assert!(s.accuracy + s.wrong_language_rate <= 1.0 + 1e-12);
    }
}

#[test]
fn evalset_is_balanced() {
    let b = bundle();
    let langs = b.world.lang_ids();
    let set = EvalSet::generate(&b.world, &langs, 5, 11).unwrap();
    assert_eq!(set.items.len(), langs.len() * 2 * 5);
    for lang in &langs {
        for value in &b.world.attribute.values {
            let n = set.items.iter().filter(|i| &i.lang_id == lang && &i.source_value == value).count();
            assert_eq!(n, 5);
        }
    }
    for it in &set.items {
        assert_ne!(it.source_value, it.target_value);
        assert_eq!(b.world.classify(&it.input_text, &it.lang_id).unwrap().label(), it.source_value);
    }
    let pair = set.for_pair(&b.world, "x1", "x2").unwrap();
    assert_eq!(pair.len(), 10);
    assert!(pair.iter().all(|i| i.neutral_reference.is_some()));
    assert!(EvalSet::generate(&b.world, &langs, 0, 11).is_err());
}

#[test]
fn lambda_grid_is_exact() {
    let g = lambda_grid(0.5, 9.0);
    assert_eq!(g.len(), 18);
    assert_eq!(g[0], 0.5);
    assert_eq!(g[17], 9.0);
    assert_eq!(lambda_grid(0.5, 5.0).len(), 10);
}

#[test]
fn sweeps_are_ordered_and_cross_zero_is_exact() {
    let b = bundle();
    let e = engine(&b);
    let set = EvalSet::generate(&b.world, &["x1".to_string(), "x2".to_string()], 2, 3).unwrap();
    let ex = Exemplars::generate(&b.world, "x1", 3, 5).unwrap();
    let lambdas = lambda_grid(0.5, 9.0);
    let pairs = vec![("x1".to_string(), "x1".to_string())];
    let within = sweep_lambda(&e, &b.world, &set, &ex, &lambdas, Scenario::Within, &pairs, None).unwrap();
    assert_eq!(within.records.len(), 18);
    assert!(within.records.windows(2).all(|w| w[0].lambda < w[1].lambda));

    let mut lambdas = vec![0.0];
    lambdas.extend(lambda_grid(0.5, 1.0));
    let pairs = vec![("x2".to_string(), "x1".to_string()), ("x1".to_string(), "x2".to_string())];
    let cross = sweep_lambda(&e, &b.world, &set, &ex, &lambdas, Scenario::Cross(Tier::Supervised), &pairs, None).unwrap();
    assert_eq!(cross.records.len(), 6);
    let order: Vec<(f64, &str, &str)> =
        cross.records.iter().map(|r| (r.lambda, r.src_lang.as_str(), r.tgt_lang.as_str())).collect();
    assert_eq!(order[0], (0.0, "x1", "x2"));
    assert_eq!(order[1], (0.0, "x2", "x1"));
    assert_eq!(order[5], (1.0, "x2", "x1"));
    for r in &cross.records[..2] {
        assert_eq!(r.self_bleu, bleu(&["a b c d"], &["a b c d"]).unwrap());
    }
    assert_eq!(cross.by_lambda(None).len(), 3);
    assert_eq!(cross.by_lambda(Some("x2")).len(), 3);

    let bad = vec![("x1".to_string(), "x2".to_string())];
    assert!(sweep_lambda(&e, &b.world, &set, &ex, &[0.5], Scenario::Within, &bad, None).is_err());
    assert!(sweep_lambda(&e, &b.world, &set, &ex, &[1.0, 0.5], Scenario::Within, &pairs[..0], None).is_ok());
    let idx = LanguageIndex::new(&b.world);
    assert!(sweep_pair(&e, &b.world, &idx, &[], &ex, &[0.5], Mode::Within, "x1", None).is_err());
}

#[test]
fn unconditioned_engine_sweeps_are_flat_in_lambda() {
    let b = bundle();
    let e = engine(&b).without_attribute_conditioning();
    let set = EvalSet::generate(&b.world, &["x1".to_string()], 2, 3).unwrap();
    let ex = Exemplars::generate(&b.world, "x1", 3, 5).unwrap();
    let pairs = vec![("x1".to_string(), "x1".to_string())];
    let sweep = sweep_lambda(&e, &b.world, &set, &ex, &[0.5, 4.0, 9.0], Scenario::Within, &pairs, None).unwrap();
    let first = &sweep.records[0];
    for r in &sweep.records[1..] {
        assert_eq!((r.transfer_accuracy, r.self_bleu), (first.transfer_accuracy, first.self_bleu));
    }
}

#[test]
fn best_record_prefers_smaller_lambda_on_ties() {
    let rec = |lambda: f64, acc: f64| SweepRecord {
        lambda,
        src_lang: "a".into(),
        tgt_lang: "a".into(),
        self_bleu: 0.0,
        transfer_accuracy: acc,
        wrong_language_rate: 0.0,
        n: 1,
    };
    let rs = [rec(0.5, 0.2), rec(1.0, 0.9), rec(1.5, 0.9), rec(2.0, 0.1)];
    assert_eq!(best_by_accuracy(&rs).unwrap().lambda, 1.0);
    assert!(best_by_accuracy(&[]).is_none());
}

#[test]
fn benchmark_skips_identical_pairs_and_rejects_empty_sets() {
    let b = bundle();
    let e = engine(&b);
    let same = TranslationSet::generate(&b.world, "x1", "x1", Tier::Supervised, 2, 1).unwrap();
    assert!(run_translation_benchmark(&e, &[same], None).unwrap().is_empty());
    let mut empty = TranslationSet::generate(&b.world, "x1", "x2", Tier::Supervised, 1, 1).unwrap();
    empty.sources.clear();
    empty.references.clear();
    assert!(run_translation_benchmark(&e, &[empty], None).is_err());
    let sets = [
        TranslationSet::generate(&b.world, "x2", "x1", Tier::Supervised, 2, 1).unwrap(),
        TranslationSet::generate(&b.world, "x1", "x4", Tier::Unsupervised, 2, 1).unwrap(),
    ];
    let rows = run_translation_benchmark(&e, &sets, Some(DecodeConfig::greedy())).unwrap();
    assert_eq!(rows.iter().map(|r| r.src_lang.as_str()).collect::<Vec<_>>(), vec!["x1", "x2"]);
    assert!(rows.iter().all(|r| (0.0..=100.0).contains(&r.bleu) && r.n == 2));
}

#[test]
fn report_files_are_stable() {
    let rec = SweepRecord {
        lambda: 0.5,
        src_lang: "x1".into(),
        tgt_lang: "x2".into(),
        self_bleu: 41.25,
        transfer_accuracy: 0.75,
        wrong_language_rate: 0.0,
        n: 8,
    };
    let sweeps = vec![
        SweepResult { scenario: Scenario::Within, records: vec![SweepRecord { tgt_lang: "x1".into(), ..rec.clone() }] },
        SweepResult { scenario: Scenario::Cross(Tier::ZeroShot), records: vec![rec] },
    ];
    let rows = vec![BenchmarkRow { src_lang: "x1".into(), tgt_lang: "x2".into(), tier: Tier::Supervised, bleu: 61.0, n: 3 }];
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_report(dir.path(), &sweeps, Some(&rows)).unwrap();
    let names: Vec<String> = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(
        names,
        ["sweep_within.csv", "plot_within.csv", "sweep_cross-zero-shot.csv", "plot_cross-zero-shot.csv", "benchmark.csv"]
    );
    let first: Vec<String> = paths.iter().map(|p| fs::read_to_string(p).unwrap()).collect();
    assert_eq!(first[2], format!("{SWEEP_HEADER}\ncross-zero-shot,0.50,x1,x2,41.2500,0.7500,0.0000,8\n"));
    assert_eq!(first[3], format!("{PLOT_HEADER}\n0.50,41.2500,0.7500,0.0000\n"));
    assert_eq!(first[4], format!("{BENCHMARK_HEADER}\nx1,x2,supervised,61.0000,3\n"));
    emit_report(dir.path(), &sweeps, Some(&rows)).unwrap();
    let second: Vec<String> = paths.iter().map(|p| fs::read_to_string(p).unwrap()).collect();
    assert_eq!(first, second);
    assert!(emit_report(&dir.path().join("sweep_within.csv"), &sweeps, None).is_err());
}
