use super::*;
use crate::model::ModelConfig;
use crate::synthlang::CorpusLine;
use ndarray::Array1;
use proptest::prelude::{prop_assert, proptest};

fn av(v: &[f32]) -> AttributeVector {
    AttributeVector(Array1::from(v.to_vec()))
}

#[test]
fn delta_within_example() {
    let d = delta_vector(Some(&av(&[1.0, -2.0])), &av(&[0.0, 0.0]), &av(&[2.0, 2.0]), 0.5, Mode::Within).unwrap();
    assert_eq!(d, av(&[2.0, -1.0]));
}

#[test]
fn delta_cross_lambda_zero_is_zero() {
    let d = delta_vector(None, &av(&[0.3, -7.0, 2.5]), &av(&[1.0, 4.0, -9.0]), 0.0, Mode::Cross).unwrap();
    assert!(d.0.iter().all(|&x| x == 0.0));
}

#[test]
fn delta_within_equal_sets_keeps_vx() {
    let x = av(&[0.1, 0.2, -0.3]);
    let a = av(&[5.0, -1.5, 0.25]);
    for lambda in [0.0, 0.5, 3.0, 20.0] {
        assert_eq!(delta_vector(Some(&x), &a, &a, lambda, Mode::Within).unwrap(), x);
    }
}

#[test]
fn delta_is_exactly_linear_on_dyadic_values() {
    let x = av(&[1.0, -0.5, 0.25]);
    let a = av(&[0.5, 2.0, -1.0]);
    let b = av(&[-1.5, 0.75, 3.0]);
    for mode in [Mode::Within, Mode::Cross] {
        let vx = (mode == Mode::Within).then_some(&x);
        for lambda in [0.5, 1.0, 2.5] {
            let d0 = delta_vector(vx, &a, &b, 0.0, mode).unwrap().0;
            let d1 = delta_vector(vx, &a, &b, lambda, mode).unwrap().0;
            let d2 = delta_vector(vx, &a, &b, 2.0 * lambda, mode).unwrap().0;
            assert_eq!(&d2 - &d1, &d1 - &d0);
        }
    }
    let d = delta_vector(Some(&x), &a, &b, 0.0, Mode::Within).unwrap();
    assert_eq!(d, x);
}

#[test]
fn delta_rejects_bad_shapes() {
    assert!(delta_vector(None, &av(&[1.0]), &av(&[1.0, 2.0]), 1.0, Mode::Cross).is_err());
    assert!(delta_vector(None, &av(&[1.0]), &av(&[2.0]), 1.0, Mode::Within).is_err());
    assert!(delta_vector(Some(&av(&[1.0, 2.0])), &av(&[1.0]), &av(&[2.0]), 1.0, Mode::Within).is_err());
}

proptest! {
    #[test]
    fn delta_linearity_holds_approximately(
        vals in proptest::collection::vec(-10.0f32..10.0, 12),
        lambda in 0.0f64..10.0,
    ) {
        let x = av(&vals[0..4]);
        let a = av(&vals[4..8]);
        let b = av(&vals[8..12]);
        for mode in [Mode::Within, Mode::Cross] {
            let vx = (mode == Mode::Within).then_some(&x);
            let d0 = delta_vector(vx, &a, &b, 0.0, mode).unwrap().0;
            let d1 = delta_vector(vx, &a, &b, lambda, mode).unwrap().0;
            let d2 = delta_vector(vx, &a, &b, 2.0 * lambda, mode).unwrap().0;
            for j in 0..4 {
                prop_assert!(((d2[j] - d1[j]) - (d1[j] - d0[j])).abs() < 1e-3);
            }
        }
    }
}

/// Scorer over a 3-token vocabulary {0, EOS=1, 2} whose distribution depends
/// on the whole prefix through a seeded hash.
struct ToyScorer {
    seed: u64,
}

impl ToyScorer {
    fn dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut h = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x1234;
        for &t in prefix {
            h = (h ^ (t as u64 + 1)).wrapping_mul(0x100_0000_01b3).rotate_left(13);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| (x / s).ln()).collect()
    }
}

impl StepScorer for ToyScorer {
    type State = (Vec<TokenId>, Option<TokenId>);
    fn initial(&self) -> Self::State {
        (Vec::new(), None)
    }
    fn log_probs(&self, states: &mut [Self::State]) -> Result<Vec<Vec<f64>>> {
        Ok(states
            .iter_mut()
            .map(|(prefix, pending)| {
                if let Some(t) = pending.take() {
                    prefix.push(t);
                }
                self.dist(prefix)
            })
            .collect())
    }
    fn feed(&self, state: &mut Self::State, token: TokenId) {
        state.1 = Some(token);
    }
}

/// Every sequence the decoder can produce up to `max_len`: EOS-terminated
/// ones plus unterminated sequences of exactly `max_len` tokens.
fn enumerate(s: &ToyScorer, max_len: usize) -> Vec<Hypothesis> {
    let mut out = Vec::new();
    let mut frontier = vec![(Vec::<TokenId>::new(), 0.0f64)];
    for depth in 0..max_len {
        let mut next = Vec::new();
        for (prefix, lp) in frontier {
            let d = s.dist(&prefix);
            for t in 0..3u32 {
                let mut seq = prefix.clone();
                seq.push(t);
                let score = lp + d[t as usize];
                if t == EOS {
                    out.push(Hypothesis { tokens: seq, log_prob: score, finished: true });
                } else if depth + 1 == max_len {
                    out.push(Hypothesis { tokens: seq, log_prob: score, finished: false });
                } else {
                    next.push((seq, score));
                }
            }
        }
        frontier = next;
    }
    out
}

#[test]
fn beam_matches_exhaustive_enumeration_on_toy_vocabulary() {
    for seed in 0..200 {
        let s = ToyScorer { seed };
        let all = enumerate(&s, 4);
        // EOS-terminated at lengths 1..=4, plus 2^4 unterminated sequences.
        assert_eq!(all.len(), 1 + 2 + 4 + 8 + 16);
        let best = all
            .iter()
            .max_by(|a, b| a.normalized().total_cmp(&b.normalized()).then_with(|| b.tokens.cmp(&a.tokens)))
            .unwrap();
        let found = beam_search(&s, 27, 4).unwrap();
        assert_eq!(found.tokens, best.tokens, "seed {seed}");
        assert!((found.log_prob - best.log_prob).abs() < 1e-12);
    }
}

#[test]
fn beam_one_equals_greedy_on_toy_vocabulary() {
    for seed in 0..200 {
        let s = ToyScorer { seed };
        for max_len in [1, 3, 6] {
            assert_eq!(beam_search(&s, 1, max_len).unwrap(), greedy(&s, max_len).unwrap());
        }
    }
}

struct FixedPath;

impl StepScorer for FixedPath {
    type State = usize;
    fn initial(&self) -> usize {
        0
    }
    fn log_probs(&self, states: &mut [usize]) -> Result<Vec<Vec<f64>>> {
        Ok(states
            .iter_mut()
            .map(|pos| {
                let want = [2usize, 0, 2, 1][(*pos).min(3)];
                *pos += 1;
                (0..3).map(|t| if t == want { (0.98f64).ln() } else { (0.01f64).ln() }).collect()
            })
            .collect())
    }
    fn feed(&self, _: &mut usize, _: TokenId) {}
}

#[test]
fn single_high_probability_path_wins_for_any_k() {
    for k in 1..8 {
        let h = beam_search(&FixedPath, k, 10).unwrap();
        assert_eq!(h.tokens, vec![2, 0, 2, 1]);
        assert!(h.finished);
    }
    assert!(beam_search(&FixedPath, 0, 10).is_err());
}

#[test]
fn sampling_is_seeded_and_low_temperature_is_greedy() {
    let s = ToyScorer { seed: 5 };
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(sample(&s, 1.5, 8, &mut r1).unwrap(), sample(&s, 1.5, 8, &mut r2).unwrap());
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(sample(&s, 5e-4, 8, &mut r).unwrap(), greedy(&s, 8).unwrap());
    assert!(sample(&s, 0.0, 8, &mut r).is_err());
}

fn toy_engine() -> Engine {
    let lines: Vec<CorpusLine> = ["aa bb cc dd ee", "ff gg hh ii jj"]
        .iter()
        .zip(["l1", "l2"])
        .map(|(t, l)| CorpusLine { text: t.to_string(), lang_id: l.into(), attr_value: "positive".into(), line_id: 0 })
        .collect();
    let vocab = Vocabulary::build(&[&lines]).unwrap();
    let mut cfg = ModelConfig::new(vocab.len());
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.n_heads = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    Engine::new(Model::new(cfg, &mut rng).unwrap(), vocab, true).unwrap()
}

fn request(lambda: f64, mode: Mode) -> RewriteRequest {
    RewriteRequest {
        input_text: "aa bb cc".into(),
        target_lang: "l2".into(),
        exemplars_a: vec!["aa bb".into(), "dd ee".into()],
        exemplars_b: vec!["ff gg".into()],
        lambda,
        mode,
        decode: None,
    }
}

#[test]
fn beam_one_equals_greedy_on_model() {
    let e = toy_engine();
    let ids = e.source_ids(&e.tokenize("aa bb cc").unwrap(), "l2").unwrap();
    let src = e.model.prepare_source(&ids, None).unwrap();
    let scorer = ModelScorer { model: &e.model, sources: vec![&src], allowed: e.allowed_tokens() };
    let g = greedy(&scorer, DEFAULT_MAX_LEN).unwrap();
    assert_eq!(beam_search(&scorer, 1, DEFAULT_MAX_LEN).unwrap(), g);
    assert_eq!(e.generate(&src, &DecodeConfig::greedy()).unwrap(), g);
}

#[test]
fn batched_generation_matches_one_at_a_time() {
    let e = toy_engine();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sources: Vec<_> = ["aa bb cc", "ff", "dd ee aa gg hh"]
        .iter()
        .map(|t| {
            let attr = AttributeVector(Array1::from_shape_simple_fn(16, || rng.gen_range(-1.0f32..1.0)));
            e.prepare(&e.tokenize(t).unwrap(), "l1", &attr).unwrap()
        })
        .collect();
    for decode in [DecodeConfig::beam(3), DecodeConfig::greedy(), DecodeConfig::new(Strategy::Sample { temperature: 1.0 })] {
        let many = e.generate_many(&sources, &decode).unwrap();
        for (src, h) in sources.iter().zip(&many) {
            assert_eq!(&e.generate(src, &decode).unwrap(), h);
        }
    }
}

#[test]
fn untrained_model_output_is_bounded_and_clean() {
    let e = toy_engine();
    let r = e.rewrite(&request(1.0, Mode::Cross)).unwrap();
    assert!(r.steps <= DEFAULT_MAX_LEN);
    assert!(r.finished || r.steps == DEFAULT_MAX_LEN);
    assert!(r.output_ids.iter().all(|&t| t == EOS || !e.vocab.is_special(t)));
    assert_eq!(r.decode, DecodeConfig::beam(1));
}

#[test]
fn cross_lambda_zero_equals_translate() {
    let e = toy_engine();
    let r = e.rewrite(&request(0.0, Mode::Cross)).unwrap();
    assert_eq!(r.output_text, e.translate("aa bb cc", "l2", None).unwrap());
    assert_eq!(r.attribute_delta_norm, 0.0);
    assert_eq!(r.decode, DecodeConfig::beam(5));
}

#[test]
fn within_lambda_zero_injects_vx() {
    let e = toy_engine();
    let ids = e.tokenize("aa bb cc").unwrap();
    let v = e.request_vector(&request(0.0, Mode::Within), &ids).unwrap();
    assert_eq!(v, e.model.extract_attribute(&ids).unwrap());
}

#[test]
fn without_conditioning_injects_nothing() {
    let e = toy_engine().without_attribute_conditioning();
    let ids = e.tokenize("aa bb cc").unwrap();
    for mode in [Mode::Within, Mode::Cross] {
        let v = e.request_vector(&request(2.0, mode), &ids).unwrap();
        assert_eq!(v, AttributeVector::zeros(16));
        assert_eq!(e.rewrite(&request(2.0, mode)).unwrap().attribute_delta_norm, 0.0);
    }
    let mut bad = request(2.0, Mode::Cross);
    bad.exemplars_b.clear();
    assert!(e.request_vector(&bad, &ids).is_err());
}

#[test]
fn exemplar_order_does_not_matter() {
    let e = toy_engine();
    let a = e.attribute(&["aa bb".into(), "dd ee".into(), "cc".into()]).unwrap();
    let b = e.attribute(&["cc".into(), "aa bb".into(), "dd ee".into()]).unwrap();
    for j in 0..a.dim() {
        assert!((a.0[j] - b.0[j]).abs() < 1e-6);
    }
    let single = e.attribute(&["aa bb".into()]).unwrap();
    let double = e.attribute(&["aa bb".into(), "aa bb".into()]).unwrap();
    assert_eq!(single, double);
}

#[test]
fn invalid_requests_are_rejected() {
    let e = toy_engine();
    let mut r = request(21.0, Mode::Cross);
    assert!(e.rewrite(&r).is_err());
    r.lambda = 1.0;
    r.target_lang = "zz".into();
    assert!(matches!(e.rewrite(&r), Err(Error::UnknownLanguage(_))));
    let mut r = request(1.0, Mode::Cross);
    r.exemplars_a.clear();
    assert!(e.rewrite(&r).is_err());
    let mut r = request(1.0, Mode::Cross);
    r.input_text = vec!["aa"; 65].join(" ");
    assert!(matches!(e.rewrite(&r), Err(Error::TooLong { .. })));
    let mut r = request(1.0, Mode::Cross);
    r.input_text = "   ".into();
    assert!(e.rewrite(&r).is_err());
    let mut r = request(1.0, Mode::Cross);
    r.decode = Some(DecodeConfig::beam(0));
    assert!(e.rewrite(&r).is_err());
}

#[test]
fn sampled_rewrites_are_reproducible() {
    let e = toy_engine();
    let mut r = request(2.0, Mode::Cross);
    r.decode = Some(DecodeConfig { strategy: Strategy::Sample { temperature: 1.0 }, max_len: 20, seed: 4 });
    assert_eq!(e.rewrite(&r).unwrap(), e.rewrite(&r).unwrap());
}

#[test]
fn decode_config_json_shape() {
    let d: DecodeConfig = serde_json::from_str(r#"{"strategy":"beam","k":3}"#).unwrap();
    assert_eq!(d, DecodeConfig::beam(3));
    let s = serde_json::to_string(&DecodeConfig::greedy()).unwrap();
    assert_eq!(s, r#"{"strategy":"greedy","max_len":64,"seed":0}"#);
}
