use super::*;
use crate::bundle::{DataBundle, DataConfig};
use crate::model::AttributeVector;

fn bundle() -> DataBundle {
    let cfg = DataConfig {
        concept_count: 50,
        supervised_seeds: vec![2],
        unsupervised_seeds: vec![],
        mono_lines: 200,
        parallel_lines: 200,
        ..DataConfig::default()
    };
    DataBundle::generate(&cfg).unwrap()
}

fn tiny_model(vocab: usize) -> ModelConfig {
    ModelConfig { d_model: 16, n_enc_layers: 1, n_dec_layers: 1, n_heads: 2, d_ff: 32, ..ModelConfig::new(vocab) }
}

fn tiny_train() -> TrainConfig {
    TrainConfig { batch_size: 8, total_steps: 20, bt_start_step: Some(0), bt_probability: 0.5, ..TrainConfig::default() }
}

fn trainer(cfg: TrainConfig) -> Trainer {
    let b = bundle();
    Trainer::new(tiny_model(b.vocab.len()), cfg, b.train_data().unwrap()).unwrap()
}

fn batch_of(t: &mut Trainer, kind: ExampleKind) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    loop {
        let b = t.sampler.sample_batch(t.cfg.batch_size, &mut rng).unwrap();
        if b.kind == kind {
            return b;
        }
    }
}

#[test]
fn config_validation_and_presets() {
    let mut c = TrainConfig::default();
    assert!(c.validate().is_ok());
    c.use_exemplars = false;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.apply_preset("-exemplars").unwrap();
    assert!(!c.use_bt && !c.use_exemplars && c.validate().is_ok());
    let mut c = TrainConfig::default();
    c.apply_preset("\u{2212}BT").unwrap();
    assert!(!c.use_bt);
    c.apply_preset("-para").unwrap();
    c.apply_preset("-lang-tokens").unwrap();
    assert!(!c.use_parallel && !c.use_lang_tokens);
    assert!(c.apply_preset("-everything").is_err());
    assert_eq!(TrainConfig::default().bt_start(), 600);
}

#[test]
fn initial_losses_are_near_log_vocab() {
    let b = bundle();
    let mut t = Trainer::new(ModelConfig::new(b.vocab.len()), tiny_train(), b.train_data().unwrap()).unwrap();
    let ln_v = (b.vocab.len() as f64).ln();
    let mono = batch_of(&mut t, ExampleKind::Denoise);
    let para = batch_of(&mut t, ExampleKind::Parallel);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corrupted = t.backtranslate_corruption(&mono, &mut rng).unwrap();
    let losses = [
        t.denoise_loss(&mono).unwrap().loss as f64,
        t.backtranslate_loss(&mono, &corrupted).unwrap().loss as f64,
        t.translate_loss(&para).unwrap().loss as f64,
    ];
    for l in losses {
        assert!(l.is_finite() && l > 0.0);
        assert!((l - ln_v).abs() < 0.1 * ln_v, "loss {l} vs ln V {ln_v}");
    }
}

#[test]
fn no_exemplar_denoising_equals_zero_vector() {
    let mut cfg = tiny_train();
    cfg.apply_preset("-exemplars").unwrap();
    let mut t = trainer(cfg);
    let batch = batch_of(&mut t, ExampleKind::Denoise);
    assert!(batch.examples.iter().all(|e| e.exemplar_ids.is_none()));
    let got = t.denoise_loss(&batch).unwrap();
    let inputs: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.input_ids.as_slice()).collect();
    let targets: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.target_ids.as_slice()).collect();
    let zeros = vec![AttributeVector::zeros(16); inputs.len()];
    let want = t
        .model
        .loss_and_grads(&GraphBatch { inputs: &inputs, targets: &targets, attr: AttrSource::Fixed(&zeros) }, None)
        .unwrap();
    assert_eq!(got.loss, want.loss);
    assert_eq!(got.grads, want.grads);
}

#[test]
fn backtranslation_is_seeded_and_gradient_free() {
    let mut t = trainer(tiny_train());
    let batch = batch_of(&mut t, ExampleKind::Denoise);
    let c1 = t.backtranslate_corruption(&batch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let c2 = t.backtranslate_corruption(&batch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(c1, c2);
    assert!(c1.iter().all(|c| c.len() < MAX_TOKENS));

    // The corrupted text enters as a constant: gradients equal a denoising
    // step that is handed the same text verbatim.
    let bt = t.backtranslate_loss(&batch, &c1).unwrap();
    let lang = t.vocab.lang_token(&batch.lang).unwrap();
    let inputs: Vec<Vec<TokenId>> = c1.iter().map(|c| std::iter::once(lang).chain(c.iter().copied()).collect()).collect();
    let inputs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let targets: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.target_ids.as_slice()).collect();
    let ex: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.exemplar_ids.as_deref().unwrap()).collect();
    let plain = t
        .model
        .loss_and_grads(&GraphBatch { inputs: &inputs, targets: &targets, attr: AttrSource::Exemplars(&ex) }, None)
        .unwrap();
    assert_eq!(bt.grads, plain.grads);
}

#[test]
fn ablations_are_visible_in_counters() {
    let mut cfg = tiny_train();
    cfg.apply_preset("-BT").unwrap();
    let mut t = trainer(cfg);
    t.run(|_, _| {}).unwrap();
    assert_eq!(t.counters.backtranslate, 0);
    assert_eq!(t.counters.sampled_decodes, 0);
    assert!(t.metrics.iter().all(|r| r.objective != ExampleKind::Backtranslate));

    let mut cfg = tiny_train();
    cfg.apply_preset("-para").unwrap();
    let mut t = trainer(cfg);
    t.run(|_, _| {}).unwrap();
    assert_eq!(t.counters.parallel, 0);

    let mut t = trainer(tiny_train());
    t.run(|_, _| {}).unwrap();
    assert!(t.counters.backtranslate > 0);
    assert_eq!(t.counters.backtranslate, t.counters.sampled_decodes);
    assert_eq!(t.counters.denoise + t.counters.backtranslate + t.counters.parallel, 20);
}

#[test]
fn objective_mix_is_balanced() {
    // Sampling only: the category draw happens before any model work.
    let mut t = trainer(TrainConfig { batch_size: 1, ..tiny_train() });
    let n = 2000;
    let mut parallel = 0;
    for step in 0..n {
        let mut rng = step_rng(1, step);
        if t.sampler.sample_batch(1, &mut rng).unwrap().kind == ExampleKind::Parallel {
            parallel += 1;
        }
    }
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((parallel as f64 - n as f64 / 2.0).abs() < 3.0 * sigma);
}

#[test]
fn translation_loss_decreases() {
    let cfg = TrainConfig {
        total_steps: 200,
        learning_rate: 3e-3,
        parallel_probability: 1.0,
        use_bt: false,
        ..tiny_train()
    };
    let mut t = trainer(cfg);
    t.run(|_, _| {}).unwrap();
    let first: f64 = t.metrics[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    let last = recent_loss(&t.metrics, ExampleKind::Parallel, 10).unwrap();
    assert!(t.metrics.iter().all(|r| r.objective == ExampleKind::Parallel));
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let mut a = trainer(tiny_train());
    a.run(|_, _| {}).unwrap();
    let mut b = trainer(tiny_train());
    b.run(|_, _| {}).unwrap();
    let bytes = a.checkpoint().unwrap().to_bytes().unwrap();
    assert_eq!(bytes, b.checkpoint().unwrap().to_bytes().unwrap());
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));

    let mut half = trainer(TrainConfig { total_steps: 9, ..tiny_train() });
    half.run(|_, _| {}).unwrap();
    let ck = half.checkpoint().unwrap();
    let mut resumed = Trainer::resume(ck, bundle().train_data().unwrap(), Some(20)).unwrap();
    assert_eq!(resumed.step, 9);
    resumed.run(|_, _| {}).unwrap();
    assert_eq!(resumed.checkpoint().unwrap().to_bytes().unwrap(), bytes);
    assert_eq!(resumed.metrics[..], a.metrics[9..]);
}

#[test]
fn zero_steps_checkpoint_is_initialization() {
    let mut t = trainer(TrainConfig { total_steps: 0, ..tiny_train() });
    let init = t.model.params.clone();
    t.run(|_, _| {}).unwrap();
    let ck = t.checkpoint().unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.params, init);
}

#[test]
fn resume_rejects_other_vocabulary() {
    let t = trainer(tiny_train());
    let mut ck = t.checkpoint().unwrap();
    ck.vocab_hash = "0".repeat(64);
    assert!(Trainer::resume(ck, bundle().train_data().unwrap(), None).is_err());
}

#[test]
fn metrics_csv_has_documented_header() {
    let rows = vec![MetricRow { step: 1, objective: ExampleKind::Parallel, dataset: "para:a-b".into(), loss: 1.5, tokens: 9 }];
    assert_eq!(metrics_csv(&rows), "step,objective,dataset,loss,tokens\n1,parallel,para:a-b,1.500000,9\n");
    assert!(timing_csv(&[]).starts_with(TIMING_HEADER));
}
