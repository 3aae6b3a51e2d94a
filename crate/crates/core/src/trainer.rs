//! Training loop over the three objectives: exemplar-conditioned denoising,
//! back-translation through the pivot with a negated exemplar vector, and
//! supervised translation with a zero attribute vector.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datapipe::{Batch, ExampleKind, MonoDataset, NoiseConfig, ParallelDataset, Sampler, SamplerConfig, MAX_TOKENS};
use crate::error::{Error, Result};
use crate::inference::{generate_batch, output_mask};
use crate::model::{AttrSource, GraphBatch, LossAndGrads, Model, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub noise: NoiseConfig,
    pub noise_parallel: bool,
    pub parallel_probability: f64,
    pub bt_temperature: f64,
    /// First step eligible for back-translation; None means 20% of `total_steps`.
    pub bt_start_step: Option<u64>,
    /// Probability that an eligible mono batch becomes a back-translation batch.
    pub bt_probability: f64,
    pub use_parallel: bool,
    pub use_lang_tokens: bool,
    pub use_exemplars: bool,
    pub use_bt: bool,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            total_steps: 3000,
            batch_size: 128,
            noise: NoiseConfig::default(),
            noise_parallel: false,
            parallel_probability: 0.5,
            bt_temperature: 1.5,
            bt_start_step: None,
            bt_probability: 0.25,
            use_parallel: true,
            use_lang_tokens: true,
            use_exemplars: true,
            use_bt: true,
            clip_norm: 1.0,
            seed: 1,
        }
    }
}

/// Named ablation presets.
pub const PRESETS: [&str; 4] = ["-para", "-lang-tokens", "-exemplars", "-BT"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !(self.bt_temperature > 0.0) {
            return fail("bt_temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.bt_probability) || !(0.0..=1.0).contains(&self.parallel_probability) {
            return fail("probabilities must lie in [0,1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.use_bt && !self.use_exemplars {
            return fail("use_bt requires use_exemplars");
        }
        self.noise.validate()
    }

    /// Applies an ablation preset (`-para`, `-lang-tokens`, `-exemplars`, `-BT`).
    /// `-exemplars` also disables back-translation, which needs exemplars.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name.replace('\u{2212}', "-").as_str() {
            "-para" => self.use_parallel = false,
            "-lang-tokens" => self.use_lang_tokens = false,
            "-exemplars" => {
                self.use_exemplars = false;
                self.use_bt = false;
            }
            "-BT" => self.use_bt = false,
            other => {
                return Err(Error::Config(format!("unknown preset `{other}` (expected one of {})", PRESETS.join(", "))))
            }
        }
        Ok(())
    }

    pub fn bt_start(&self) -> u64 {
        self.bt_start_step.unwrap_or(self.total_steps / 5)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            parallel_probability: self.parallel_probability,
            use_parallel: self.use_parallel,
            use_exemplars: self.use_exemplars,
            use_lang_tokens: self.use_lang_tokens,
            noise: self.noise,
            noise_parallel: self.noise_parallel,
            ..SamplerConfig::default()
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, clip_norm: self.clip_norm, ..AdamConfig::default() }
    }
}

/// Everything the trainer reads: vocabulary, pivot language and datasets.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: Vocabulary,
    pub pivot: String,
    pub mono: Vec<MonoDataset>,
    pub parallel: Vec<ParallelDataset>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub denoise: u64,
    pub backtranslate: u64,
    pub parallel: u64,
    pub sampled_decodes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub objective: ExampleKind,
    pub dataset: String,
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub step: u64,
    pub tokens_per_sec: f64,
}

pub const METRICS_HEADER: &str = "step,objective,dataset,loss,tokens";
pub const TIMING_HEADER: &str = "step,tokens_per_sec";

/// Deterministic metrics table (no wall-clock fields).
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6},{}\n", r.step, r.objective.tag(), r.dataset, r.loss, r.tokens));
    }
    s
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from(TIMING_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{:.1}\n", r.step, r.tokens_per_sec));
    }
    s
}

#[derive(Serialize, Deserialize)]
struct Meta {
    train: TrainConfig,
    counters: Counters,
    cursors: Vec<(String, usize)>,
}

/// Training configuration recorded in a checkpoint by [`Trainer::checkpoint`].
pub fn checkpoint_train_config(ck: &Checkpoint) -> Result<TrainConfig> {
    let meta: Meta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint lacks trainer metadata: {e}")))?;
    Ok(meta.train)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub opt: Adam<f32>,
    pub step: u64,
    pub counters: Counters,
    pub metrics: Vec<MetricRow>,
    pub timing: Vec<TimingRow>,
    sampler: Sampler,
    vocab: Vocabulary,
    pivot: String,
    allowed: Vec<bool>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        if model_cfg.vocab_size != data.vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} differs from vocabulary size {}",
                model_cfg.vocab_size,
                data.vocab.len()
            )));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(model_cfg, &mut init_rng)?;
        let opt = Adam::new(cfg.adam(), &model.params)?;
        Self::assemble(cfg, model, opt, 0, Counters::default(), data)
    }

    fn assemble(
        cfg: TrainConfig,
        model: Model<f32>,
        opt: Adam<f32>,
        step: u64,
        counters: Counters,
        data: TrainData,
    ) -> Result<Self> {
        data.vocab.lang_token(&data.pivot)?;
        let sampler = Sampler::new(cfg.sampler_config(), &data.vocab, data.mono, data.parallel)?;
        let allowed = output_mask(&data.vocab);
        Ok(Trainer {
            cfg,
            model,
            opt,
            step,
            counters,
            metrics: Vec::new(),
            timing: Vec::new(),
            sampler,
            vocab: data.vocab,
            pivot: data.pivot,
            allowed,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// step counter, optimizer state, counters and data cursors are restored,
    /// so a resumed run matches an uninterrupted one.
    pub fn resume(ck: Checkpoint, data: TrainData, total_steps: Option<u64>) -> Result<Self> {
        if ck.vocab_hash != data.vocab.hash() {
            return Err(Error::Checkpoint("checkpoint was trained with a different vocabulary".into()));
        }
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint lacks trainer metadata: {e}")))?;
        let mut cfg = meta.train;
        if let Some(t) = total_steps {
            cfg.total_steps = t;
        }
        cfg.validate()?;
        let model = ck.model()?;
        let opt = match ck.optimizer {
            Some(o) => o,
            None => Adam::new(cfg.adam(), &model.params)?,
        };
        let mut t = Self::assemble(cfg, model, opt, ck.step, meta.counters, data)?;
        t.sampler.set_cursors(&meta.cursors)?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta { train: self.cfg.clone(), counters: self.counters, cursors: self.sampler.cursors() };
        Ok(Checkpoint {
            model_config: self.model.config.clone(),
            step: self.step,
            vocab_hash: self.vocab.hash(),
            meta: serde_json::to_value(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
            params: self.model.params.clone(),
            optimizer: Some(self.opt.clone()),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn lang_token(&self, lang: &str) -> Result<Option<TokenId>> {
        if !self.cfg.use_lang_tokens {
            return Ok(None);
        }
        Ok(Some(self.vocab.lang_token(lang)?))
    }

    fn bt_active(&self) -> bool {
        self.cfg.use_bt && self.step >= self.cfg.bt_start()
    }

    /// Denoising loss: reconstruct s2 from its noised copy, conditioned on
    /// V(s1) (or on nothing under the -exemplars ablation).
    pub fn denoise_loss(&self, batch: &Batch) -> Result<LossAndGrads<f32>> {
        let inputs: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.input_ids.as_slice()).collect();
        let targets: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.target_ids.as_slice()).collect();
        let exemplars: Option<Vec<&[TokenId]>> =
            batch.examples.iter().map(|e| e.exemplar_ids.as_deref()).collect();
        let attr = match (&exemplars, self.cfg.use_exemplars) {
            (Some(ex), true) => AttrSource::Exemplars(ex),
            _ => AttrSource::Disabled,
        };
        self.model.loss_and_grads(&GraphBatch { inputs: &inputs, targets: &targets, attr }, None)
    }

    /// Pivot-language corruption of each s2: sampled decoding at the BT
    /// temperature with attribute vector −V(s1). No gradient is recorded.
    pub fn backtranslate_corruption(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<TokenId>>> {
        let exemplars: Vec<&[TokenId]> = batch
            .examples
            .iter()
            .map(|e| e.exemplar_ids.as_deref().ok_or_else(|| Error::Config("back-translation needs exemplars".into())))
            .collect::<Result<_>>()?;
        let vectors = self.model.extract_batch(&exemplars)?;
        let pivot_tok = self.lang_token(&self.pivot)?;
        let mut sources = Vec::with_capacity(vectors.len());
        for (ex, v) in batch.examples.iter().zip(&vectors) {
            let s2 = &ex.target_ids[..ex.target_ids.len() - 1];
            let mut ids = Vec::with_capacity(s2.len() + 1);
            ids.extend(pivot_tok);
            ids.extend_from_slice(s2);
            sources.push(self.model.prepare_source(&ids, Some(&-v))?);
        }
        let budget = MAX_TOKENS - usize::from(self.cfg.use_lang_tokens);
        generate_batch(&self.model, &sources, &self.allowed, Some(self.cfg.bt_temperature), budget, rng)
    }

    /// Back-translation loss: reconstruct s2 from its corrupted pivot
    /// rendering, conditioned on V(s1).
    pub fn backtranslate_loss(&self, batch: &Batch, corrupted: &[Vec<TokenId>]) -> Result<LossAndGrads<f32>> {
        let lang_tok = self.lang_token(&batch.lang)?;
        let inputs: Vec<Vec<TokenId>> = corrupted
            .iter()
            .map(|c| {
                let mut v = Vec::with_capacity(c.len() + 1);
                v.extend(lang_tok);
                v.extend_from_slice(c);
                v
            })
            .collect();
        let input_refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let targets: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.target_ids.as_slice()).collect();
        let exemplars: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.exemplar_ids.as_deref().unwrap_or(&[])).collect();
        self.model.loss_and_grads(
            &GraphBatch { inputs: &input_refs, targets: &targets, attr: AttrSource::Exemplars(&exemplars) },
            None,
        )
    }

    /// Translation loss with a zero attribute vector (injection disabled,
    /// which is bitwise identical).
    pub fn translate_loss(&self, batch: &Batch) -> Result<LossAndGrads<f32>> {
        let inputs: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.input_ids.as_slice()).collect();
        let targets: Vec<&[TokenId]> = batch.examples.iter().map(|e| e.target_ids.as_slice()).collect();
        self.model.loss_and_grads(&GraphBatch { inputs: &inputs, targets: &targets, attr: AttrSource::Disabled }, None)
    }

    /// Samples the next batch and objective, applies one optimizer update.
    pub fn train_step(&mut self) -> Result<MetricRow> {
        let started = Instant::now();
        let mut rng = step_rng(self.cfg.seed, self.step);
        let batch = self.sampler.sample_batch(self.cfg.batch_size, &mut rng)?;
        let kind = match batch.kind {
            ExampleKind::Denoise if self.bt_active() && rng.gen::<f64>() < self.cfg.bt_probability => {
                ExampleKind::Backtranslate
            }
            k => k,
        };
        let mut out = match kind {
            ExampleKind::Denoise => {
                self.counters.denoise += 1;
                self.denoise_loss(&batch)?
            }
            ExampleKind::Backtranslate => {
                self.counters.backtranslate += 1;
                self.counters.sampled_decodes += 1;
                let corrupted = self.backtranslate_corruption(&batch, &mut rng)?;
                self.backtranslate_loss(&batch, &corrupted)?
            }
            ExampleKind::Parallel => {
                self.counters.parallel += 1;
                self.translate_loss(&batch)?
            }
        };
        self.opt.update(&mut self.model.params, &mut out.grads)?;
        self.step += 1;
        let row = MetricRow {
            step: self.step,
            objective: kind,
            dataset: batch.dataset,
            loss: out.loss as f64,
            tokens: out.tokens,
        };
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        let tokens: usize = batch.examples.iter().map(|e| e.input_ids.len() + e.target_ids.len()).sum();
        self.timing.push(TimingRow { step: self.step, tokens_per_sec: tokens as f64 / secs });
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Trains until `cfg.total_steps`, calling `on_step` after every update.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &MetricRow)) -> Result<()> {
        while self.step < self.cfg.total_steps {
            let row = self.train_step()?;
            on_step(self, &row);
        }
        Ok(())
    }
}

/// Mean loss of the last `n` rows of one objective.
pub fn recent_loss(rows: &[MetricRow], objective: ExampleKind, n: usize) -> Option<f64> {
    let picked: Vec<f64> = rows.iter().rev().filter(|r| r.objective == objective).take(n).map(|r| r.loss).collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

#[cfg(test)]
mod tests;
