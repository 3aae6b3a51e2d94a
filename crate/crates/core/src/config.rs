//! Flat `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Lists are comma-separated. Unknown or repeated keys are errors. Later
//! layers (command-line overrides) replace earlier ones (files).

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::bundle::DataConfig;
use crate::error::{Error, Result};
use crate::experiment::EvalPlan;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    /// `vocab_size` is ignored here; it comes from the generated vocabulary.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalPlan,
    pub service_bind: String,
    pub service_max_concurrent: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            model: ModelConfig::new(0),
            train: TrainConfig::default(),
            eval: EvalPlan::default(),
            service_bind: "127.0.0.1:8080".into(),
            service_max_concurrent: 4,
        }
    }
}

/// Every accepted key with a one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "sets data.seed, train.seed and eval.seed together"),
    ("data.concept_count", "concepts shared by all languages (>= 50)"),
    ("data.pivot_seed", "seed of the pivot language"),
    ("data.supervised_seeds", "languages with pivot parallel data"),
    ("data.unsupervised_seeds", "languages with monolingual data only"),
    ("data.attr_id", "attribute name"),
    ("data.attr_values", "attribute values"),
    ("data.markers_per_value", "marker words per value and language"),
    ("data.mono_lines", "monolingual lines per language"),
    ("data.parallel_lines", "parallel lines per supervised language"),
    ("data.seed", "corpus sampling seed"),
    ("model.d_model", "hidden size"),
    ("model.n_enc_layers", "encoder layers"),
    ("model.n_dec_layers", "decoder layers"),
    ("model.n_heads", "attention heads"),
    ("model.d_ff", "feed-forward size"),
    ("model.max_len", "maximum sequence length including special tokens"),
    ("model.dropout", "dropout rate during training"),
    ("train.learning_rate", "Adam learning rate"),
    ("train.total_steps", "optimizer steps"),
    ("train.batch_size", "examples per batch"),
    ("train.p_drop", "token drop probability of the corruption"),
    ("train.p_replace", "token replacement probability of the corruption"),
    ("train.noise_parallel", "also corrupt parallel sources"),
    ("train.parallel_probability", "probability of a parallel batch"),
    ("train.bt_temperature", "sampling temperature of back-translation"),
    ("train.bt_start_step", "first back-translation step; `auto` = 20% of total_steps"),
    ("train.bt_probability", "share of eligible mono batches used for back-translation"),
    ("train.use_parallel", "train on parallel data"),
    ("train.use_lang_tokens", "prepend target-language tokens"),
    ("train.use_exemplars", "condition on exemplar attribute vectors"),
    ("train.use_bt", "use back-translation"),
    ("train.clip_norm", "global gradient norm cap"),
    ("train.seed", "initialization and batch sampling seed"),
    ("eval.per_value", "evaluation inputs per language and value"),
    ("eval.exemplars_per_value", "pivot exemplars per value"),
    ("eval.translation_lines", "held-out lines per translation direction"),
    ("eval.within_lambdas", "λ values of within-language sweeps"),
    ("eval.cross_lambdas", "λ values of cross-language sweeps"),
    ("eval.seed", "evaluation data seed"),
    ("service.bind", "listen address"),
    ("service.max_concurrent", "requests served at once; excess gets 429"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => {
                let s = parse(key, v)?;
                self.data.seed = s;
                self.train.seed = s;
                self.eval.seed = s;
            }
            "data.concept_count" => self.data.concept_count = parse(key, v)?,
            "data.pivot_seed" => self.data.pivot_seed = parse(key, v)?,
            "data.supervised_seeds" => self.data.supervised_seeds = parse_list(key, v)?,
            "data.unsupervised_seeds" => self.data.unsupervised_seeds = parse_list(key, v)?,
            "data.attr_id" => self.data.attr_id = v.to_string(),
            "data.attr_values" => self.data.attr_values = parse_list(key, v)?,
            "data.markers_per_value" => self.data.markers_per_value = parse(key, v)?,
            "data.mono_lines" => self.data.mono_lines = parse(key, v)?,
            "data.parallel_lines" => self.data.parallel_lines = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.n_enc_layers" => self.model.n_enc_layers = parse(key, v)?,
            "model.n_dec_layers" => self.model.n_dec_layers = parse(key, v)?,
            "model.n_heads" => self.model.n_heads = parse(key, v)?,
            "model.d_ff" => self.model.d_ff = parse(key, v)?,
            "model.max_len" => self.model.max_len = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.total_steps" => self.train.total_steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.p_drop" => self.train.noise.p_drop = parse(key, v)?,
            "train.p_replace" => self.train.noise.p_replace = parse(key, v)?,
            "train.noise_parallel" => self.train.noise_parallel = parse_bool(key, v)?,
            "train.parallel_probability" => self.train.parallel_probability = parse(key, v)?,
            "train.bt_temperature" => self.train.bt_temperature = parse(key, v)?,
            "train.bt_start_step" => {
                self.train.bt_start_step = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "train.bt_probability" => self.train.bt_probability = parse(key, v)?,
            "train.use_parallel" => self.train.use_parallel = parse_bool(key, v)?,
            "train.use_lang_tokens" => self.train.use_lang_tokens = parse_bool(key, v)?,
            "train.use_exemplars" => self.train.use_exemplars = parse_bool(key, v)?,
            "train.use_bt" => self.train.use_bt = parse_bool(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "eval.per_value" => self.eval.per_value = parse(key, v)?,
            "eval.exemplars_per_value" => self.eval.exemplars_per_value = parse(key, v)?,
            "eval.translation_lines" => self.eval.translation_lines = parse(key, v)?,
            "eval.within_lambdas" => self.eval.within_lambdas = parse_list(key, v)?,
            "eval.cross_lambdas" => self.eval.cross_lambdas = parse_list(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "service.bind" => self.service_bind = v.to_string(),
            "service.max_concurrent" => self.service_max_concurrent = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.train.seed.to_string(),
            "data.concept_count" => self.data.concept_count.to_string(),
            "data.pivot_seed" => self.data.pivot_seed.to_string(),
            "data.supervised_seeds" => join(&self.data.supervised_seeds),
            "data.unsupervised_seeds" => join(&self.data.unsupervised_seeds),
            "data.attr_id" => self.data.attr_id.clone(),
            "data.attr_values" => join(&self.data.attr_values),
            "data.markers_per_value" => self.data.markers_per_value.to_string(),
            "data.mono_lines" => self.data.mono_lines.to_string(),
            "data.parallel_lines" => self.data.parallel_lines.to_string(),
            "data.seed" => self.data.seed.to_string(),
            "model.d_model" => self.model.d_model.to_string(),
            "model.n_enc_layers" => self.model.n_enc_layers.to_string(),
            "model.n_dec_layers" => self.model.n_dec_layers.to_string(),
            "model.n_heads" => self.model.n_heads.to_string(),
            "model.d_ff" => self.model.d_ff.to_string(),
            "model.max_len" => self.model.max_len.to_string(),
            "model.dropout" => self.model.dropout.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.total_steps" => self.train.total_steps.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.p_drop" => self.train.noise.p_drop.to_string(),
            "train.p_replace" => self.train.noise.p_replace.to_string(),
            "train.noise_parallel" => self.train.noise_parallel.to_string(),
            "train.parallel_probability" => self.train.parallel_probability.to_string(),
            "train.bt_temperature" => self.train.bt_temperature.to_string(),
            "train.bt_start_step" => self.train.bt_start_step.map_or("auto".into(), |s| s.to_string()),
            "train.bt_probability" => self.train.bt_probability.to_string(),
            "train.use_parallel" => self.train.use_parallel.to_string(),
            "train.use_lang_tokens" => self.train.use_lang_tokens.to_string(),
            "train.use_exemplars" => self.train.use_exemplars.to_string(),
            "train.use_bt" => self.train.use_bt.to_string(),
            "train.clip_norm" => self.train.clip_norm.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "eval.per_value" => self.eval.per_value.to_string(),
            "eval.exemplars_per_value" => self.eval.exemplars_per_value.to_string(),
            "eval.translation_lines" => self.eval.translation_lines.to_string(),
            "eval.within_lambdas" => join(&self.eval.within_lambdas),
            "eval.cross_lambdas" => join(&self.eval.cross_lambdas),
            "eval.seed" => self.eval.seed.to_string(),
            "service.bind" => self.service_bind.clone(),
            "service.max_concurrent" => self.service_max_concurrent.to_string(),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        })
    }

    /// Applies `key = value` lines. `origin` names the source in errors.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("{origin}:{}: `{key}` is set twice", n + 1)));
            }
            self.set(key, value).map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (key, value) =
            item.split_once('=').ok_or_else(|| Error::Config(format!("override `{item}` is not `key=value`")))?;
        self.set(key.trim(), value)
    }

    /// Effective configuration in the file format, one line per key. The
    /// output parses back to an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, _) in KEYS.iter().filter(|(k, _)| *k != "seed") {
            s.push_str(key);
            s.push_str(" = ");
            s.push_str(&self.get(key).expect("listed key"));
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        ModelConfig { vocab_size: 64, ..self.model.clone() }.validate()?;
        if self.service_max_concurrent == 0 {
            return Err(Error::Config("service.max_concurrent must be positive".into()));
        }
        Ok(())
    }
}
