//! Training data: span-pair extraction, token noise and batch sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthlang::{CorpusLine, ParallelLine};
use crate::tokenizer::{TokenId, Vocabulary, EOS};

/// Hard cap on any model-facing sequence after special tokens are attached.
pub const MAX_TOKENS: usize = 64;
pub const MIN_SPAN: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanPair {
    pub exemplar_ids: Vec<TokenId>,
    pub input_ids: Vec<TokenId>,
    /// Token offsets of the two spans within the source line.
    pub exemplar_range: (usize, usize),
    pub input_range: (usize, usize),
}

/// Picks two non-overlapping spans; the earlier one is the exemplar.
///
/// Span lengths are uniform in `[min_len, remaining budget]` and placements are
/// uniform among all valid gap compositions.
pub fn extract_span_pair(line: &[TokenId], min_len: usize, max_len: usize, rng: &mut impl Rng) -> Option<SpanPair> {
    let n = line.len();
    if min_len == 0 || max_len < min_len || n < 2 * min_len {
        return None;
    }
    let a = rng.gen_range(min_len..=max_len.min(n - min_len));
    let b = rng.gen_range(min_len..=max_len.min(n - a));
    let slack = n - a - b;
    // Choose two distinct slots out of slack + 2 (stars and bars).
    let slots = slack + 2;
    let i = rng.gen_range(0..slots);
    let mut j = rng.gen_range(0..slots - 1);
    if j >= i {
        j += 1;
    }
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    let gap0 = i;
    let gap1 = j - i - 1;
    let s1 = gap0;
    let s2 = s1 + a + gap1;
    Some(SpanPair {
        exemplar_ids: line[s1..s1 + a].to_vec(),
        input_ids: line[s2..s2 + b].to_vec(),
        exemplar_range: (s1, s1 + a),
        input_range: (s2, s2 + b),
    })
}

/// Per-token corruption probabilities; the remainder keeps the token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub p_replace: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { p_drop: 0.1, p_replace: 0.1 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.p_drop)
            && (0.0..=1.0).contains(&self.p_replace)
            && self.p_drop + self.p_replace <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "noise probabilities must lie in [0,1] and sum to at most 1 (drop {}, replace {})",
                self.p_drop, self.p_replace
            )))
        }
    }
}

/// Drops, replaces (with the same-position token of a random batch neighbor)
/// or keeps each token independently.
pub fn apply_token_noise(
    input: &[TokenId],
    neighbors: &[&[TokenId]],
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(input.len());
    for (pos, &tok) in input.iter().enumerate() {
        let u: f64 = rng.gen();
        if u < cfg.p_drop {
            continue;
        }
        if u < cfg.p_drop + cfg.p_replace && !neighbors.is_empty() {
            let other = neighbors[rng.gen_range(0..neighbors.len())];
            out.push(other.get(pos).copied().unwrap_or(tok));
        } else {
            out.push(tok);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Denoise,
    Backtranslate,
    Parallel,
}

impl ExampleKind {
    pub fn tag(self) -> &'static str {
        match self {
            ExampleKind::Denoise => "denoise",
            ExampleKind::Backtranslate => "backtranslate",
            ExampleKind::Parallel => "parallel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub kind: ExampleKind,
    /// Model input, language token included when enabled.
    pub input_ids: Vec<TokenId>,
    /// Decoder target, EOS included.
    pub target_ids: Vec<TokenId>,
    /// Exemplar span without the extraction token; absent for parallel data.
    pub exemplar_ids: Option<Vec<TokenId>>,
    pub target_lang: String,
}

impl TrainingExample {
    pub fn within_caps(&self) -> bool {
        self.input_ids.len() <= MAX_TOKENS
            && self.target_ids.len() <= MAX_TOKENS
            && self.exemplar_ids.as_ref().is_none_or(|e| e.len() + 1 <= MAX_TOKENS)
    }
}

/// Parallel example `src -> tgt` with no exemplar. Returns `None` when either
/// side would exceed the token cap.
pub fn make_parallel_example(
    src_ids: &[TokenId],
    tgt_ids: &[TokenId],
    tgt_lang: &str,
    lang_token: Option<TokenId>,
) -> Option<TrainingExample> {
    let mut input = Vec::with_capacity(src_ids.len() + 1);
    input.extend(lang_token);
    input.extend_from_slice(src_ids);
    let mut target = tgt_ids.to_vec();
    target.push(EOS);
    let ex = TrainingExample {
        kind: ExampleKind::Parallel,
        input_ids: input,
        target_ids: target,
        exemplar_ids: None,
        target_lang: tgt_lang.to_string(),
    };
    (ex.within_caps() && !src_ids.is_empty() && !tgt_ids.is_empty()).then_some(ex)
}

#[derive(Clone, Debug)]
pub struct MonoDataset {
    pub name: String,
    pub lang: String,
    pub lines: Vec<Vec<TokenId>>,
    cursor: usize,
}

impl MonoDataset {
    pub fn new(name: impl Into<String>, lang: impl Into<String>, lines: Vec<Vec<TokenId>>) -> Self {
        MonoDataset { name: name.into(), lang: lang.into(), lines, cursor: 0 }
    }

    pub fn from_corpus(vocab: &Vocabulary, lang: &str, corpus: &[CorpusLine]) -> Self {
        let lines = corpus.iter().filter(|l| l.lang_id == lang).map(|l| vocab.encode(&l.text)).collect();
        MonoDataset::new(format!("mono:{lang}"), lang, lines)
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    // Cycles through the data in file order once exhausted.
    fn next_line(&mut self) -> &[TokenId] {
        let i = self.cursor % self.lines.len();
        self.cursor = (self.cursor + 1) % self.lines.len();
        &self.lines[i]
    }
}

#[derive(Clone, Debug)]
pub struct ParallelDataset {
    pub name: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    cursor: usize,
}

impl ParallelDataset {
    pub fn new(
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
        pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    ) -> Self {
        let (s, t) = (src_lang.into(), tgt_lang.into());
        ParallelDataset { name: format!("para:{s}-{t}"), src_lang: s, tgt_lang: t, pairs, cursor: 0 }
    }

    pub fn from_lines(vocab: &Vocabulary, lines: &[ParallelLine], reverse: bool) -> Result<Self> {
        let first = lines.first().ok_or_else(|| Error::NoData("empty parallel corpus".into()))?;
        let (src, tgt) = if reverse {
            (first.tgt_lang.clone(), first.src_lang.clone())
        } else {
            (first.src_lang.clone(), first.tgt_lang.clone())
        };
        let pairs = lines
            .iter()
            .map(|l| {
                let (s, t) = (vocab.encode(&l.src), vocab.encode(&l.tgt));
                if reverse {
                    (t, s)
                } else {
                    (s, t)
                }
            })
            .collect();
        Ok(ParallelDataset::new(src, tgt, pairs))
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    fn next_pair(&mut self) -> &(Vec<TokenId>, Vec<TokenId>) {
        let i = self.cursor % self.pairs.len();
        self.cursor = (self.cursor + 1) % self.pairs.len();
        &self.pairs[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability of drawing a parallel batch when parallel data is in use.
    pub parallel_probability: f64,
    pub use_parallel: bool,
    pub use_exemplars: bool,
    pub use_lang_tokens: bool,
    pub noise: NoiseConfig,
    /// Apply token noise to the source side of parallel examples too.
    pub noise_parallel: bool,
    pub min_span: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            parallel_probability: 0.5,
            use_parallel: true,
            use_exemplars: true,
            use_lang_tokens: true,
            noise: NoiseConfig::default(),
            noise_parallel: false,
            min_span: MIN_SPAN,
        }
    }
}

/// One homogeneous batch: every example comes from the same dataset.
#[derive(Clone, Debug)]
pub struct Batch {
    pub kind: ExampleKind,
    pub dataset: String,
    pub lang: String,
    pub examples: Vec<TrainingExample>,
}

#[derive(Clone, Debug)]
pub struct Sampler {
    pub cfg: SamplerConfig,
    pub mono: Vec<MonoDataset>,
    pub parallel: Vec<ParallelDataset>,
    lang_tokens: Vec<(String, TokenId)>,
}

impl Sampler {
    pub fn new(
        cfg: SamplerConfig,
        vocab: &Vocabulary,
        mono: Vec<MonoDataset>,
        parallel: Vec<ParallelDataset>,
    ) -> Result<Self> {
        cfg.noise.validate()?;
        if !(0.0..=1.0).contains(&cfg.parallel_probability) {
            return Err(Error::Config("parallel_probability must lie in [0,1]".into()));
        }
        let mono: Vec<_> = mono.into_iter().filter(|d| !d.lines.is_empty()).collect();
        let parallel: Vec<_> = parallel.into_iter().filter(|d| !d.pairs.is_empty()).collect();
        if mono.is_empty() && (parallel.is_empty() || !cfg.use_parallel) {
            return Err(Error::NoData("no non-empty dataset available".into()));
        }
        let mut lang_tokens = Vec::new();
        for l in vocab.languages() {
            let id = vocab.lang_token(&l)?;
            lang_tokens.push((l, id));
        }
        Ok(Sampler { cfg, mono, parallel, lang_tokens })
    }

    pub fn lang_token(&self, lang: &str) -> Result<Option<TokenId>> {
        if !self.cfg.use_lang_tokens {
            return Ok(None);
        }
        self.lang_tokens
            .iter()
            .find(|(l, _)| l == lang)
            .map(|(_, id)| Some(*id))
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
    }

    /// Read positions of every dataset, keyed by dataset name.
    pub fn cursors(&self) -> Vec<(String, usize)> {
        let mono = self.mono.iter().map(|d| (d.name.clone(), d.cursor));
        mono.chain(self.parallel.iter().map(|d| (d.name.clone(), d.cursor))).collect()
    }

    pub fn set_cursors(&mut self, cursors: &[(String, usize)]) -> Result<()> {
        for (name, c) in cursors {
            if let Some(d) = self.mono.iter_mut().find(|d| &d.name == name) {
                d.cursor = c % d.lines.len();
            } else if let Some(d) = self.parallel.iter_mut().find(|d| &d.name == name) {
                d.cursor = c % d.pairs.len();
            } else {
                return Err(Error::Config(format!("unknown dataset `{name}` in saved cursors")));
            }
        }
        Ok(())
    }

    fn parallel_enabled(&self) -> bool {
        self.cfg.use_parallel && !self.parallel.is_empty()
    }

    /// Draws the category (parallel vs mono), then a dataset uniformly within
    /// it, then `batch_size` examples from that dataset.
    pub fn sample_batch(&mut self, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let parallel = if self.mono.is_empty() {
            true
        } else if self.parallel_enabled() {
            rng.gen::<f64>() < self.cfg.parallel_probability
        } else {
            false
        };
        if parallel {
            let d = rng.gen_range(0..self.parallel.len());
            self.parallel_batch(d, batch_size, rng)
        } else {
            let d = rng.gen_range(0..self.mono.len());
            self.mono_batch(d, batch_size, rng)
        }
    }

    fn parallel_batch(&mut self, d: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
        let tgt_lang = self.parallel[d].tgt_lang.clone();
        let lang_tok = self.lang_token(&tgt_lang)?;
        let noise = self.cfg.noise_parallel.then_some(self.cfg.noise);
        let mut examples = Vec::with_capacity(batch_size);
        let mut raw: Vec<(Vec<TokenId>, Vec<TokenId>)> = Vec::with_capacity(batch_size);
        let mut attempts = 0;
        while raw.len() < batch_size {
            attempts += 1;
            if attempts > 4 * batch_size + self.parallel[d].pairs.len() {
                return Err(Error::NoData(format!("dataset {} has no usable pairs", self.parallel[d].name)));
            }
            let (s, t) = self.parallel[d].next_pair().clone();
            if make_parallel_example(&s, &t, &tgt_lang, lang_tok).is_some() {
                raw.push((s, t));
            }
        }
        for i in 0..raw.len() {
            let src = match &noise {
                Some(cfg) => {
                    let neighbors: Vec<&[TokenId]> =
                        raw.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.0.as_slice()).collect();
                    apply_token_noise(&raw[i].0, &neighbors, cfg, rng)
                }
                None => raw[i].0.clone(),
            };
            if let Some(ex) = make_parallel_example(&src, &raw[i].1, &tgt_lang, lang_tok) {
                examples.push(ex);
            } else if let Some(ex) = make_parallel_example(&raw[i].0, &raw[i].1, &tgt_lang, lang_tok) {
                examples.push(ex);
            }
        }
        Ok(Batch {
            kind: ExampleKind::Parallel,
            dataset: self.parallel[d].name.clone(),
            lang: tgt_lang,
            examples,
        })
    }

    fn mono_batch(&mut self, d: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
        let lang = self.mono[d].lang.clone();
        let lang_tok = self.lang_token(&lang)?;
        // Leave room for the language token on the input and EOS on the target.
        let max_span = MAX_TOKENS - 1;
        let min_span = self.cfg.min_span;
        let mut pairs = Vec::with_capacity(batch_size);
        let mut attempts = 0;
        while pairs.len() < batch_size {
            attempts += 1;
            if attempts > 4 * batch_size + self.mono[d].lines.len() {
                return Err(Error::NoData(format!("dataset {} has no line long enough for a span pair", self.mono[d].name)));
            }
            let line = self.mono[d].next_line().to_vec();
            if let Some(p) = extract_span_pair(&line, min_span, max_span, rng) {
                pairs.push(p);
            }
        }
        let mut examples = Vec::with_capacity(batch_size);
        for i in 0..pairs.len() {
            let neighbors: Vec<&[TokenId]> =
                pairs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.input_ids.as_slice()).collect();
            let noised = apply_token_noise(&pairs[i].input_ids, &neighbors, &self.cfg.noise, rng);
            let mut input = Vec::with_capacity(noised.len() + 1);
            input.extend(lang_tok);
            input.extend(noised);
            let mut target = pairs[i].input_ids.clone();
            target.push(EOS);
            examples.push(TrainingExample {
                kind: ExampleKind::Denoise,
                input_ids: input,
                target_ids: target,
                exemplar_ids: self.cfg.use_exemplars.then(|| pairs[i].exemplar_ids.clone()),
                target_lang: lang.clone(),
            });
        }
        Ok(Batch { kind: ExampleKind::Denoise, dataset: self.mono[d].name.clone(), lang, examples })
    }
}
