//! Attribute-vector arithmetic and decoding.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttributeVector, DecoderState, EncodedSource, Model};
use crate::synthlang::LanguageIndex;
use crate::tokenizer::{TokenId, Vocabulary, EOS};

pub const MAX_LAMBDA: f64 = 20.0;
pub const MAX_INPUT_TOKENS: usize = 64;
pub const DEFAULT_MAX_LEN: usize = 64;
/// Sampling temperatures below this decode greedily.
pub const GREEDY_CUTOFF: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Within,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam { k: usize },
    Sample { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(flatten)]
    pub strategy: Strategy,
    /// Maximum generated tokens, EOS included.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Seed of the per-request sampling RNG.
    #[serde(default)]
    pub seed: u64,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl DecodeConfig {
    pub fn new(strategy: Strategy) -> Self {
        DecodeConfig { strategy, max_len: DEFAULT_MAX_LEN, seed: 0 }
    }

    pub fn beam(k: usize) -> Self {
        Self::new(Strategy::Beam { k })
    }

    pub fn greedy() -> Self {
        Self::new(Strategy::Greedy)
    }

    /// Beam 5 for within-language rewriting and plain translation, beam 1
    /// for cross-language attribute transfer.
    pub fn default_for(mode: Mode, lambda: f64) -> Self {
        match mode {
            Mode::Cross if lambda > 0.0 => Self::beam(1),
            _ => Self::beam(5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Beam { k } if k < 1 => return Err(Error::InvalidArgument("beam size must be at least 1".into())),
            Strategy::Sample { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                return Err(Error::InvalidArgument("temperature must be positive".into()))
            }
            _ => {}
        }
        if self.max_len == 0 || self.max_len > DEFAULT_MAX_LEN {
            return Err(Error::InvalidArgument(format!("max_len must lie in 1..={DEFAULT_MAX_LEN}")));
        }
        Ok(())
    }
}

/// `V_x + λ(V_B − V_A)` within a language, `λ(V_B − V_A)` across languages.
pub fn delta_vector(
    v_x: Option<&AttributeVector>,
    v_a: &AttributeVector,
    v_b: &AttributeVector,
    lambda: f64,
    mode: Mode,
) -> Result<AttributeVector> {
    if v_a.dim() != v_b.dim() {
        return Err(Error::Shape(format!("V_A has length {}, V_B has length {}", v_a.dim(), v_b.dim())));
    }
    if !lambda.is_finite() {
        return Err(Error::InvalidArgument("lambda must be finite".into()));
    }
    let l = lambda as f32;
    let scaled = (&v_b.0 - &v_a.0) * l;
    match mode {
        Mode::Cross => Ok(AttributeVector(scaled)),
        Mode::Within => {
            let x = v_x.ok_or_else(|| Error::InvalidArgument("within-language mode requires V_x".into()))?;
            if x.dim() != v_a.dim() {
                return Err(Error::Shape(format!("V_x has length {}, V_A has length {}", x.dim(), v_a.dim())));
            }
            Ok(AttributeVector(&x.0 + &scaled))
        }
    }
}

/// Incremental next-token scorer driven by the decoding algorithms.
pub trait StepScorer {
    type State: Clone;
    fn initial(&self) -> Self::State;
    /// Log-probabilities of the next token for every state. Each state
    /// consumes its pending token.
    fn log_probs(&self, states: &mut [Self::State]) -> Result<Vec<Vec<f64>>>;
    /// Sets the pending token of `state`.
    fn feed(&self, state: &mut Self::State, token: TokenId);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, EOS included when the hypothesis finished.
    pub tokens: Vec<TokenId>,
    /// Cumulative log-probability.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalized score: cumulative log-probability per token.
    pub fn normalized(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut state = scorer.initial();
    let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    while h.tokens.len() < max_len {
        let lp = scorer.log_probs(std::slice::from_mut(&mut state))?.remove(0);
        let t = argmax(&lp);
        h.log_prob += lp[t as usize];
        h.tokens.push(t);
        if t == EOS {
            h.finished = true;
            break;
        }
        scorer.feed(&mut state, t);
    }
    Ok(h)
}

/// Ancestral sampling from `softmax(log p / temperature)`; temperatures below
/// [`GREEDY_CUTOFF`] decode greedily.
pub fn sample<S: StepScorer>(scorer: &S, temperature: f64, max_len: usize, rng: &mut dyn RngCore) -> Result<Hypothesis> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    if temperature < GREEDY_CUTOFF {
        return greedy(scorer, max_len);
    }
    let mut state = scorer.initial();
    let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    while h.tokens.len() < max_len {
        let lp = scorer.log_probs(std::slice::from_mut(&mut state))?.remove(0);
        let t = sample_index(&lp, temperature, rng);
        h.log_prob += lp[t as usize];
        h.tokens.push(t);
        if t == EOS {
            h.finished = true;
            break;
        }
        scorer.feed(&mut state, t);
    }
    Ok(h)
}

fn sample_index(log_probs: &[f64], temperature: f64, rng: &mut dyn RngCore) -> TokenId {
    let max = log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_probs.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i as TokenId;
            }
            u -= w;
        }
    }
    last as TokenId
}

/// Beam search. Each step keeps the `k` best continuations of all live beams
/// by cumulative log-probability (ties: lower token id, then earlier beam);
/// continuations ending in EOS leave the beam. The result maximizes the
/// length-normalized score among finished hypotheses and, if any beam hit
/// `max_len`, those too.
pub fn beam_search<S: StepScorer>(scorer: &S, k: usize, max_len: usize) -> Result<Hypothesis> {
    Ok(beam_search_many(scorer, vec![scorer.initial()], k, max_len)?.remove(0))
}

/// Independent beam searches, one per initial state, sharing scorer calls.
/// Each result equals a separate [`beam_search`] from that state.
pub fn beam_search_many<S: StepScorer>(
    scorer: &S,
    initials: Vec<S::State>,
    k: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if k < 1 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    let empty = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    let mut live: Vec<Vec<(Hypothesis, S::State)>> = initials.into_iter().map(|s| vec![(empty.clone(), s)]).collect();
    let mut done: Vec<Vec<Hypothesis>> = vec![Vec::new(); live.len()];
    for _ in 0..max_len {
        if live.iter().all(Vec::is_empty) {
            break;
        }
        let mut states: Vec<S::State> = live.iter().flatten().map(|(_, s)| s.clone()).collect();
        let mut lps = scorer.log_probs(&mut states)?.into_iter();
        let mut states = states.into_iter();
        for (q, beams) in live.iter_mut().enumerate() {
            let lp: Vec<Vec<f64>> = lps.by_ref().take(beams.len()).collect();
            let st: Vec<S::State> = states.by_ref().take(beams.len()).collect();
            let mut cands: Vec<(f64, TokenId, usize)> = Vec::new();
            for (b, row) in lp.iter().enumerate() {
                for (t, &l) in row.iter().enumerate() {
                    if l > f64::NEG_INFINITY {
                        cands.push((beams[b].0.log_prob + l, t as TokenId, b));
                    }
                }
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            cands.truncate(k);
            let mut next = Vec::with_capacity(cands.len());
            for (score, t, b) in cands {
                let mut h = beams[b].0.clone();
                h.tokens.push(t);
                h.log_prob = score;
                if t == EOS {
                    h.finished = true;
                    done[q].push(h);
                } else {
                    let mut s = st[b].clone();
                    scorer.feed(&mut s, t);
                    next.push((h, s));
                }
            }
            *beams = next;
        }
    }
    live.into_iter()
        .zip(done)
        .map(|(beams, mut finished)| {
            finished.extend(beams.into_iter().map(|(h, _)| h));
            finished
                .into_iter()
                .max_by(|a, b| a.normalized().total_cmp(&b.normalized()).then_with(|| b.tokens.cmp(&a.tokens)))
                .ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))
        })
        .collect()
}

/// Model-backed scorer over prepared sources, restricted to tokens the
/// decoder may emit. [`StepScorer::initial`] starts from the first source.
pub struct ModelScorer<'a> {
    pub model: &'a Model<f32>,
    pub sources: Vec<&'a EncodedSource<f32>>,
    pub allowed: &'a [bool],
}

#[derive(Clone, Debug)]
pub struct ScorerState {
    pub source: usize,
    pub decoder: DecoderState<f32>,
}

impl ModelScorer<'_> {
    pub fn initial_for(&self, source: usize) -> ScorerState {
        ScorerState { source, decoder: self.model.start_state() }
    }
}

pub(crate) fn masked_log_softmax(row: ndarray::ArrayView1<f32>, allowed: &[bool]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().zip(allowed).filter(|(_, &a)| a).map(|(&v, _)| (v as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().zip(allowed).map(|(&v, &a)| if a { v as f64 - lse } else { f64::NEG_INFINITY }).collect()
}

impl StepScorer for ModelScorer<'_> {
    type State = ScorerState;

    fn initial(&self) -> Self::State {
        self.initial_for(0)
    }

    fn log_probs(&self, states: &mut [Self::State]) -> Result<Vec<Vec<f64>>> {
        let srcs: Vec<&EncodedSource<f32>> = states.iter().map(|s| self.sources[s.source]).collect();
        let mut dec: Vec<DecoderState<f32>> = states.iter_mut().map(|s| std::mem::take(&mut s.decoder)).collect();
        let logits = self.model.decode_step(&srcs, &mut dec);
        for (s, d) in states.iter_mut().zip(dec) {
            s.decoder = d;
        }
        Ok(logits?.outer_iter().map(|r| masked_log_softmax(r, self.allowed)).collect())
    }

    fn feed(&self, state: &mut Self::State, token: TokenId) {
        self.model.advance(&mut state.decoder, token)
    }
}

/// Pins a scorer's starting state.
struct Single<'a, S: StepScorer> {
    inner: &'a S,
    init: S::State,
}

impl<S: StepScorer> StepScorer for Single<'_, S> {
    type State = S::State;

    fn initial(&self) -> Self::State {
        self.init.clone()
    }

    fn log_probs(&self, states: &mut [Self::State]) -> Result<Vec<Vec<f64>>> {
        self.inner.log_probs(states)
    }

    fn feed(&self, state: &mut Self::State, token: TokenId) {
        self.inner.feed(state, token)
    }
}

/// Tokens the decoder may emit: EOS and every non-special word.
pub fn output_mask(vocab: &Vocabulary) -> Vec<bool> {
    (0..vocab.len() as TokenId).map(|t| t == EOS || !vocab.is_special(t)).collect()
}

/// Samples (or greedily decodes when `temperature` is None) many sources in
/// one batched pass. Returns generated ids without EOS.
pub fn generate_batch(
    model: &Model<f32>,
    sources: &[EncodedSource<f32>],
    allowed: &[bool],
    temperature: Option<f64>,
    max_len: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<TokenId>>> {
    let n = sources.len();
    let mut outputs: Vec<Vec<TokenId>> = vec![Vec::new(); n];
    let mut live: Vec<usize> = (0..n).collect();
    let mut states: Vec<DecoderState<f32>> = (0..n).map(|_| model.start_state()).collect();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let srcs: Vec<&EncodedSource<f32>> = live.iter().map(|&i| &sources[i]).collect();
        let logits = model.decode_step(&srcs, &mut states)?;
        let mut still = Vec::with_capacity(live.len());
        let mut next_states = Vec::with_capacity(live.len());
        for ((row, &i), mut st) in logits.outer_iter().zip(&live).zip(states.drain(..)) {
            let lp = masked_log_softmax(row, allowed);
            let t = match temperature {
                Some(temp) if temp >= GREEDY_CUTOFF => sample_index(&lp, temp, rng),
                _ => argmax(&lp),
            };
            if t == EOS {
                continue;
            }
            outputs[i].push(t);
            model.advance(&mut st, t);
            still.push(i);
            next_states.push(st);
        }
        live = still;
        states = next_states;
    }
    Ok(outputs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub input_text: String,
    pub target_lang: String,
    #[serde(default)]
    pub exemplars_a: Vec<String>,
    #[serde(default)]
    pub exemplars_b: Vec<String>,
    pub lambda: f64,
    pub mode: Mode,
    /// None selects the mode's default decoding.
    #[serde(default)]
    pub decode: Option<DecodeConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriteResult {
    pub output_text: String,
    pub output_ids: Vec<TokenId>,
    pub attribute_delta_norm: f64,
    pub decode: DecodeConfig,
    pub steps: usize,
    pub finished: bool,
}

/// Loaded model plus vocabulary, ready to serve rewrite requests.
pub struct Engine {
    pub model: Model<f32>,
    pub vocab: Vocabulary,
    pub use_lang_tokens: bool,
    pub model_id: String,
    allowed: Vec<bool>,
    languages: Option<LanguageIndex>,
    attribute_conditioning: bool,
}

impl Engine {
    pub fn new(model: Model<f32>, vocab: Vocabulary, use_lang_tokens: bool) -> Result<Self> {
        if model.config.vocab_size != vocab.len() {
            return Err(Error::Shape(format!(
                "model vocabulary size {} differs from vocabulary size {}",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        let allowed = output_mask(&vocab);
        let model_id = format!("urw-{}", &vocab.hash()[..12]);
        Ok(Engine { model, vocab, use_lang_tokens, model_id, allowed, languages: None, attribute_conditioning: true })
    }

    /// Enables the within-mode check that the input is in the target language.
    pub fn with_language_index(mut self, index: LanguageIndex) -> Self {
        self.languages = Some(index);
        self
    }

    /// For models trained without exemplar conditioning: requests are still
    /// validated, but the injected vector is always zero.
    pub fn without_attribute_conditioning(mut self) -> Self {
        self.attribute_conditioning = false;
        self
    }

    pub fn attribute_conditioning(&self) -> bool {
        self.attribute_conditioning
    }

    pub fn allowed_tokens(&self) -> &[bool] {
        &self.allowed
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let ids = self.vocab.encode(text);
        if ids.is_empty() {
            return Err(Error::InvalidArgument("input text is empty".into()));
        }
        if ids.len() > MAX_INPUT_TOKENS {
            return Err(Error::TooLong { len: ids.len(), max: MAX_INPUT_TOKENS });
        }
        Ok(ids)
    }

    /// Mean attribute vector of an exemplar set.
    pub fn attribute(&self, exemplars: &[String]) -> Result<AttributeVector> {
        if exemplars.is_empty() {
            return Err(Error::InvalidArgument("exemplar set must not be empty".into()));
        }
        let ids: Vec<Vec<TokenId>> = exemplars.iter().map(|e| self.tokenize(e)).collect::<Result<_>>()?;
        let refs: Vec<&[TokenId]> = ids.iter().map(Vec::as_slice).collect();
        self.model.extract_attribute_set(&refs)
    }

    /// Encoder input for `text` with the target-language token prepended
    /// (unless language tokens are disabled).
    pub fn source_ids(&self, ids: &[TokenId], target_lang: &str) -> Result<Vec<TokenId>> {
        let lang = self.vocab.lang_token(target_lang)?;
        let mut out = Vec::with_capacity(ids.len() + 1);
        if self.use_lang_tokens {
            out.push(lang);
        }
        out.extend_from_slice(ids);
        Ok(out)
    }

    pub fn generate(&self, source: &EncodedSource<f32>, decode: &DecodeConfig) -> Result<Hypothesis> {
        Ok(self.generate_many(std::slice::from_ref(source), decode)?.remove(0))
    }

    /// Decodes several prepared sources; each result equals a separate
    /// [`Engine::generate`] call.
    pub fn generate_many(&self, sources: &[EncodedSource<f32>], decode: &DecodeConfig) -> Result<Vec<Hypothesis>> {
        decode.validate()?;
        let scorer = ModelScorer { model: &self.model, sources: sources.iter().collect(), allowed: &self.allowed };
        let initials = (0..sources.len()).map(|i| scorer.initial_for(i)).collect();
        match decode.strategy {
            Strategy::Greedy => beam_search_many(&scorer, initials, 1, decode.max_len),
            Strategy::Beam { k } => beam_search_many(&scorer, initials, k, decode.max_len),
            Strategy::Sample { temperature } => initials
                .into_iter()
                .map(|init| {
                    let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
                    let one = Single { inner: &scorer, init };
                    sample(&one, temperature, decode.max_len, &mut rng)
                })
                .collect(),
        }
    }

    /// Encodes `ids` for `target_lang` with `attr` injected.
    pub fn prepare(&self, ids: &[TokenId], target_lang: &str, attr: &AttributeVector) -> Result<EncodedSource<f32>> {
        let src_ids = self.source_ids(ids, target_lang)?;
        self.model.prepare_source(&src_ids, Some(attr))
    }

    /// Computes the injected vector for a request.
    pub fn request_vector(&self, req: &RewriteRequest, input_ids: &[TokenId]) -> Result<AttributeVector> {
        if !(0.0..=MAX_LAMBDA).contains(&req.lambda) {
            return Err(Error::InvalidArgument(format!("lambda must lie in [0, {MAX_LAMBDA}], got {}", req.lambda)));
        }
        let d = self.model.d_model();
        let (v_a, v_b) = if req.lambda == 0.0 && req.exemplars_a.is_empty() && req.exemplars_b.is_empty() {
            (AttributeVector::zeros(d), AttributeVector::zeros(d))
        } else {
            (self.attribute(&req.exemplars_a)?, self.attribute(&req.exemplars_b)?)
        };
        if !self.attribute_conditioning {
            return Ok(AttributeVector::zeros(d));
        }
        let v_x = match req.mode {
            Mode::Within => Some(self.model.extract_attribute(input_ids)?),
            Mode::Cross => None,
        };
        delta_vector(v_x.as_ref(), &v_a, &v_b, req.lambda, req.mode)
    }

    pub fn rewrite(&self, req: &RewriteRequest) -> Result<RewriteResult> {
        self.vocab.lang_token(&req.target_lang)?;
        let ids = self.tokenize(&req.input_text)?;
        if req.mode == Mode::Within {
            if let Some(index) = &self.languages {
                if let Some(lang) = index.dominant(&req.input_text) {
                    if lang != req.target_lang {
                        return Err(Error::InvalidArgument(format!(
                            "within-language mode requires target_lang to be the input language `{lang}`"
                        )));
                    }
                }
            }
        }
        let decode = req.decode.unwrap_or_else(|| DecodeConfig::default_for(req.mode, req.lambda));
        decode.validate()?;
        let attr = self.request_vector(req, &ids)?;
        let source = self.prepare(&ids, &req.target_lang, &attr)?;
        let hyp = self.generate(&source, &decode)?;
        Ok(RewriteResult {
            output_text: self.vocab.decode_output(&hyp.tokens)?,
            steps: hyp.tokens.len(),
            finished: hyp.finished,
            output_ids: hyp.tokens,
            attribute_delta_norm: attr.norm() as f64,
            decode,
        })
    }

    /// Plain translation: cross mode with λ = 0 (zero attribute vector).
    pub fn translate(&self, text: &str, target_lang: &str, decode: Option<DecodeConfig>) -> Result<String> {
        let req = RewriteRequest {
            input_text: text.to_string(),
            target_lang: target_lang.to_string(),
            exemplars_a: Vec::new(),
            exemplars_b: Vec::new(),
            lambda: 0.0,
            mode: Mode::Cross,
            decode,
        };
        Ok(self.rewrite(&req)?.output_text)
    }
}

#[cfg(test)]
mod tests;
