//! Metrics and scenario runners.
//!
//! BLEU follows sacreBLEU's corpus BLEU with `exp` smoothing over whitespace
//! tokens. Metric files are CSV with rows ordered by λ, then language pair.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::inference::{delta_vector, DecodeConfig, Engine, Mode};
use crate::model::AttributeVector;
use crate::synthlang::{generate_parallel_corpus, generate_sentences, Classification, LanguageIndex, World};

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub correct: [u64; MAX_ORDER],
    pub total: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, hyp: &str, reference: &str) {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        self.hyp_len += h.len() as u64;
        self.ref_len += r.len() as u64;
        for n in 1..=MAX_ORDER {
            if h.len() < n {
                break;
            }
            let mut ref_counts: HashMap<&[&str], u64> = HashMap::new();
            for g in r.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[&str], u64> = HashMap::new();
            for g in h.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            self.total[n - 1] += (h.len() + 1 - n) as u64;
            self.correct[n - 1] +=
                hyp_counts.iter().map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0))).sum::<u64>();
        }
    }

    /// Score in [0, 100]. A zero unigram match, or an order with no
    /// hypothesis n-grams at all, yields 0; zero matches at a higher order
    /// with candidates present are smoothed as 1 / (2^k · total).
    pub fn score(&self) -> f64 {
        if self.correct[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut smooth = 1.0;
        for n in 0..MAX_ORDER {
            if self.total[n] == 0 {
                return 0.0;
            }
            let p = if self.correct[n] == 0 {
                smooth *= 2.0;
                1.0 / (smooth * self.total[n] as f64)
            } else {
                self.correct[n] as f64 / self.total[n] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.hyp_len < self.ref_len { (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp() } else { 1.0 };
        100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Corpus BLEU of `hypotheses` against one reference each.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("BLEU needs at least one sentence".into()));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}

/// BLEU of outputs against baselines: the inputs for within-language
/// rewriting, the λ = 0 translations for cross-language rewriting.
pub fn self_bleu<H: AsRef<str>, R: AsRef<str>>(outputs: &[H], baselines: &[R]) -> Result<f64> {
    bleu(outputs, baselines)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransferScore {
    pub accuracy: f64,
    pub wrong_language_rate: f64,
}

/// An output counts as a success when it is entirely in `expected_lang` and
/// classifies as its target value. Outputs containing any word outside
/// `expected_lang` count as wrong-language.
pub fn transfer_accuracy<S: AsRef<str>>(
    outputs: &[S],
    targets: &[String],
    world: &World,
    index: &LanguageIndex,
    expected_lang: &str,
) -> Result<TransferScore> {
    if outputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!("{} outputs but {} targets", outputs.len(), targets.len())));
    }
    if outputs.is_empty() {
        return Ok(TransferScore { accuracy: 0.0, wrong_language_rate: 0.0 });
    }
    let lang = world.language(expected_lang)?;
    let (mut ok, mut wrong) = (0usize, 0usize);
    for (out, target) in outputs.iter().zip(targets) {
        let out = out.as_ref();
        if !index.is_entirely(out, expected_lang) {
            wrong += 1;
        } else if crate::synthlang::oracle_classify(out, &world.attribute, lang)? == Classification::Value(target.clone())
        {
            ok += 1;
        }
    }
    let n = outputs.len() as f64;
    Ok(TransferScore { accuracy: ok as f64 / n, wrong_language_rate: wrong as f64 / n })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. None when either
/// series is constant or the lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub input_text: String,
    pub lang_id: String,
    pub source_value: String,
    pub target_value: String,
    pub neutral_reference: Option<String>,
}

/// Rewriting inputs, balanced per language and attribute value. Each item
/// asks for the next attribute value (the opposite one for binary
/// attributes).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    pub fn generate(world: &World, langs: &[String], per_value: usize, seed: u64) -> Result<Self> {
        if per_value == 0 {
            return Err(Error::InvalidArgument("per_value must be at least 1".into()));
        }
        let values = &world.attribute.values;
        let mut items = Vec::new();
        for lang_id in langs {
            let lang = world.language(lang_id)?;
            for (i, value) in values.iter().enumerate() {
                let target = &values[(i + 1) % values.len()];
                for text in generate_sentences(lang, &world.attribute, value, per_value, seed)? {
                    items.push(EvalItem {
                        input_text: text,
                        lang_id: lang_id.clone(),
                        source_value: value.clone(),
                        target_value: target.clone(),
                        neutral_reference: None,
                    });
                }
            }
        }
        Ok(EvalSet { items })
    }

    /// Items in `lang` with their oracle translations into `tgt` attached.
    pub fn for_pair(&self, world: &World, src: &str, tgt: &str) -> Result<Vec<EvalItem>> {
        self.items
            .iter()
            .filter(|it| it.lang_id == src)
            .map(|it| {
                let mut it = it.clone();
                it.neutral_reference = Some(world.translate(&it.input_text, src, tgt)?);
                Ok(it)
            })
            .collect()
    }
}

/// Exemplar sentences per attribute value, all in one language.
#[derive(Clone, Debug, PartialEq)]
pub struct Exemplars {
    pub lang_id: String,
    pub by_value: BTreeMap<String, Vec<String>>,
}

impl Exemplars {
    pub fn generate(world: &World, lang_id: &str, per_value: usize, seed: u64) -> Result<Self> {
        let lang = world.language(lang_id)?;
        let by_value = world
            .attribute
            .values
            .iter()
            .map(|v| Ok((v.clone(), generate_sentences(lang, &world.attribute, v, per_value, seed)?)))
            .collect::<Result<_>>()?;
        Ok(Exemplars { lang_id: lang_id.to_string(), by_value })
    }

    pub fn get(&self, value: &str) -> Result<&[String]> {
        self.by_value
            .get(value)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("no exemplars for value `{value}`")))
    }
}

/// How the source and target languages relate to the parallel data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tier {
    /// One side is the pivot and the other has pivot parallel data.
    Supervised,
    /// Both sides have pivot parallel data but not with each other.
    ZeroShot,
    /// One side has no parallel data at all.
    Unsupervised,
}

impl Tier {
    pub fn tag(self) -> &'static str {
        match self {
            Tier::Supervised => "supervised",
            Tier::ZeroShot => "zero-shot",
            Tier::Unsupervised => "unsupervised",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Within,
    Cross(Tier),
}

impl Scenario {
    pub fn tag(self) -> String {
        match self {
            Scenario::Within => "within".into(),
            Scenario::Cross(t) => format!("cross-{}", t.tag()),
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Scenario::Within => Mode::Within,
            Scenario::Cross(_) => Mode::Cross,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub lambda: f64,
    pub src_lang: String,
    pub tgt_lang: String,
    pub self_bleu: f64,
    pub transfer_accuracy: f64,
    pub wrong_language_rate: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub scenario: Scenario,
    /// Ordered by λ, then (source, target).
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    pub fn for_pair(&self, src: &str, tgt: &str) -> Vec<&SweepRecord> {
        self.records.iter().filter(|r| r.src_lang == src && r.tgt_lang == tgt).collect()
    }

    /// Records averaged over all pairs ending in `tgt` (every pair when
    /// None), one per λ.
    pub fn by_lambda(&self, tgt: Option<&str>) -> Vec<SweepRecord> {
        let mut out: Vec<SweepRecord> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for r in self.records.iter().filter(|r| tgt.is_none_or(|t| r.tgt_lang == t)) {
            match out.last_mut() {
                Some(last) if last.lambda == r.lambda => {
                    last.self_bleu += r.self_bleu;
                    last.transfer_accuracy += r.transfer_accuracy;
                    last.wrong_language_rate += r.wrong_language_rate;
                    last.n += r.n;
                    *counts.last_mut().expect("parallel to out") += 1;
                }
                _ => {
                    out.push(SweepRecord { src_lang: "*".into(), tgt_lang: tgt.unwrap_or("*").into(), ..r.clone() });
                    counts.push(1);
                }
            }
        }
        for (r, c) in out.iter_mut().zip(counts) {
            let c = c as f64;
            r.self_bleu /= c;
            r.transfer_accuracy /= c;
            r.wrong_language_rate /= c;
        }
        out
    }
}

/// Selects the record with the highest accuracy; ties go to the smaller λ.
pub fn best_by_accuracy<'a>(records: impl IntoIterator<Item = &'a SweepRecord>) -> Option<&'a SweepRecord> {
    records.into_iter().fold(None, |best: Option<&SweepRecord>, r| match best {
        Some(b) if b.transfer_accuracy >= r.transfer_accuracy => Some(b),
        _ => Some(r),
    })
}

/// λ ∈ {step, 2·step, …, max}.
pub fn lambda_grid(step: f64, max: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (1..=n).map(|i| i as f64 * step).collect()
}

/// Items per batched decoding call; bounds decoder cache memory.
const CHUNK: usize = 64;

/// Rewrites every item of `src` into `tgt` at each λ. Exemplar vectors and
/// the model are fixed across λ. Within-language scenarios score self-BLEU
/// against the inputs; cross-language ones against the λ = 0 translations,
/// which are decoded with the default λ = 0 settings.
#[allow(clippy::too_many_arguments)]
pub fn sweep_pair(
    engine: &Engine,
    world: &World,
    index: &LanguageIndex,
    items: &[EvalItem],
    exemplars: &Exemplars,
    lambdas: &[f64],
    mode: Mode,
    tgt: &str,
    decode: Option<DecodeConfig>,
) -> Result<Vec<SweepRecord>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("λ values must be strictly increasing".into()));
    }
    let src = items[0].lang_id.clone();
    if items.iter().any(|it| it.lang_id != src) {
        return Err(Error::InvalidArgument("sweep items must share one source language".into()));
    }
    let mut vectors: BTreeMap<&str, AttributeVector> = BTreeMap::new();
    for (value, ex) in &exemplars.by_value {
        vectors.insert(value, engine.attribute(ex)?);
    }
    let ids: Vec<Vec<u32>> = items.iter().map(|it| engine.tokenize(&it.input_text)).collect::<Result<_>>()?;
    let v_x: Vec<Option<AttributeVector>> = match mode {
        Mode::Within => ids.iter().map(|i| engine.model.extract_attribute(i).map(Some)).collect::<Result<_>>()?,
        Mode::Cross => vec![None; items.len()],
    };
    let run = |lambda: f64, decode: &DecodeConfig| -> Result<Vec<String>> {
        let mut outputs = Vec::with_capacity(items.len());
        for start in (0..items.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(items.len());
            let mut sources = Vec::with_capacity(end - start);
            for i in start..end {
                let v_a = vectors.get(items[i].source_value.as_str()).ok_or_else(|| no_exemplars(&items[i].source_value))?;
                let v_b = vectors.get(items[i].target_value.as_str()).ok_or_else(|| no_exemplars(&items[i].target_value))?;
                let mut attr = delta_vector(v_x[i].as_ref(), v_a, v_b, lambda, mode)?;
                if !engine.attribute_conditioning() {
                    attr = AttributeVector::zeros(attr.dim());
                }
                sources.push(engine.prepare(&ids[i], tgt, &attr)?);
            }
            for h in engine.generate_many(&sources, decode)? {
                outputs.push(engine.vocab.decode_output(&h.tokens)?);
            }
        }
        Ok(outputs)
    };
    let baselines: Vec<String> = match mode {
        Mode::Within => items.iter().map(|it| it.input_text.clone()).collect(),
        Mode::Cross => {
            let zero = AttributeVector::zeros(engine.model.d_model());
            let decode = DecodeConfig::default_for(Mode::Cross, 0.0);
            let mut out = Vec::with_capacity(items.len());
            for chunk in ids.chunks(CHUNK) {
                let sources: Vec<_> = chunk.iter().map(|i| engine.prepare(i, tgt, &zero)).collect::<Result<_>>()?;
                for h in engine.generate_many(&sources, &decode)? {
                    out.push(engine.vocab.decode_output(&h.tokens)?);
                }
            }
            out
        }
    };
    let targets: Vec<String> = items.iter().map(|it| it.target_value.clone()).collect();
    let mut records = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let d = decode.unwrap_or_else(|| DecodeConfig::default_for(mode, lambda));
        let outputs = run(lambda, &d)?;
        let score = transfer_accuracy(&outputs, &targets, world, index, tgt)?;
        records.push(SweepRecord {
            lambda,
            src_lang: src.clone(),
            tgt_lang: tgt.to_string(),
            self_bleu: self_bleu(&outputs, &baselines)?,
            transfer_accuracy: score.accuracy,
            wrong_language_rate: score.wrong_language_rate,
            n: items.len(),
        });
    }
    Ok(records)
}

fn no_exemplars(value: &str) -> Error {
    Error::InvalidArgument(format!("no exemplars for value `{value}`"))
}

/// Runs [`sweep_pair`] for every (source, target) pair and merges the
/// records in report order.
#[allow(clippy::too_many_arguments)]
pub fn sweep_lambda(
    engine: &Engine,
    world: &World,
    evalset: &EvalSet,
    exemplars: &Exemplars,
    lambdas: &[f64],
    scenario: Scenario,
    pairs: &[(String, String)],
    decode: Option<DecodeConfig>,
) -> Result<SweepResult> {
    let index = LanguageIndex::new(world);
    let mut records = Vec::new();
    for (src, tgt) in pairs {
        if scenario == Scenario::Within && src != tgt {
            return Err(Error::InvalidArgument(format!("within-language pair {src}->{tgt} changes language")));
        }
        let items: Vec<EvalItem> = evalset.items.iter().filter(|it| &it.lang_id == src).cloned().collect();
        records.extend(sweep_pair(engine, world, &index, &items, exemplars, lambdas, scenario.mode(), tgt, decode)?);
    }
    records.sort_by(|a, b| {
        a.lambda.total_cmp(&b.lambda).then_with(|| (&a.src_lang, &a.tgt_lang).cmp(&(&b.src_lang, &b.tgt_lang)))
    });
    Ok(SweepResult { scenario, records })
}

/// Held-out translation pairs with oracle references.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationSet {
    pub src_lang: String,
    pub tgt_lang: String,
    pub tier: Tier,
    pub sources: Vec<String>,
    pub references: Vec<String>,
}

impl TranslationSet {
    /// Lines drawn like the parallel training corpus under a different seed.
    pub fn generate(world: &World, src: &str, tgt: &str, tier: Tier, n: usize, seed: u64) -> Result<Self> {
        let lines = generate_parallel_corpus(world.language(src)?, world.language(tgt)?, &world.attribute, n, seed)?;
        Ok(TranslationSet {
            src_lang: src.to_string(),
            tgt_lang: tgt.to_string(),
            tier,
            sources: lines.iter().map(|l| l.src.clone()).collect(),
            references: lines.into_iter().map(|l| l.tgt).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub src_lang: String,
    pub tgt_lang: String,
    pub tier: Tier,
    pub bleu: f64,
    pub n: usize,
}

/// BLEU per translation direction, in (source, target) order. Sets whose
/// languages coincide are skipped.
pub fn run_translation_benchmark(
    engine: &Engine,
    sets: &[TranslationSet],
    decode: Option<DecodeConfig>,
) -> Result<Vec<BenchmarkRow>> {
    let decode = decode.unwrap_or_else(|| DecodeConfig::default_for(Mode::Cross, 0.0));
    let zero = AttributeVector::zeros(engine.model.d_model());
    let mut rows = Vec::new();
    for set in sets.iter().filter(|s| s.src_lang != s.tgt_lang) {
        if set.sources.is_empty() || set.sources.len() != set.references.len() {
            return Err(Error::InvalidArgument(format!(
                "translation set {}->{} is empty or misaligned",
                set.src_lang, set.tgt_lang
            )));
        }
        let mut outputs = Vec::with_capacity(set.sources.len());
        for chunk in set.sources.chunks(CHUNK) {
            let sources: Vec<_> = chunk
                .iter()
                .map(|s| engine.prepare(&engine.tokenize(s)?, &set.tgt_lang, &zero))
                .collect::<Result<_>>()?;
            for h in engine.generate_many(&sources, &decode)? {
                outputs.push(engine.vocab.decode_output(&h.tokens)?);
            }
        }
        rows.push(BenchmarkRow {
            src_lang: set.src_lang.clone(),
            tgt_lang: set.tgt_lang.clone(),
            tier: set.tier,
            bleu: bleu(&outputs, &set.references)?,
            n: outputs.len(),
        });
    }
    rows.sort_by(|a, b| (&a.src_lang, &a.tgt_lang).cmp(&(&b.src_lang, &b.tgt_lang)));
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "scenario,lambda,src_lang,tgt_lang,self_bleu,transfer_accuracy,wrong_language_rate,n";
pub const PLOT_HEADER: &str = "lambda,self_bleu,transfer_accuracy,wrong_language_rate";
pub const BENCHMARK_HEADER: &str = "src_lang,tgt_lang,tier,bleu,n";

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    let tag = result.scenario.tag();
    for r in &result.records {
        let _ = writeln!(
            s,
            "{tag},{:.2},{},{},{:.4},{:.4},{:.4},{}",
            r.lambda, r.src_lang, r.tgt_lang, r.self_bleu, r.transfer_accuracy, r.wrong_language_rate, r.n
        );
    }
    s
}

pub fn plot_csv(result: &SweepResult) -> String {
    let mut s = format!("{PLOT_HEADER}\n");
    for r in result.by_lambda(None) {
        let _ = writeln!(
            s,
            "{:.2},{:.4},{:.4},{:.4}",
            r.lambda, r.self_bleu, r.transfer_accuracy, r.wrong_language_rate
        );
    }
    s
}

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut s = format!("{BENCHMARK_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.4},{}", r.src_lang, r.tgt_lang, r.tier.tag(), r.bleu, r.n);
    }
    s
}

/// Writes `sweep_<scenario>.csv` and `plot_<scenario>.csv` per sweep and
/// `benchmark.csv` when rows are given. Returns the written paths.
pub fn emit_report(dir: &Path, sweeps: &[SweepResult], benchmark: Option<&[BenchmarkRow]>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for sweep in sweeps {
        let tag = sweep.scenario.tag();
        files.push((dir.join(format!("sweep_{tag}.csv")), sweep_csv(sweep)));
        files.push((dir.join(format!("plot_{tag}.csv")), plot_csv(sweep)));
    }
    if let Some(rows) = benchmark {
        files.push((dir.join("benchmark.csv"), benchmark_csv(rows)));
    }
    let mut paths = Vec::with_capacity(files.len());
    for (path, body) in files {
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests;
