//! Synthetic languages with exact translation and classification oracles.
//!
//! Every language maps the same set of concept ids onto its own surface
//! words. A sentence is a sequence of clauses; each clause holds 3 to 6
//! content words in the language's word order, followed by one attribute
//! marker. Markers double as clause boundaries, which keeps the oracle
//! translator decidable on lines that carry no punctuation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CONCEPTS: usize = 50;
pub const MIN_SENTENCE_WORDS: usize = 5;
pub const MAX_SENTENCE_WORDS: usize = 20;
pub const MIN_CLAUSE_WORDS: usize = 3;
pub const MAX_CLAUSE_WORDS: usize = 6;
pub const WORLD_FORMAT_VERSION: u32 = 1;

/// Label returned by [`oracle_classify`] when no marker is present.
pub const NEUTRAL: &str = "neutral";
/// Label returned by [`oracle_classify`] when markers of several values co-occur.
pub const CONFLICT: &str = "conflict";

const CONSONANTS: &[u8] = b"bdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
// 'q' is reserved as the separator between a stem and the language tag.
const TAG_LETTERS: &[u8] = b"abcdefghijklmnoprstuvwxyz";
const CONCEPT_WORLD_SEED: u64 = 0x0c0c_e975;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordOrder {
    Keep,
    Reverse,
    RotateLeft,
}

impl WordOrder {
    pub const ALL: [WordOrder; 3] = [WordOrder::Keep, WordOrder::Reverse, WordOrder::RotateLeft];

    /// Concept order -> surface order.
    pub fn apply<T: Clone>(self, items: &[T]) -> Vec<T> {
        let mut out = items.to_vec();
        match self {
            WordOrder::Keep => {}
            WordOrder::Reverse => out.reverse(),
            WordOrder::RotateLeft => {
                if !out.is_empty() {
                    out.rotate_left(1)
                }
            }
        }
        out
    }

    /// Surface order -> concept order.
    pub fn invert<T: Clone>(self, items: &[T]) -> Vec<T> {
        let mut out = items.to_vec();
        match self {
            WordOrder::Keep => {}
            WordOrder::Reverse => out.reverse(),
            WordOrder::RotateLeft => {
                if !out.is_empty() {
                    out.rotate_right(1)
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLanguageSpec {
    pub lang_id: String,
    pub seed: u64,
    /// Index = concept id.
    pub lexicon: Vec<String>,
    pub word_order: WordOrder,
    pub is_pivot: bool,
}

impl SynthLanguageSpec {
    pub fn concept_count(&self) -> usize {
        self.lexicon.len()
    }

    pub fn word_index(&self) -> HashMap<&str, usize> {
        self.lexicon.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect()
    }

    /// Suffix shared by every surface word of this language.
    pub fn tag(&self) -> String {
        language_tag(self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthAttributeSpec {
    pub attr_id: String,
    pub values: Vec<String>,
    /// lang_id -> value index -> marker words.
    pub realization: BTreeMap<String, Vec<Vec<String>>>,
}

impl SynthAttributeSpec {
    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }

    pub fn markers(&self, lang_id: &str) -> Result<&[Vec<String>]> {
        self.realization
            .get(lang_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownLanguage(lang_id.to_string()))
    }

    /// marker word -> (value index, marker index) for one language.
    pub fn marker_index(&self, lang_id: &str) -> Result<HashMap<&str, (usize, usize)>> {
        let mut map = HashMap::new();
        for (v, words) in self.markers(lang_id)?.iter().enumerate() {
            for (m, w) in words.iter().enumerate() {
                map.insert(w.as_str(), (v, m));
            }
        }
        Ok(map)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub text: String,
    pub lang_id: String,
    pub attr_value: String,
    pub line_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelLine {
    pub line_id: u64,
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: String,
    pub tgt: String,
}

/// Result of the rule-based attribute classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Classification {
    Value(String),
    Neutral,
    Conflict,
}

impl Classification {
    pub fn label(&self) -> &str {
        match self {
            Classification::Value(v) => v,
            Classification::Neutral => NEUTRAL,
            Classification::Conflict => CONFLICT,
        }
    }
}

fn language_tag(seed: u64) -> String {
    let base = TAG_LETTERS.len() as u64;
    let mut n = seed;
    let mut letters = Vec::new();
    loop {
        letters.push(TAG_LETTERS[(n % base) as usize]);
        n /= base;
        if n == 0 {
            break;
        }
    }
    letters.reverse();
    let mut tag = String::from("q");
    tag.push_str(std::str::from_utf8(&letters).expect("ascii"));
    tag
}

fn random_stem(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut s = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        s.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
        s.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    s
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds a language from a seed. The seed is encoded into every surface word,
/// so languages built from distinct seeds never share a word.
pub fn generate_language(seed: u64, concept_count: usize, is_pivot: bool) -> Result<SynthLanguageSpec> {
    if concept_count < MIN_CONCEPTS {
        return Err(Error::InvalidArgument(format!(
            "concept_count must be at least {MIN_CONCEPTS}, got {concept_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1a7e));
    let tag = language_tag(seed);
    let mut seen = BTreeSet::new();
    let mut lexicon = Vec::with_capacity(concept_count);
    while lexicon.len() < concept_count {
        let syllables = rng.gen_range(2..=3);
        let stem = random_stem(&mut rng, syllables);
        if seen.insert(stem.clone()) {
            lexicon.push(format!("{stem}{tag}"));
        }
    }
    let word_order = if is_pivot {
        WordOrder::Keep
    } else {
        WordOrder::ALL[rng.gen_range(0..WordOrder::ALL.len())]
    };
    Ok(SynthLanguageSpec {
        lang_id: format!("x{seed}"),
        seed,
        lexicon,
        word_order,
        is_pivot,
    })
}

/// Builds marker words for every value in every language. Markers carry the
/// language tag and never collide with lexicon words.
pub fn generate_attribute(
    attr_id: &str,
    values: &[&str],
    languages: &[SynthLanguageSpec],
    markers_per_value: usize,
    seed: u64,
) -> Result<SynthAttributeSpec> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("an attribute needs at least two values".into()));
    }
    if markers_per_value == 0 {
        return Err(Error::InvalidArgument("markers_per_value must be positive".into()));
    }
    let mut realization = BTreeMap::new();
    for lang in languages {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, lang.seed));
        let tag = lang.tag();
        let mut taken: BTreeSet<String> = lang.lexicon.iter().cloned().collect();
        let mut per_value = Vec::with_capacity(values.len());
        for _ in values {
            let mut words = Vec::with_capacity(markers_per_value);
            while words.len() < markers_per_value {
                let word = format!("{}{tag}", random_stem(&mut rng, 2));
                if taken.insert(word.clone()) {
                    words.push(word);
                }
            }
            per_value.push(words);
        }
        realization.insert(lang.lang_id.clone(), per_value);
    }
    Ok(SynthAttributeSpec {
        attr_id: attr_id.to_string(),
        values: values.iter().map(|v| v.to_string()).collect(),
        realization,
    })
}

/// Shared concept dynamics: a sparse first-order chain that every language
/// realizes, so corpora in different languages are comparable.
#[derive(Clone, Debug)]
pub struct ConceptModel {
    start_cdf: Vec<f64>,
    successors: Vec<Vec<(usize, f64)>>,
}

impl ConceptModel {
    pub fn new(concept_count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(CONCEPT_WORLD_SEED ^ concept_count as u64);
        let mut ranks: Vec<usize> = (0..concept_count).collect();
        ranks.shuffle(&mut rng);
        let mut weights = vec![0.0; concept_count];
        for (rank, &c) in ranks.iter().enumerate() {
            weights[c] = 1.0 / ((rank + 1) as f64).powf(0.8);
        }
        let start_cdf = cumulative(&weights);

        let mut successors = Vec::with_capacity(concept_count);
        for c in 0..concept_count {
            let mut next = vec![(c + 1) % concept_count];
            while next.len() < 4 {
                let cand = rng.gen_range(0..concept_count);
                if cand != c && !next.contains(&cand) {
                    next.push(cand);
                }
            }
            let mut w = [0.4, 0.3, 0.2, 0.1];
            w.shuffle(&mut rng);
            let cdf = cumulative(&w);
            successors.push(next.into_iter().zip(cdf).collect());
        }
        ConceptModel { start_cdf, successors }
    }

    pub fn sample_start(&self, rng: &mut impl Rng) -> usize {
        sample_cdf(&self.start_cdf, rng)
    }

    pub fn sample_next(&self, concept: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let succ = &self.successors[concept];
        succ.iter().find(|(_, c)| u < *c).map(|(n, _)| *n).unwrap_or(succ[succ.len() - 1].0)
    }
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

/// Concept-level sentence: clauses of concept ids plus the attribute value and
/// which marker variant closes each clause.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptSentence {
    pub clauses: Vec<Vec<usize>>,
    pub value: usize,
    pub markers: Vec<usize>,
}

impl ConceptSentence {
    pub fn last_concept(&self) -> Option<usize> {
        self.clauses.last().and_then(|c| c.last()).copied()
    }

    pub fn content_len(&self) -> usize {
        self.clauses.iter().map(Vec::len).sum()
    }
}

fn clause_lengths(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut rem = n;
    let mut out = Vec::new();
    while rem > MAX_CLAUSE_WORDS {
        let hi = MAX_CLAUSE_WORDS.min(rem - MIN_CLAUSE_WORDS);
        let k = rng.gen_range(MIN_CLAUSE_WORDS..=hi);
        out.push(k);
        rem -= k;
    }
    out.push(rem);
    out
}

/// Samples one concept sentence of 5 to 20 content words.
pub fn sample_sentence(
    model: &ConceptModel,
    previous: Option<usize>,
    value: usize,
    markers_per_value: usize,
    rng: &mut impl Rng,
) -> ConceptSentence {
    let n = rng.gen_range(MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS);
    let mut concept = match previous {
        Some(p) => model.sample_next(p, rng),
        None => model.sample_start(rng),
    };
    let mut clauses = Vec::new();
    let mut markers = Vec::new();
    for len in clause_lengths(n, rng) {
        let mut clause = Vec::with_capacity(len);
        for _ in 0..len {
            clause.push(concept);
            concept = model.sample_next(concept, rng);
        }
        clauses.push(clause);
        markers.push(rng.gen_range(0..markers_per_value));
    }
    ConceptSentence { clauses, value, markers }
}

/// Renders a concept sentence as surface words of `lang`.
pub fn realize(lang: &SynthLanguageSpec, attr: &SynthAttributeSpec, sentence: &ConceptSentence) -> Result<Vec<String>> {
    let markers = attr.markers(&lang.lang_id)?;
    let mut words = Vec::new();
    for (clause, &m) in sentence.clauses.iter().zip(&sentence.markers) {
        for c in lang.word_order.apply(clause) {
            words.push(lang.lexicon[c].clone());
        }
        words.push(markers[sentence.value][m].clone());
    }
    Ok(words)
}

fn balanced_values(n: usize, n_values: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut values: Vec<usize> = (0..n).map(|i| i % n_values).collect();
    values.shuffle(rng);
    values
}

fn markers_per_value(attr: &SynthAttributeSpec, lang: &SynthLanguageSpec) -> Result<usize> {
    let markers = attr.markers(&lang.lang_id)?;
    Ok(markers.iter().map(Vec::len).min().unwrap_or(0).max(1))
}

/// Generates `n_lines` two-sentence concept lines; both sentences of a line
/// share one attribute value.
pub fn sample_concept_lines(
    concept_count: usize,
    n_values: usize,
    markers_per_value: usize,
    n_lines: usize,
    rng: &mut impl Rng,
) -> Vec<(ConceptSentence, ConceptSentence)> {
    let model = ConceptModel::new(concept_count);
    let values = balanced_values(n_lines, n_values, rng);
    values
        .into_iter()
        .map(|value| {
            let first = sample_sentence(&model, None, value, markers_per_value, rng);
            let second = sample_sentence(&model, first.last_concept(), value, markers_per_value, rng);
            (first, second)
        })
        .collect()
}

pub fn generate_mono_corpus(
    lang: &SynthLanguageSpec,
    attr: &SynthAttributeSpec,
    n_lines: usize,
    seed: u64,
) -> Result<Vec<CorpusLine>> {
    if n_lines == 0 {
        return Err(Error::InvalidArgument("n_lines must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, lang.seed));
    let mpv = markers_per_value(attr, lang)?;
    let lines = sample_concept_lines(lang.concept_count(), attr.values.len(), mpv, n_lines, &mut rng);
    lines
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let mut words = realize(lang, attr, &a)?;
            words.extend(realize(lang, attr, &b)?);
            Ok(CorpusLine {
                text: words.join(" "),
                lang_id: lang.lang_id.clone(),
                attr_value: attr.values[a.value].clone(),
                line_id: i as u64,
            })
        })
        .collect()
}

/// Single sentences with a prescribed attribute value, used for evaluation
/// inputs and exemplars.
pub fn generate_sentences(
    lang: &SynthLanguageSpec,
    attr: &SynthAttributeSpec,
    value: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let value_idx = attr
        .value_index(value)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown attribute value `{value}`")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, lang.seed ^ ((value_idx as u64) << 40)));
    let model = ConceptModel::new(lang.concept_count());
    let mpv = markers_per_value(attr, lang)?;
    (0..n)
        .map(|_| {
            let s = sample_sentence(&model, None, value_idx, mpv, &mut rng);
            Ok(realize(lang, attr, &s)?.join(" "))
        })
        .collect()
}

/// Parallel lines `src -> tgt`, realized from shared concept lines.
pub fn generate_parallel_corpus(
    src: &SynthLanguageSpec,
    tgt: &SynthLanguageSpec,
    attr: &SynthAttributeSpec,
    n_lines: usize,
    seed: u64,
) -> Result<Vec<ParallelLine>> {
    if n_lines == 0 {
        return Err(Error::InvalidArgument("n_lines must be at least 1".into()));
    }
    if src.concept_count() != tgt.concept_count() {
        return Err(Error::InvalidArgument("languages disagree on concept count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, mix_seed(src.seed, tgt.seed)));
    let mpv = markers_per_value(attr, src)?.min(markers_per_value(attr, tgt)?);
    let lines = sample_concept_lines(src.concept_count(), attr.values.len(), mpv, n_lines, &mut rng);
    lines
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let mut s = realize(src, attr, &a)?;
            s.extend(realize(src, attr, &b)?);
            let mut t = realize(tgt, attr, &a)?;
            t.extend(realize(tgt, attr, &b)?);
            Ok(ParallelLine {
                line_id: i as u64,
                src_lang: src.lang_id.clone(),
                tgt_lang: tgt.lang_id.clone(),
                src: s.join(" "),
                tgt: t.join(" "),
            })
        })
        .collect()
}

/// Word-by-word translation with clause-level reordering. Markers delimit
/// clauses and are re-realized with the same value and variant in `dst`.
pub fn oracle_translate(
    text: &str,
    src: &SynthLanguageSpec,
    dst: &SynthLanguageSpec,
    attr: &SynthAttributeSpec,
) -> Result<String> {
    let words = src.word_index();
    let src_markers = attr.marker_index(&src.lang_id)?;
    let dst_markers = attr.markers(&dst.lang_id)?;
    let mut out: Vec<&str> = Vec::new();
    let mut clause: Vec<usize> = Vec::new();

    let flush = |clause: &mut Vec<usize>| -> Vec<usize> {
        let concepts = dst.word_order.apply(&src.word_order.invert(clause));
        clause.clear();
        concepts
    };

    for tok in text.split_whitespace() {
        if let Some(&(v, m)) = src_markers.get(tok) {
            out.extend(flush(&mut clause).into_iter().map(|c| dst.lexicon[c].as_str()));
            let variants = &dst_markers[v];
            out.push(variants[m % variants.len()].as_str());
        } else if let Some(&c) = words.get(tok) {
            if c >= dst.concept_count() {
                return Err(Error::InvalidArgument(format!(
                    "concept {c} has no word in `{}`",
                    dst.lang_id
                )));
            }
            clause.push(c);
        } else {
            return Err(Error::UnknownWord { word: tok.to_string(), lang: src.lang_id.clone() });
        }
    }
    out.extend(flush(&mut clause).into_iter().map(|c| dst.lexicon[c].as_str()));
    Ok(out.join(" "))
}

/// Attribute value realized by `text` in `lang`.
pub fn oracle_classify(text: &str, attr: &SynthAttributeSpec, lang: &SynthLanguageSpec) -> Result<Classification> {
    let markers = attr.marker_index(&lang.lang_id)?;
    let mut found: Option<usize> = None;
    for tok in text.split_whitespace() {
        if let Some(&(v, _)) = markers.get(tok) {
            match found {
                Some(prev) if prev != v => return Ok(Classification::Conflict),
                _ => found = Some(v),
            }
        }
    }
    Ok(match found {
        Some(v) => Classification::Value(attr.values[v].clone()),
        None => Classification::Neutral,
    })
}

/// Concept ids of the content words of `text`, in surface order.
pub fn concepts_of(text: &str, lang: &SynthLanguageSpec, attr: &SynthAttributeSpec) -> Result<Vec<usize>> {
    let words = lang.word_index();
    let markers = attr.marker_index(&lang.lang_id)?;
    let mut out = Vec::new();
    for tok in text.split_whitespace() {
        if markers.contains_key(tok) {
            continue;
        }
        match words.get(tok) {
            Some(&c) => out.push(c),
            None => return Err(Error::UnknownWord { word: tok.to_string(), lang: lang.lang_id.clone() }),
        }
    }
    Ok(out)
}

/// A complete synthetic setup: languages, one attribute and the shared
/// concept inventory. Serialized as the versioned spec file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub format_version: u32,
    pub concept_count: usize,
    pub languages: Vec<SynthLanguageSpec>,
    pub attribute: SynthAttributeSpec,
}

impl World {
    pub fn language(&self, lang_id: &str) -> Result<&SynthLanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.lang_id == lang_id)
            .ok_or_else(|| Error::UnknownLanguage(lang_id.to_string()))
    }

    pub fn pivot(&self) -> Result<&SynthLanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.is_pivot)
            .ok_or_else(|| Error::InvalidArgument("world has no pivot language".into()))
    }

    pub fn lang_ids(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.lang_id.clone()).collect()
    }

    pub fn translate(&self, text: &str, src: &str, dst: &str) -> Result<String> {
        oracle_translate(text, self.language(src)?, self.language(dst)?, &self.attribute)
    }

    pub fn classify(&self, text: &str, lang: &str) -> Result<Classification> {
        oracle_classify(text, &self.attribute, self.language(lang)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != WORLD_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported world format version {} (expected {WORLD_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.languages.iter().filter(|l| l.is_pivot).count() != 1 {
            return Err(Error::Format("exactly one language must be the pivot".into()));
        }
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for lang in &self.languages {
            if lang.lexicon.len() != self.concept_count {
                return Err(Error::Format(format!("lexicon size mismatch for `{}`", lang.lang_id)));
            }
            let markers = self.attribute.markers(&lang.lang_id)?;
            let all = lang.lexicon.iter().chain(markers.iter().flatten());
            for w in all {
                if let Some(prev) = owner.insert(w.as_str(), lang.lang_id.as_str()) {
                    return Err(Error::Format(format!(
                        "word `{w}` appears twice (languages `{prev}` and `{}`)",
                        lang.lang_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let world: World = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }
}

/// Maps every surface word (lexicon and markers) to its language.
#[derive(Clone, Debug)]
pub struct LanguageIndex {
    owner: HashMap<String, String>,
}

impl LanguageIndex {
    pub fn new(world: &World) -> Self {
        let mut owner = HashMap::new();
        for lang in &world.languages {
            for w in &lang.lexicon {
                owner.insert(w.clone(), lang.lang_id.clone());
            }
            if let Ok(markers) = world.attribute.markers(&lang.lang_id) {
                for w in markers.iter().flatten() {
                    owner.insert(w.clone(), lang.lang_id.clone());
                }
            }
        }
        LanguageIndex { owner }
    }

    pub fn language_of(&self, word: &str) -> Option<&str> {
        self.owner.get(word).map(String::as_str)
    }

    /// True when every word of `text` belongs to `lang`. Empty text counts as
    /// being in no language.
    pub fn is_entirely(&self, text: &str, lang: &str) -> bool {
        let mut any = false;
        for w in text.split_whitespace() {
            any = true;
            if self.language_of(w) != Some(lang) {
                return false;
            }
        }
        any
    }

    /// Most frequent language among the known words of `text`.
    pub fn dominant(&self, text: &str) -> Option<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in text.split_whitespace() {
            if let Some(l) = self.language_of(w) {
                *counts.entry(l).or_default() += 1;
            }
        }
        counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(a.0))).map(|(l, _)| l.to_string())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (SynthLanguageSpec, SynthLanguageSpec, SynthAttributeSpec) {
        let a = generate_language(1, 60, true).unwrap();
        let b = generate_language(2, 60, false).unwrap();
        let attr = generate_attribute("sentiment", &["positive", "negative"], &[a.clone(), b.clone()], 2, 9).unwrap();
        (a, b, attr)
    }

    #[test]
    fn language_generation_is_deterministic() {
        assert_eq!(generate_language(7, 100, false).unwrap(), generate_language(7, 100, false).unwrap());
    }

    #[test]
    fn languages_from_distinct_seeds_share_no_words() {
        let a = generate_language(1, 100, false).unwrap();
        let b = generate_language(2, 100, false).unwrap();
        let sa: BTreeSet<_> = a.lexicon.iter().collect();
        assert!(b.lexicon.iter().all(|w| !sa.contains(w)));
    }

    #[test]
    fn too_few_concepts_rejected() {
        assert!(generate_language(7, 10, false).is_err());
    }

    #[test]
    fn lexicon_is_bijective() {
        let a = generate_language(3, 200, false).unwrap();
        let set: BTreeSet<_> = a.lexicon.iter().collect();
        assert_eq!(set.len(), 200);
    }

    #[test]
    fn pivot_keeps_word_order() {
        for seed in 0..10 {
            assert_eq!(generate_language(seed, 50, true).unwrap().word_order, WordOrder::Keep);
        }
    }

    #[test]
    fn word_order_inverts() {
        let xs = [1, 2, 3, 4, 5];
        for o in WordOrder::ALL {
            assert_eq!(o.invert(&o.apply(&xs)), xs.to_vec());
        }
    }

    #[test]
    fn tags_are_distinct() {
        let tags: BTreeSet<_> = (0..2000).map(language_tag).collect();
        assert_eq!(tags.len(), 2000);
    }

    #[test]
    fn corpus_lines_classify_as_their_value() {
        let (a, _, attr) = setup();
        let corpus = generate_mono_corpus(&a, &attr, 1000, 5).unwrap();
        assert_eq!(corpus.len(), 1000);
        for line in &corpus {
            assert_eq!(oracle_classify(&line.text, &attr, &a).unwrap(), Classification::Value(line.attr_value.clone()));
        }
        let pos = corpus.iter().filter(|l| l.attr_value == "positive").count() as i64;
        assert!((pos - (1000 - pos)).abs() <= 50);
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let (a, _, attr) = setup();
        assert_eq!(generate_mono_corpus(&a, &attr, 50, 3).unwrap(), generate_mono_corpus(&a, &attr, 50, 3).unwrap());
        assert!(generate_mono_corpus(&a, &attr, 0, 3).is_err());
    }

    #[test]
    fn sentences_have_bounded_content_length() {
        let model = ConceptModel::new(60);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let s = sample_sentence(&model, None, 0, 2, &mut rng);
            assert!((MIN_SENTENCE_WORDS..=MAX_SENTENCE_WORDS).contains(&s.content_len()));
            for c in &s.clauses {
                assert!(c.len() >= MIN_CLAUSE_WORDS && c.len() <= MAX_CLAUSE_WORDS);
            }
        }
    }

    #[test]
    fn translation_round_trip_restores_text() {
        let (a, b, attr) = setup();
        for line in generate_mono_corpus(&a, &attr, 100, 11).unwrap() {
            let there = oracle_translate(&line.text, &a, &b, &attr).unwrap();
            let back = oracle_translate(&there, &b, &a, &attr).unwrap();
            assert_eq!(back, line.text);
            assert_eq!(
                oracle_classify(&there, &attr, &b).unwrap(),
                oracle_classify(&line.text, &attr, &a).unwrap()
            );
        }
    }

    #[test]
    fn translation_to_same_language_is_identity() {
        let (a, _, attr) = setup();
        let line = &generate_mono_corpus(&a, &attr, 1, 1).unwrap()[0];
        assert_eq!(oracle_translate(&line.text, &a, &a, &attr).unwrap(), line.text);
    }

    #[test]
    fn translation_rejects_unknown_word() {
        let (a, b, attr) = setup();
        let err = oracle_translate("blorp", &a, &b, &attr).unwrap_err();
        assert!(err.to_string().contains("blorp"));
    }

    #[test]
    fn classification_edge_cases() {
        let (a, _, attr) = setup();
        let words = &a.lexicon;
        assert_eq!(oracle_classify(&format!("{} {}", words[0], words[1]), &attr, &a).unwrap(), Classification::Neutral);
        let m = attr.markers(&a.lang_id).unwrap();
        let both = format!("{} {} {}", words[0], m[0][0], m[1][0]);
        assert_eq!(oracle_classify(&both, &attr, &a).unwrap(), Classification::Conflict);
    }

    #[test]
    fn parallel_corpus_matches_oracle() {
        let (a, b, attr) = setup();
        for p in generate_parallel_corpus(&a, &b, &attr, 50, 2).unwrap() {
            assert_eq!(oracle_translate(&p.src, &a, &b, &attr).unwrap(), p.tgt);
        }
    }

    #[test]
    fn language_index_identifies_language() {
        let (a, b, attr) = setup();
        let world = World {
            format_version: WORLD_FORMAT_VERSION,
            concept_count: 60,
            languages: vec![a.clone(), b.clone()],
            attribute: attr.clone(),
        };
        world.validate().unwrap();
        let idx = LanguageIndex::new(&world);
        let line = &generate_mono_corpus(&b, &attr, 1, 1).unwrap()[0];
        assert!(idx.is_entirely(&line.text, &b.lang_id));
        assert!(!idx.is_entirely(&line.text, &a.lang_id));
        assert_eq!(idx.dominant(&line.text).as_deref(), Some(b.lang_id.as_str()));
    }
}
