//! Generated world plus corpora and vocabulary, with a fixed on-disk layout:
//!
//! ```text
//! data.json                 generation settings
//! world.json                language and attribute specs
//! vocab.txt                 one token per line
//! mono/<lang>.jsonl         CorpusLine records
//! parallel/<src>-<tgt>.jsonl ParallelLine records
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::{MonoDataset, ParallelDataset};
use crate::error::{Error, Result};
use crate::eval::Tier;
use crate::synthlang::{
    generate_attribute, generate_language, generate_mono_corpus, generate_parallel_corpus, read_jsonl, write_jsonl,
    CorpusLine, ParallelLine, World, WORLD_FORMAT_VERSION,
};
use crate::tokenizer::Vocabulary;
use crate::trainer::TrainData;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub concept_count: usize,
    pub pivot_seed: u64,
    /// Languages with pivot parallel data.
    pub supervised_seeds: Vec<u64>,
    /// Languages with monolingual data only.
    pub unsupervised_seeds: Vec<u64>,
    pub attr_id: String,
    pub attr_values: Vec<String>,
    pub markers_per_value: usize,
    pub mono_lines: usize,
    pub parallel_lines: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            concept_count: 60,
            pivot_seed: 1,
            supervised_seeds: vec![2, 3],
            unsupervised_seeds: vec![4],
            attr_id: "sentiment".into(),
            attr_values: vec!["positive".into(), "negative".into()],
            markers_per_value: 2,
            mono_lines: 20_000,
            parallel_lines: 20_000,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seeds = vec![self.pivot_seed];
        seeds.extend(&self.supervised_seeds);
        seeds.extend(&self.unsupervised_seeds);
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config("language seeds must be distinct".into()));
        }
        if self.supervised_seeds.is_empty() && self.unsupervised_seeds.is_empty() {
            return Err(Error::Config("at least one language besides the pivot is required".into()));
        }
        if self.mono_lines == 0 {
            return Err(Error::Config("mono_lines must be positive".into()));
        }
        if self.parallel_lines == 0 && !self.supervised_seeds.is_empty() {
            return Err(Error::Config("parallel_lines must be positive when supervised languages exist".into()));
        }
        Ok(())
    }

    pub fn build_world(&self) -> Result<World> {
        self.validate()?;
        let mut languages = vec![generate_language(self.pivot_seed, self.concept_count, true)?];
        for &s in self.supervised_seeds.iter().chain(&self.unsupervised_seeds) {
            languages.push(generate_language(s, self.concept_count, false)?);
        }
        let values: Vec<&str> = self.attr_values.iter().map(String::as_str).collect();
        let attribute = generate_attribute(&self.attr_id, &values, &languages, self.markers_per_value, self.seed)?;
        let world = World { format_version: WORLD_FORMAT_VERSION, concept_count: self.concept_count, languages, attribute };
        world.validate()?;
        Ok(world)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataBundle {
    pub config: DataConfig,
    pub world: World,
    pub vocab: Vocabulary,
    /// One corpus per language, in world order.
    pub mono: Vec<Vec<CorpusLine>>,
    /// Pivot-to-language corpora, one per supervised language.
    pub parallel: Vec<Vec<ParallelLine>>,
}

/// Vocabulary covering every lexicon word and marker of every language.
pub fn world_vocabulary(world: &World) -> Result<Vocabulary> {
    let mut lines = Vec::with_capacity(world.languages.len());
    for lang in &world.languages {
        let mut words = lang.lexicon.clone();
        words.extend(world.attribute.markers(&lang.lang_id)?.iter().flatten().cloned());
        lines.push(CorpusLine {
            text: words.join(" "),
            lang_id: lang.lang_id.clone(),
            attr_value: String::new(),
            line_id: 0,
        });
    }
    Vocabulary::build(&[&lines])
}

impl DataBundle {
    pub fn generate(config: &DataConfig) -> Result<Self> {
        let world = config.build_world()?;
        let vocab = world_vocabulary(&world)?;
        let mono = world
            .languages
            .iter()
            .map(|l| generate_mono_corpus(l, &world.attribute, config.mono_lines, config.seed))
            .collect::<Result<_>>()?;
        let pivot = world.pivot()?;
        let parallel = world.languages[1..=config.supervised_seeds.len()]
            .iter()
            .map(|l| generate_parallel_corpus(pivot, l, &world.attribute, config.parallel_lines, config.seed))
            .collect::<Result<_>>()?;
        Ok(DataBundle { config: config.clone(), world, vocab, mono, parallel })
    }

    pub fn pivot(&self) -> &str {
        &self.world.languages[0].lang_id
    }

    pub fn supervised(&self) -> Vec<String> {
        self.world.languages[1..=self.config.supervised_seeds.len()].iter().map(|l| l.lang_id.clone()).collect()
    }

    pub fn unsupervised(&self) -> Vec<String> {
        self.world.languages[1 + self.config.supervised_seeds.len()..].iter().map(|l| l.lang_id.clone()).collect()
    }

    /// Supervision tier of a translation direction.
    pub fn tier(&self, src: &str, tgt: &str) -> Result<Tier> {
        self.world.language(src)?;
        self.world.language(tgt)?;
        let unsupervised = self.unsupervised();
        if unsupervised.iter().any(|l| l == src || l == tgt) {
            Ok(Tier::Unsupervised)
        } else if src == self.pivot() || tgt == self.pivot() {
            Ok(Tier::Supervised)
        } else {
            Ok(Tier::ZeroShot)
        }
    }

    /// Mono datasets for every language and both directions of every
    /// parallel corpus.
    pub fn train_data(&self) -> Result<TrainData> {
        let mono = self
            .world
            .languages
            .iter()
            .zip(&self.mono)
            .map(|(l, c)| MonoDataset::from_corpus(&self.vocab, &l.lang_id, c))
            .collect();
        let mut parallel = Vec::new();
        for lines in &self.parallel {
            parallel.push(ParallelDataset::from_lines(&self.vocab, lines, false)?);
            parallel.push(ParallelDataset::from_lines(&self.vocab, lines, true)?);
        }
        Ok(TrainData { vocab: self.vocab.clone(), pivot: self.pivot().to_string(), mono, parallel })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("mono")).map_err(|e| Error::io(dir, e))?;
        fs::create_dir_all(dir.join("parallel")).map_err(|e| Error::io(dir, e))?;
        let cfg = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let p = dir.join("data.json");
        fs::write(&p, cfg + "\n").map_err(|e| Error::io(&p, e))?;
        self.world.save(&dir.join("world.json"))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        for (lang, corpus) in self.world.languages.iter().zip(&self.mono) {
            write_jsonl(&dir.join("mono").join(format!("{}.jsonl", lang.lang_id)), corpus)?;
        }
        for lines in &self.parallel {
            if let Some(first) = lines.first() {
                let name = format!("{}-{}.jsonl", first.src_lang, first.tgt_lang);
                write_jsonl(&dir.join("parallel").join(name), lines)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("data.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let config: DataConfig = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let world = World::load(&dir.join("world.json"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let mono = world
            .languages
            .iter()
            .map(|l| read_jsonl(&dir.join("mono").join(format!("{}.jsonl", l.lang_id))))
            .collect::<Result<_>>()?;
        let pivot = world.pivot()?.lang_id.clone();
        let parallel = world.languages[1..=config.supervised_seeds.len()]
            .iter()
            .map(|l| read_jsonl(&dir.join("parallel").join(format!("{pivot}-{}.jsonl", l.lang_id))))
            .collect::<Result<_>>()?;
        Ok(DataBundle { config, world, vocab, mono, parallel })
    }
}
