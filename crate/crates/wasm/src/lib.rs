//! Browser bindings for the synthetic world: sentence sampling, oracle
//! translation and classification, and corpus BLEU.

use wasm_bindgen::prelude::*;

use unirewrite::bundle::DataConfig;
use unirewrite::eval;
use unirewrite::synthlang::{generate_sentences, LanguageIndex, World};

fn js(e: unirewrite::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    world: World,
    index: LanguageIndex,
}

#[wasm_bindgen]
impl Demo {
    /// World of the default data configuration.
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        let world = DataConfig::default().build_world().map_err(js)?;
        let index = LanguageIndex::new(&world);
        Ok(Demo { world, index })
    }

    pub fn languages(&self) -> Vec<String> {
        self.world.lang_ids()
    }

    pub fn pivot(&self) -> Result<String, JsError> {
        Ok(self.world.pivot().map_err(js)?.lang_id.clone())
    }

    pub fn values(&self) -> Vec<String> {
        self.world.attribute.values.clone()
    }

    /// `n` sentences of `lang` carrying `value`, newline-separated.
    pub fn sample(&self, lang: &str, value: &str, n: usize, seed: u64) -> Result<String, JsError> {
        let spec = self.world.language(lang).map_err(js)?;
        Ok(generate_sentences(spec, &self.world.attribute, value, n, seed).map_err(js)?.join("\n"))
    }

    /// Oracle translation, line by line.
    pub fn translate(&self, text: &str, src: &str, dst: &str) -> Result<String, JsError> {
        let lines = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| self.world.translate(l, src, dst))
            .collect::<unirewrite::Result<Vec<_>>>()
            .map_err(js)?;
        Ok(lines.join("\n"))
    }

    /// `language: label` of the detected language and attribute value.
    pub fn classify(&self, text: &str) -> Result<String, JsError> {
        let Some(lang) = self.index.dominant(text) else {
            return Ok("unknown language".into());
        };
        let label = self.world.classify(text, &lang).map_err(js)?;
        Ok(format!("{lang}: {}", label.label()))
    }
}

/// Corpus BLEU (0..100) of newline-separated hypotheses against references.
#[wasm_bindgen]
pub fn bleu(hypotheses: &str, references: &str) -> Result<f64, JsError> {
    let hyps: Vec<String> = hypotheses.lines().map(String::from).collect();
    let refs: Vec<String> = references.lines().map(String::from).collect();
    eval::bleu(&hyps, &refs).map_err(js)
}
