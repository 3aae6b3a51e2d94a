//! End-to-end evaluation of a trained model over the generated world.

use crate::bundle::DataBundle;
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::eval::{
    lambda_grid, run_translation_benchmark, sweep_lambda, BenchmarkRow, EvalSet, Exemplars, Scenario, SweepResult, Tier,
    TranslationSet,
};
use crate::inference::Engine;
use crate::synthlang::{LanguageIndex, World};
use crate::tokenizer::Vocabulary;
use crate::trainer::checkpoint_train_config;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPlan {
    /// Evaluation inputs per language and attribute value.
    pub per_value: usize,
    /// Pivot-language exemplars per attribute value.
    pub exemplars_per_value: usize,
    /// Held-out lines per translation direction.
    pub translation_lines: usize,
    pub within_lambdas: Vec<f64>,
    /// λ = 0 first, so the first records measure the neutral translations.
    pub cross_lambdas: Vec<f64>,
    pub scenarios: Vec<Scenario>,
    pub seed: u64,
}

impl Default for EvalPlan {
    fn default() -> Self {
        let mut cross = vec![0.0];
        cross.extend(lambda_grid(0.5, 5.0));
        EvalPlan {
            per_value: 50,
            exemplars_per_value: 10,
            translation_lines: 100,
            within_lambdas: lambda_grid(0.5, 9.0),
            cross_lambdas: cross,
            scenarios: vec![
                Scenario::Within,
                Scenario::Cross(Tier::Supervised),
                Scenario::Cross(Tier::ZeroShot),
                Scenario::Cross(Tier::Unsupervised),
            ],
            seed: 1_000_003,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sweeps: Vec<SweepResult>,
    pub benchmark: Vec<BenchmarkRow>,
}

impl EvalReport {
    pub fn sweep(&self, scenario: Scenario) -> Option<&SweepResult> {
        self.sweeps.iter().find(|s| s.scenario == scenario)
    }

    pub fn bleu(&self, src: &str, tgt: &str) -> Option<f64> {
        self.benchmark.iter().find(|r| r.src_lang == src && r.tgt_lang == tgt).map(|r| r.bleu)
    }
}

/// Inference engine for a trained checkpoint. The vocabulary must be the one
/// the checkpoint was trained with; language tokens follow the recorded
/// training configuration.
pub fn engine_from_checkpoint(ck: &Checkpoint, vocab: Vocabulary, world: &World) -> Result<Engine> {
    if ck.vocab_hash != vocab.hash() {
        return Err(crate::Error::Checkpoint("checkpoint was trained with a different vocabulary".into()));
    }
    let train = checkpoint_train_config(ck)?;
    let engine = Engine::new(ck.model()?, vocab, train.use_lang_tokens)?.with_language_index(LanguageIndex::new(world));
    Ok(if train.use_exemplars { engine } else { engine.without_attribute_conditioning() })
}

/// Ordered (source, target) pairs evaluated for a scenario.
pub fn scenario_pairs(bundle: &DataBundle, scenario: Scenario) -> Result<Vec<(String, String)>> {
    let langs = bundle.world.lang_ids();
    let mut pairs = Vec::new();
    for src in &langs {
        for tgt in &langs {
            let keep = match scenario {
                Scenario::Within => src == tgt,
                Scenario::Cross(t) => src != tgt && bundle.tier(src, tgt)? == t,
            };
            if keep {
                pairs.push((src.clone(), tgt.clone()));
            }
        }
    }
    Ok(pairs)
}

/// Translation directions between the pivot and every other language.
pub fn benchmark_sets(bundle: &DataBundle, lines: usize, seed: u64) -> Result<Vec<TranslationSet>> {
    let pivot = bundle.pivot();
    let mut sets = Vec::new();
    for lang in bundle.world.lang_ids().iter().filter(|l| l.as_str() != pivot) {
        for (src, tgt) in [(pivot, lang.as_str()), (lang.as_str(), pivot)] {
            sets.push(TranslationSet::generate(&bundle.world, src, tgt, bundle.tier(src, tgt)?, lines, seed)?);
        }
    }
    Ok(sets)
}

pub fn evaluate(engine: &Engine, bundle: &DataBundle, plan: &EvalPlan) -> Result<EvalReport> {
    let world = &bundle.world;
    let evalset = EvalSet::generate(world, &world.lang_ids(), plan.per_value, plan.seed)?;
    let exemplars = Exemplars::generate(world, bundle.pivot(), plan.exemplars_per_value, plan.seed + 1)?;
    let mut sweeps = Vec::new();
    for &scenario in &plan.scenarios {
        let pairs = scenario_pairs(bundle, scenario)?;
        if pairs.is_empty() {
            continue;
        }
        let lambdas = match scenario {
            Scenario::Within => &plan.within_lambdas,
            Scenario::Cross(_) => &plan.cross_lambdas,
        };
        sweeps.push(sweep_lambda(engine, world, &evalset, &exemplars, lambdas, scenario, &pairs, None)?);
    }
    let sets = benchmark_sets(bundle, plan.translation_lines, plan.seed + 2)?;
    let benchmark = run_translation_benchmark(engine, &sets, None)?;
    Ok(EvalReport { sweeps, benchmark })
}
