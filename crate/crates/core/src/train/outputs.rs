//! Filling `generated_output` by teaching (external generator) or
//! self-study (the trainee itself).

use serde::{Deserialize, Serialize};

use crate::corpus::{check_correctness, detokenize, Dataset, ReasoningExample, Vocab};
use crate::counters::Counters;
use crate::error::Result;
use crate::lm::{generate, Model};
use crate::prompts::{render, PromptCondition, TemplateVersion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    #[default]
    Teaching,
    SelfStudy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub temperature: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            temperature: 0.6,
            max_tokens: 512,
            seed: 0,
        }
    }
}

/// Produces a response text for an example.
pub trait TextGenerator: Sync {
    fn complete(&self, example: &ReasoningExample, decode: &DecodeConfig, seed: u64) -> Result<String>;
}

/// Emits the reference solution verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleGenerator;

impl TextGenerator for OracleGenerator {
    fn complete(&self, example: &ReasoningExample, _: &DecodeConfig, _: u64) -> Result<String> {
        Ok(example.standard_solution.clone())
    }
}

/// Decodes from a model given the base prompt.
pub struct ModelGenerator<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocab,
    pub version: TemplateVersion,
    pub counters: Option<&'a Counters>,
}

impl TextGenerator for ModelGenerator<'_> {
    fn complete(&self, example: &ReasoningExample, decode: &DecodeConfig, seed: u64) -> Result<String> {
        let prompt = render(PromptCondition::Base, example, self.version, self.vocab)?;
        let out = generate(
            self.model,
            &prompt.token_ids,
            decode.temperature,
            decode.max_tokens,
            seed,
            self.counters,
        );
        Ok(detokenize(&out.ids, self.vocab))
    }
}

/// Seed for example `index` derived from a base seed.
pub fn example_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Fills `generated_output` and `is_correct` for every example and clears
/// any stale judgment.
pub fn generate_outputs(generator: &dyn TextGenerator, dataset: &Dataset, decode: &DecodeConfig) -> Result<Dataset> {
    let mut out = dataset.clone();
    for (i, e) in out.examples.iter_mut().enumerate() {
        let text = generator
            .complete(e, decode, example_seed(decode.seed, i))
            .map_err(|err| crate::Error::Example {
                id: e.id.clone(),
                source: Box::new(err),
            })?;
        e.is_correct = Some(check_correctness(&text, e.standard_answer));
        e.generated_output = Some(text);
        e.judgment = None;
    }
    Ok(out)
}
