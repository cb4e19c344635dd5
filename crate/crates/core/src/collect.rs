//! Per-token probabilities of a fixed response under each prompt condition.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, write_atomic, Dataset, ReasoningExample, TokenId, TokenSequence, Vocab};
use crate::counters::{Counters, Purpose};
use crate::error::{Error, Result};
use crate::lm::{conditional_logprobs, DifferentiableLm};
use crate::prompts::{render, PromptCondition, TemplateVersion};

/// Parameter snapshot a table was collected at.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CollectedAt {
    pub checkpoint_id: String,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionProbTable {
    pub example_id: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_ids: Vec<TokenId>,
    pub p_base: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_judge: Option<Vec<f64>>,
    pub p_standard: Vec<f64>,
    #[serde(rename = "correct")]
    pub is_correct: bool,
    #[serde(default)]
    pub collected_at: CollectedAt,
}

impl ConditionProbTable {
    pub fn len(&self) -> usize {
        self.p_base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_base.is_empty()
    }

    /// Checks the shape invariants: equal lengths, judge column iff incorrect,
    /// probabilities in (0, 1].
    pub fn validate(&self) -> Result<()> {
        let n = self.p_base.len();
        let check_len = |what: &'static str, got: usize| {
            if got != n {
                Err(Error::LengthMismatch { what, got, expected: n })
            } else {
                Ok(())
            }
        };
        check_len("tokens", self.tokens.len())?;
        check_len("p_standard", self.p_standard.len())?;
        if !self.token_ids.is_empty() {
            check_len("token_ids", self.token_ids.len())?;
        }
        match (&self.p_judge, self.is_correct) {
            (Some(pj), false) => check_len("p_judge", pj.len())?,
            (None, true) => {}
            (Some(_), true) => {
                return Err(Error::WrongBranch(format!(
                    "table {} is correct but carries judge probabilities",
                    self.example_id
                )))
            }
            (None, false) => {
                return Err(Error::WrongBranch(format!(
                    "table {} is incorrect but lacks judge probabilities",
                    self.example_id
                )))
            }
        }
        let all = self
            .p_base
            .iter()
            .chain(&self.p_standard)
            .chain(self.p_judge.iter().flatten());
        for &p in all {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidExample {
                    id: self.example_id.clone(),
                    message: format!("probability {p} outside (0, 1]"),
                });
            }
        }
        Ok(())
    }

    /// Smallest stored probability over all columns.
    pub fn min_probability(&self) -> f64 {
        self.p_base
            .iter()
            .chain(&self.p_standard)
            .chain(self.p_judge.iter().flatten())
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Shared settings for a collection pass.
#[derive(Debug, Clone, Copy)]
pub struct CollectContext<'a> {
    pub vocab: &'a Vocab,
    pub version: TemplateVersion,
    pub eps: f64,
    pub counters: Option<&'a Counters>,
}

/// The scored response: its tokens followed by end-of-sequence.
pub fn response_tokens(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut y = tokenize(text, vocab);
    y.push_synthetic(Vocab::EOS);
    y
}

fn probs_under(
    model: &dyn DifferentiableLm,
    condition: PromptCondition,
    example: &ReasoningExample,
    y: &TokenSequence,
    ctx: &CollectContext<'_>,
) -> Result<Vec<f64>> {
    let prompt = render(condition, example, ctx.version, ctx.vocab)?;
    let lp = conditional_logprobs(model, &prompt.token_ids, y)?;
    if let Some(c) = ctx.counters {
        c.record(Purpose::Collection, 1);
    }
    Ok(lp.values.iter().map(|v| v.exp().clamp(ctx.eps, 1.0)).collect())
}

/// Scores `example.generated_output`: Base and Standard for a correct
/// response, plus Judge for an incorrect one.
pub fn collect(
    model: &dyn DifferentiableLm,
    example: &ReasoningExample,
    ctx: &CollectContext<'_>,
    collected_at: &CollectedAt,
) -> Result<ConditionProbTable> {
    let output = example.generated_output.as_deref().ok_or_else(|| Error::InvalidExample {
        id: example.id.clone(),
        message: "no generated output to score".into(),
    })?;
    let is_correct = example.is_correct.ok_or_else(|| Error::InvalidExample {
        id: example.id.clone(),
        message: "correctness flag not set".into(),
    })?;
    if !is_correct && example.judgment.as_deref().is_none_or(|j| j.trim().is_empty()) {
        return Err(Error::MissingPromptContent {
            condition: PromptCondition::Judge.name(),
            id: example.id.clone(),
            missing: "judgment",
        });
    }
    let y = response_tokens(output, ctx.vocab);
    let p_base = probs_under(model, PromptCondition::Base, example, &y, ctx)?;
    let p_judge = if is_correct {
        None
    } else {
        Some(probs_under(model, PromptCondition::Judge, example, &y, ctx)?)
    };
    let p_standard = probs_under(model, PromptCondition::Standard, example, &y, ctx)?;
    Ok(ConditionProbTable {
        example_id: example.id.clone(),
        tokens: y.ids.iter().map(|&id| ctx.vocab.token(id).to_string()).collect(),
        token_ids: y.ids,
        p_base,
        p_judge,
        p_standard,
        is_correct,
        collected_at: collected_at.clone(),
    })
}

/// [`collect`] over a dataset, in dataset order, on `parallelism` threads.
pub fn collect_batch(
    model: &dyn DifferentiableLm,
    examples: &[ReasoningExample],
    ctx: &CollectContext<'_>,
    collected_at: &CollectedAt,
    parallelism: usize,
) -> Result<Vec<ConditionProbTable>> {
    let run = |e: &ReasoningExample| collect(model, e, ctx, collected_at).map_err(|err| Error::for_example(&e.id, err));
    if parallelism <= 1 || examples.len() <= 1 {
        return examples.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::Config(format!("cannot build collection pool: {e}")))?;
    // Collecting into Result keeps dataset order and reports the earliest failure.
    let results: Vec<Result<ConditionProbTable>> = pool.install(|| examples.par_iter().map(run).collect());
    results.into_iter().collect()
}

/// Convenience wrapper over a [`Dataset`].
pub fn collect_dataset(
    model: &dyn DifferentiableLm,
    dataset: &Dataset,
    ctx: &CollectContext<'_>,
    collected_at: &CollectedAt,
    parallelism: usize,
) -> Result<Vec<ConditionProbTable>> {
    collect_batch(model, &dataset.examples, ctx, collected_at, parallelism)
}

pub fn save_tables(tables: &[ConditionProbTable], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for t in tables {
        out.push_str(&serde_json::to_string(t).expect("table serializes"));
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn load_tables(path: impl AsRef<Path>) -> Result<Vec<ConditionProbTable>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tables = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: ConditionProbTable = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        t.validate().map_err(|e| Error::MalformedLine {
            line: i + 1,
            message: e.to_string(),
        })?;
        tables.push(t);
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, task_vocabulary, Difficulty};
    use crate::lm::{Model, TabularConfig, TabularLm};
    use crate::prompts::template_texts;

    fn setup() -> (Vocab, Vec<ReasoningExample>) {
        let d = Difficulty::default();
        let mut data = generate_synthetic(3, 6, &d).examples;
        for (i, e) in data.iter_mut().enumerate() {
            if i % 2 == 0 {
                e.generated_output = Some(e.standard_solution.clone());
                e.is_correct = Some(true);
            } else {
                e.generated_output = Some("#### 0".into());
                e.is_correct = Some(false);
                e.judgment = Some("The final answer 0 is incorrect .".into());
            }
        }
        let vocab = task_vocabulary(&d, template_texts(TemplateVersion::ToyV1));
        (vocab, data)
    }

    #[test]
    fn branch_forward_counts() {
        let (vocab, data) = setup();
        let m = Model::Tabular(TabularLm::new(TabularConfig::bigram(vocab.len(), 1, 1.0)));
        let counters = Counters::new();
        let ctx = CollectContext {
            vocab: &vocab,
            version: TemplateVersion::ToyV1,
            eps: 1e-12,
            counters: Some(&counters),
        };
        let t = collect(&m, &data[0], &ctx, &CollectedAt::default()).unwrap();
        assert!(t.p_judge.is_none());
        assert_eq!(counters.snapshot().collection, 2);
        let t = collect(&m, &data[1], &ctx, &CollectedAt::default()).unwrap();
        assert!(t.p_judge.is_some());
        assert_eq!(counters.snapshot().collection, 5);
        t.validate().unwrap();
    }

    #[test]
    fn uniform_model_gives_flat_tables() {
        let (vocab, data) = setup();
        let m = Model::Tabular(TabularLm::new(TabularConfig::bigram(vocab.len(), 1, 0.0)));
        let ctx = CollectContext {
            vocab: &vocab,
            version: TemplateVersion::ToyV1,
            eps: 1e-12,
            counters: None,
        };
        let t = collect(&m, &data[0], &ctx, &CollectedAt::default()).unwrap();
        let u = 1.0 / vocab.len() as f64;
        for (a, b) in t.p_base.iter().zip(&t.p_standard) {
            assert!((a - u).abs() < 1e-15 && (b - u).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_judgment_is_an_error() {
        let (vocab, mut data) = setup();
        data[1].judgment = None;
        let m = Model::Tabular(TabularLm::new(TabularConfig::bigram(vocab.len(), 1, 1.0)));
        let ctx = CollectContext {
            vocab: &vocab,
            version: TemplateVersion::ToyV1,
            eps: 1e-12,
            counters: None,
        };
        let err = collect_batch(&m, &data, &ctx, &CollectedAt::default(), 1).unwrap_err();
        assert!(err.to_string().contains(&data[1].id), "{err}");
    }

    #[test]
    fn parallel_matches_serial_and_round_trips() {
        let (vocab, data) = setup();
        let m = Model::Tabular(TabularLm::new(TabularConfig::bigram(vocab.len(), 9, 1.0)));
        let ctx = CollectContext {
            vocab: &vocab,
            version: TemplateVersion::ToyV1,
            eps: 1e-12,
            counters: None,
        };
        let at = CollectedAt {
            checkpoint_id: "init".into(),
            epoch: 0,
        };
        let a = collect_batch(&m, &data, &ctx, &at, 1).unwrap();
        let b = collect_batch(&m, &data, &ctx, &at, 8).unwrap();
        assert_eq!(a, b);
        assert!(collect_batch(&m, &[], &ctx, &at, 4).unwrap().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        save_tables(&a, &path).unwrap();
        assert_eq!(load_tables(&path).unwrap(), a);
        let line = fs::read_to_string(&path).unwrap();
        assert!(line.contains("\"correct\":true") && line.contains("\"p_standard\""));
    }
}
