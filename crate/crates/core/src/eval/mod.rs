//! Accuracy evaluation, run comparison, forward-pass accounting and token
//! saliency reports.

mod compare;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_answer, format_rational, Dataset};
use crate::counters::CounterSnapshot;
use crate::error::{Error, Result};
use crate::train::{example_seed, DecodeConfig, TextGenerator};

pub use compare::{chart_from_csv, compare_runs, Comparison, MetricsRow, RunMetrics, METRICS_HEADER};
pub use report::saliency_report;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub answer: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub split: String,
    pub accuracy: f64,
    pub records: Vec<EvalRecord>,
    pub decode: DecodeConfig,
}

impl EvalResult {
    pub fn n_correct(&self) -> usize {
        self.records.iter().filter(|r| r.correct).count()
    }
}

/// Identifier of an evaluation split, derived from its provenance.
pub fn split_id(dataset: &Dataset) -> String {
    let p = &dataset.provenance;
    let seed = p.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
    format!("{}:{}:{}:{}", p.source, seed, p.split, dataset.len())
}

/// Decodes every example and scores it with the numeric answer check.
pub fn evaluate(generator: &dyn TextGenerator, dataset: &Dataset, decode: &DecodeConfig) -> Result<EvalResult> {
    let records = dataset
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let text = generator
                .complete(e, decode, example_seed(decode.seed, i))
                .map_err(|err| Error::Example {
                    id: e.id.clone(),
                    source: Box::new(err),
                })?;
            let answer = extract_answer(&text);
            Ok(EvalRecord {
                id: e.id.clone(),
                answer: answer.as_ref().map(format_rational),
                correct: answer == Some(e.standard_answer),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracy = if records.is_empty() {
        0.0
    } else {
        records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64
    };
    Ok(EvalResult {
        split: split_id(dataset),
        accuracy,
        records,
        decode: *decode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardRatio {
    pub nlft_per_example: f64,
    pub sft_per_example: f64,
    pub collection_per_example: f64,
    pub ratio: f64,
}

/// Collection plus training forwards per example, NLFT against SFT.
pub fn forward_ratio(nlft: &CounterSnapshot, sft: &CounterSnapshot, n_examples: usize) -> Result<ForwardRatio> {
    if n_examples == 0 {
        return Err(Error::Report("forward ratio needs at least one example".into()));
    }
    let base = sft.collection + sft.training;
    if base == 0 {
        return Err(Error::Report("baseline recorded zero forward passes".into()));
    }
    let n = n_examples as f64;
    let ours = (nlft.collection + nlft.training) as f64;
    Ok(ForwardRatio {
        nlft_per_example: ours / n,
        sft_per_example: base as f64 / n,
        collection_per_example: nlft.collection as f64 / n,
        ratio: ours / base as f64,
    })
}
