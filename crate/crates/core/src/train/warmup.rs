//! Context-reading warm-up data.
//!
//! A freshly initialized model ignores whatever precedes the question, so its
//! reference- and judgment-conditioned probabilities carry no signal. This
//! set teaches the two reading habits a pretrained language model brings:
//! a response follows the reference solution shown before it, and a response
//! matches the judgment written about it. Each item folds the extra context
//! into the question, so plain supervised training on the set renders the
//! same token streams as the reference and judgment prompt conditions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{extract_answer, flawed_solution, generate_synthetic, Dataset, Difficulty, Provenance};
use crate::error::{Error, Result};
use crate::judge::{Judge, RuleJudge};
use crate::prompts::{JUDGMENT_CLOSE, JUDGMENT_OPEN, REFERENCE_CLOSE, REFERENCE_OPEN};

pub const WARMUP_SOURCE: &str = "context-reading";

/// `count` items from fresh problems: even positions copy a shown reference
/// solution, odd positions reproduce a flawed response described by a
/// rule-judge critique.
pub fn context_reading_set(seed: u64, count: usize, difficulty: &Difficulty) -> Result<Dataset> {
    let problems = generate_synthetic(seed, count, difficulty);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C0DE);
    let mut examples = Vec::with_capacity(count);
    for (i, p) in problems.examples.into_iter().enumerate() {
        let mut e = p.clone();
        e.id = format!("warmup-{seed}-{i:05}");
        let flawed = if i % 2 == 1 {
            flawed_solution(&p, difficulty, &mut rng)
        } else {
            None
        };
        match flawed {
            Some(wrong) => {
                let mut scored = p.clone();
                scored.generated_output = Some(wrong.clone());
                let judgment = RuleJudge.judge(&scored)?;
                e.question = format!("{}\n{JUDGMENT_OPEN}\n{}\n{JUDGMENT_CLOSE}", p.question, judgment.text);
                e.standard_answer = extract_answer(&wrong).ok_or_else(|| Error::InvalidExample {
                    id: e.id.clone(),
                    message: "flawed response lost its answer".into(),
                })?;
                e.standard_solution = wrong;
            }
            None => {
                e.question = format!("{}\n{REFERENCE_OPEN}\n{}\n{REFERENCE_CLOSE}", p.question, p.standard_solution);
            }
        }
        examples.push(e);
    }
    Dataset::new(
        examples,
        Provenance {
            source: WARMUP_SOURCE.into(),
            seed: Some(seed),
            split: "warmup".into(),
        },
    )
}
