//! Natural-language judgments of generated responses.

mod cache;
mod remote;
mod rule;

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{check_correctness, Dataset, ReasoningExample};
use crate::error::{Error, Result};
use crate::prompts::CORRECT_SENTINEL;

pub use cache::JudgeCache;
pub use remote::{
    HttpTransport, RemoteJudge, RemoteJudgeConfig, Transport, TransportError, DEFAULT_API_KEY_ENV,
};
pub use rule::{RuleJudge, RULE_JUDGE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeSource {
    RuleBased,
    RemoteLlm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub text: String,
    pub verdict: Verdict,
    pub source: JudgeSource,
    pub cache_key: String,
}

impl Judgment {
    /// Builds a judgment from raw judge text. Any text containing the
    /// correctness sentinel is normalized to exactly the sentinel.
    pub fn from_text(text: &str, source: JudgeSource, cache_key: String) -> Self {
        if text.contains(CORRECT_SENTINEL) {
            Judgment {
                text: CORRECT_SENTINEL.to_string(),
                verdict: Verdict::Correct,
                source,
                cache_key,
            }
        } else {
            Judgment {
                text: text.trim().to_string(),
                verdict: Verdict::Incorrect,
                source,
                cache_key,
            }
        }
    }
}

/// Stable content hash of everything a judgment depends on.
pub fn cache_key(question: &str, output: &str, standard_solution: &str, judge_version: &str) -> String {
    let mut h = Sha256::new();
    for part in [question, output, standard_solution, judge_version] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

pub trait Judge: Send + Sync {
    /// Identifies the judge and its instruction revision; part of the cache key.
    fn version(&self) -> String;
    fn source(&self) -> JudgeSource;
    fn judge(&self, example: &ReasoningExample) -> Result<Judgment>;

    fn key_for(&self, example: &ReasoningExample) -> String {
        cache_key(
            &example.question,
            example.generated_output.as_deref().unwrap_or(""),
            &example.standard_solution,
            &self.version(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct JudgeStats {
    pub correct: usize,
    pub incorrect: usize,
    pub judged: usize,
    pub cache_hits: usize,
    pub judge_calls: usize,
    /// Incorrect responses the judge called correct.
    pub disagreements: usize,
}

/// Sets `is_correct` from the numeric answer check and attaches a judgment to
/// every incorrect response. Correct responses carry no judgment.
pub fn judge_dataset(
    dataset: &Dataset,
    judge: &dyn Judge,
    cache: Option<&JudgeCache>,
    max_concurrency: usize,
) -> Result<(Dataset, JudgeStats)> {
    let mut out = dataset.clone();
    let mut stats = JudgeStats::default();
    let mut pending = Vec::new();
    for (i, e) in out.examples.iter_mut().enumerate() {
        let output = e.generated_output.as_deref().ok_or_else(|| Error::InvalidExample {
            id: e.id.clone(),
            message: "no generated output to judge".into(),
        })?;
        let correct = check_correctness(output, e.standard_answer);
        e.is_correct = Some(correct);
        if correct {
            stats.correct += 1;
            e.judgment = None;
        } else {
            stats.incorrect += 1;
            pending.push(i);
        }
    }

    let hits = AtomicU64::new(0);
    let calls = AtomicU64::new(0);
    let judge_one = |e: &ReasoningExample| -> Result<Judgment> {
        let key = judge.key_for(e);
        if let Some(c) = cache {
            if let Some(j) = c.get(&key) {
                hits.fetch_add(1, Ordering::Relaxed);
                return Ok(j);
            }
        }
        calls.fetch_add(1, Ordering::Relaxed);
        let j = judge.judge(e).map_err(|err| Error::for_example(&e.id, err))?;
        if let Some(c) = cache {
            c.insert(j.clone())?;
        }
        Ok(j)
    };
    let judgments: Vec<Result<Judgment>> = if max_concurrency <= 1 || pending.len() <= 1 {
        pending.iter().map(|&i| judge_one(&out.examples[i])).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(max_concurrency)
            .build()
            .map_err(|e| Error::Config(format!("cannot build judge pool: {e}")))?;
        let examples = &out.examples;
        pool.install(|| pending.par_iter().map(|&i| judge_one(&examples[i])).collect())
    };

    for (&i, j) in pending.iter().zip(judgments) {
        let j = j?;
        let e = &mut out.examples[i];
        if j.verdict == Verdict::Correct {
            stats.disagreements += 1;
            log::warn!(
                "judge called example {} correct but its answer check failed; keeping it incorrect",
                e.id
            );
        }
        e.judgment = Some(j.text);
        stats.judged += 1;
    }
    stats.cache_hits = hits.into_inner() as usize;
    stats.judge_calls = calls.into_inner() as usize;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Difficulty};

    fn mixed(k_incorrect: usize, n: usize) -> Dataset {
        let mut d = generate_synthetic(11, n, &Difficulty::default());
        for (i, e) in d.examples.iter_mut().enumerate() {
            e.generated_output = Some(if i < k_incorrect {
                "#### 100000".to_string()
            } else {
                e.standard_solution.clone()
            });
        }
        d
    }

    #[test]
    fn cache_key_is_stable_and_sensitive() {
        let a = cache_key("q", "o", "s", "v1");
        assert_eq!(a, cache_key("q", "o", "s", "v1"));
        assert_ne!(a, cache_key("q", "o", "s", "v2"));
        assert_ne!(cache_key("ab", "c", "", ""), cache_key("a", "bc", "", ""));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn sentinel_text_means_correct() {
        let j = Judgment::from_text(&format!("Checked.\n{CORRECT_SENTINEL}\n"), JudgeSource::RemoteLlm, "k".into());
        assert_eq!(j.verdict, Verdict::Correct);
        assert_eq!(j.text, CORRECT_SENTINEL);
        let j = Judgment::from_text("Step two is wrong.", JudgeSource::RemoteLlm, "k".into());
        assert_eq!(j.verdict, Verdict::Incorrect);
    }

    #[test]
    fn judges_exactly_the_incorrect_examples() {
        let d = mixed(3, 8);
        let (out, stats) = judge_dataset(&d, &RuleJudge, None, 1).unwrap();
        assert_eq!(stats.judged, 3);
        assert_eq!(stats.correct, 5);
        assert_eq!(out.examples.iter().filter(|e| e.judgment.is_some()).count(), 3);
        for e in &out.examples {
            assert_eq!(e.is_correct, Some(e.judgment.is_none()));
        }
    }

    #[test]
    fn all_correct_dataset_gets_only_flags() {
        let d = mixed(0, 4);
        let (out, stats) = judge_dataset(&d, &RuleJudge, None, 2).unwrap();
        assert_eq!(stats.judged, 0);
        for (a, b) in out.examples.iter().zip(&d.examples) {
            assert_eq!(a.is_correct, Some(true));
            assert_eq!(a.generated_output, b.generated_output);
            assert!(a.judgment.is_none());
        }
    }

    #[test]
    fn cached_rerun_makes_no_judge_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = JudgeCache::open(dir.path()).unwrap();
        let d = mixed(4, 6);
        let (first, s1) = judge_dataset(&d, &RuleJudge, Some(&cache), 3).unwrap();
        assert_eq!(s1.judge_calls, 4);
        let reopened = JudgeCache::open(dir.path()).unwrap();
        let (second, s2) = judge_dataset(&d, &RuleJudge, Some(&reopened), 3).unwrap();
        assert_eq!(s2.judge_calls, 0);
        assert_eq!(s2.cache_hits, 4);
        assert_eq!(first, second);
    }
}
