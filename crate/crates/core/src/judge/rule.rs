//! Deterministic judge for the synthetic arithmetic task.

use std::sync::LazyLock;

use regex::Regex;

use super::{Judge, JudgeSource, Judgment};
use crate::corpus::{extract_answer_detailed, format_rational, Op, ReasoningExample};
use crate::error::Result;
use crate::prompts::CORRECT_SENTINEL;

pub const RULE_JUDGE_VERSION: &str = "rule-v1";

pub const FORMAT_JUDGMENT: &str = "The response does not follow the required format.";

static STEP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(\d+) ?([-+*]) ?(\d+) ?= ?(- ?)?(\d+)").expect("valid regex"));

/// Re-evaluates every `a op b = c` step and the final answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleJudge;

impl RuleJudge {
    /// The judgment text alone, without cache metadata.
    pub fn judgment_text(example: &ReasoningExample) -> String {
        let output = example.generated_output.as_deref().unwrap_or("").trim();
        if output.is_empty() {
            return FORMAT_JUDGMENT.to_string();
        }
        let answer = extract_answer_detailed(output).value;
        let mut steps = 0;
        let mut problems = Vec::new();
        for cap in STEP.captures_iter(output) {
            steps += 1;
            let (Ok(a), Ok(b), Ok(c)) = (cap[1].parse::<i64>(), cap[3].parse::<i64>(), cap[5].parse::<i64>()) else {
                continue;
            };
            let c = if cap.get(4).is_some() { -c } else { c };
            let op = Op::from_symbol(&cap[2]).expect("regex only admits known operators");
            let Some(expected) = checked(op, a, b) else {
                continue;
            };
            if expected != c {
                let sym = op.symbol();
                problems.push(format!(
                    "The step '{a} {sym} {b} = {c}' is incorrect; {a} {sym} {b} = {expected}."
                ));
            }
        }
        if steps == 0 && answer.is_none() {
            return FORMAT_JUDGMENT.to_string();
        }
        let expected = format_rational(&example.standard_answer);
        match answer {
            Some(v) if v == example.standard_answer => {}
            Some(v) => problems.push(format!(
                "The final answer {} is incorrect; the correct answer is {expected}.",
                format_rational(&v)
            )),
            None => problems.push(format!(
                "The response gives no final answer after ####; the correct answer is {expected}."
            )),
        }
        if problems.is_empty() {
            CORRECT_SENTINEL.to_string()
        } else {
            problems.join("\n")
        }
    }

    /// Fixed phrasing the judge can emit, for vocabulary building.
    pub fn phrase_texts() -> Vec<&'static str> {
        vec![
            FORMAT_JUDGMENT,
            "The step ' = ' is incorrect ; = .",
            "The final answer is incorrect ; the correct answer is .",
            "The response gives no final answer after #### ; the correct answer is .",
            CORRECT_SENTINEL,
        ]
    }
}

fn checked(op: Op, a: i64, b: i64) -> Option<i64> {
    match op {
        Op::Add => a.checked_add(b),
        Op::Sub => a.checked_sub(b),
        Op::Mul => a.checked_mul(b),
    }
}

impl Judge for RuleJudge {
    fn version(&self) -> String {
        RULE_JUDGE_VERSION.to_string()
    }

    fn source(&self) -> JudgeSource {
        JudgeSource::RuleBased
    }

    fn judge(&self, example: &ReasoningExample) -> Result<Judgment> {
        let text = Self::judgment_text(example);
        Ok(Judgment::from_text(&text, JudgeSource::RuleBased, self.key_for(example)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, Difficulty};
    use crate::judge::Verdict;

    fn with_output(out: &str) -> ReasoningExample {
        let mut e = generate_synthetic(2, 1, &Difficulty::default()).examples.remove(0);
        e.generated_output = Some(out.to_string());
        e
    }

    #[test]
    fn reference_solution_is_correct() {
        let d = generate_synthetic(5, 50, &Difficulty::default());
        for mut e in d.examples {
            e.generated_output = Some(e.standard_solution.clone());
            let j = RuleJudge.judge(&e).unwrap();
            assert_eq!(j.verdict, Verdict::Correct, "{}", e.standard_solution);
            assert_eq!(j.text, CORRECT_SENTINEL);
        }
    }

    #[test]
    fn wrong_step_is_named() {
        let e = with_output("Ann has 12 - 2 = 11 pens .\n#### 11");
        let j = RuleJudge.judge(&e).unwrap();
        assert_eq!(j.verdict, Verdict::Incorrect);
        assert!(j.text.contains("The step '12 - 2 = 11' is incorrect; 12 - 2 = 10."), "{}", j.text);
        assert!(j.text.contains("The final answer 11 is incorrect"));
    }

    #[test]
    fn empty_and_unparseable_outputs() {
        for out in ["", "   ", "pens pens pens"] {
            let j = RuleJudge.judge(&with_output(out)).unwrap();
            assert_eq!(j.verdict, Verdict::Incorrect);
            assert_eq!(j.text, FORMAT_JUDGMENT);
        }
    }

    #[test]
    fn missing_answer_marker() {
        let j = RuleJudge.judge(&with_output("Ann has 1 + 1 = 2 pens .")).unwrap();
        assert!(j.text.contains("no final answer"), "{}", j.text);
    }
}
