//! Templated multi-step arithmetic word problems with GSM8K-style reference
//! solutions (one `a op b = c` step per line, final `#### N`).

use num_rational::Rational64;
use rand::{Rng, SeedableRng};
use regex::Regex;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Provenance, ReasoningExample};
use super::tokenize::{pretokenize, TokenizerMode, Vocab};

const NAMES: &[&str] = &[
    "Tom", "Anna", "Ben", "Lily", "Sam", "Mia", "Leo", "Emma", "Jack", "Zoe",
];
const OBJECTS: &[&str] = &[
    "apples", "books", "coins", "pencils", "stickers", "marbles", "cookies", "cards",
];
const GAIN_VERBS: &[&str] = &["gets", "buys", "finds"];
const LOSS_VERBS: &[&str] = &["gives away", "loses", "sells"];

pub const SOURCE_NAME: &str = "synthetic-arithmetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Difficulty {
    pub operand_min: i64,
    pub operand_max: i64,
    pub steps: usize,
    /// Allow one multiplication step (factor 2 or 3) per problem.
    pub multiply: bool,
}

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty {
            operand_min: 1,
            operand_max: 20,
            steps: 2,
            multiply: true,
        }
    }
}

impl Difficulty {
    /// Upper bound on any number appearing in a generated problem.
    pub fn max_value(&self) -> i64 {
        let steps = self.steps as i64;
        if self.multiply {
            self.operand_max * steps.max(1) * 3
        } else {
            self.operand_max * (steps + 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Op> {
        match s {
            "+" => Some(Op::Add),
            "-" => Some(Op::Sub),
            "*" | "x" | "×" => Some(Op::Mul),
            _ => None,
        }
    }

    pub fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        }
    }
}

struct Step {
    op: Op,
    operand: i64,
    verb: &'static str,
}

fn plan_steps(rng: &mut ChaCha8Rng, start: i64, d: &Difficulty) -> Vec<Step> {
    let mut value = start;
    let mut used_mul = false;
    let mut steps = Vec::with_capacity(d.steps);
    for _ in 0..d.steps {
        let mut op = match rng.random_range(0..3) {
            0 => Op::Add,
            1 => Op::Sub,
            _ if d.multiply && !used_mul => Op::Mul,
            _ => Op::Add,
        };
        if op == Op::Sub && value < d.operand_min {
            op = Op::Add;
        }
        let (operand, verb) = match op {
            Op::Add => (
                rng.random_range(d.operand_min..=d.operand_max),
                GAIN_VERBS[rng.random_range(0..GAIN_VERBS.len())],
            ),
            Op::Sub => (
                rng.random_range(d.operand_min..=d.operand_max.min(value)),
                LOSS_VERBS[rng.random_range(0..LOSS_VERBS.len())],
            ),
            Op::Mul => {
                used_mul = true;
                (rng.random_range(2..=3), "")
            }
        };
        value = op.apply(value, operand);
        steps.push(Step { op, operand, verb });
    }
    steps
}

fn make_example(rng: &mut ChaCha8Rng, id: String, d: &Difficulty) -> ReasoningExample {
    let name = NAMES[rng.random_range(0..NAMES.len())];
    let object = OBJECTS[rng.random_range(0..OBJECTS.len())];
    let start = rng.random_range(d.operand_min..=d.operand_max);
    let steps = plan_steps(rng, start, d);

    let mut question = format!("{name} has {start} {object} .");
    let mut lines = Vec::with_capacity(steps.len() + 1);
    let mut value = start;
    for step in &steps {
        match step.op {
            Op::Add => question.push_str(&format!(
                " {name} {} {} more {object} .",
                step.verb, step.operand
            )),
            Op::Sub => question.push_str(&format!(" {name} {} {} {object} .", step.verb, step.operand)),
            Op::Mul => question.push_str(&format!(
                " Then the number of {object} becomes {} times as large .",
                step.operand
            )),
        }
        let next = step.op.apply(value, step.operand);
        lines.push(format!(
            "{name} has {value} {} {} = {next} {object} .",
            step.op.symbol(),
            step.operand
        ));
        value = next;
    }
    question.push_str(&format!(" How many {object} does {name} have now ?"));
    lines.push(format!("#### {value}"));

    ReasoningExample {
        id,
        question,
        standard_solution: lines.join("\n"),
        standard_answer: Rational64::from_integer(value),
        generated_output: None,
        judgment: None,
        is_correct: None,
    }
}

/// Generates `count` problems deterministically from `seed`.
pub fn generate_synthetic(seed: u64, count: usize, difficulty: &Difficulty) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..count)
        .map(|i| make_example(&mut rng, format!("synth-{seed}-{i:05}"), difficulty))
        .collect();
    Dataset {
        examples,
        provenance: Provenance {
            source: SOURCE_NAME.into(),
            seed: Some(seed),
            split: "train".into(),
        },
    }
}

/// A plausible wrong response to `example`: one step's result is off by a
/// small amount and the error carries through the later steps and the final
/// answer. Every number stays within `[0, difficulty.max_value()]`. Returns
/// `None` when the solution has no step to corrupt.
pub fn flawed_solution(example: &ReasoningExample, difficulty: &Difficulty, rng: &mut impl Rng) -> Option<String> {
    let step = Regex::new(r"(\d+) ([-+*]) (\d+) = (\d+)").expect("valid pattern");
    let lines: Vec<&str> = example.standard_solution.lines().collect();
    let step_lines: Vec<usize> = (0..lines.len()).filter(|&i| step.is_match(lines[i])).collect();
    if step_lines.is_empty() {
        return None;
    }
    let target = step_lines[rng.random_range(0..step_lines.len())];
    let max = difficulty.max_value();
    let mut carried: Option<i64> = None;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let Some(c) = step.captures(line) else {
            if line.starts_with("####") {
                if let Some(v) = carried {
                    out.push(format!("#### {v}"));
                    continue;
                }
            }
            out.push(line.to_string());
            continue;
        };
        let whole = c.get(0).expect("match");
        let mut a: i64 = c[1].parse().ok()?;
        let op = Op::from_symbol(&c[2])?;
        let b: i64 = c[3].parse().ok()?;
        let original: i64 = c[4].parse().ok()?;
        if let Some(v) = carried {
            a = v;
        }
        let mut result = op.apply(a, b);
        if i == target {
            let deltas: Vec<i64> = [-2, -1, 1, 2]
                .into_iter()
                .filter(|d| (0..=max).contains(&(result + d)))
                .collect();
            if deltas.is_empty() {
                return None;
            }
            result += deltas[rng.random_range(0..deltas.len())];
        }
        if i >= target {
            if !(0..=max).contains(&result) {
                return None;
            }
            carried = Some(result);
        } else {
            debug_assert_eq!(result, original);
        }
        out.push(format!(
            "{}{a} {} {b} = {result}{}",
            &line[..whole.start()],
            op.symbol(),
            &line[whole.end()..]
        ));
    }
    Some(out.join("\n"))
}

/// Every word the generator can emit, including all reachable numbers.
pub fn generator_pieces(difficulty: &Difficulty) -> Vec<String> {
    let mut text = String::new();
    for w in NAMES
        .iter()
        .chain(OBJECTS)
        .chain(GAIN_VERBS)
        .chain(LOSS_VERBS)
    {
        text.push_str(w);
        text.push(' ');
    }
    text.push_str(
        "has more . Then the number of becomes times as large How many does have now ? + - * = \n ####",
    );
    let mut pieces: Vec<String> = pretokenize(&text, TokenizerMode::Word)
        .into_iter()
        .map(|(p, _)| p.to_string())
        .collect();
    pieces.extend((0..=difficulty.max_value()).map(|n| n.to_string()));
    pieces
}

/// Vocabulary covering generated problems plus any extra texts (prompt
/// headers, judgment phrasing).
pub fn task_vocabulary<'a>(
    difficulty: &Difficulty,
    extra_texts: impl IntoIterator<Item = &'a str>,
) -> Vocab {
    let mut pieces = generator_pieces(difficulty);
    for t in extra_texts {
        pieces.extend(
            pretokenize(t, TokenizerMode::Word)
                .into_iter()
                .map(|(p, _)| p.to_string()),
        );
    }
    pieces.sort();
    pieces.dedup();
    Vocab::from_pieces(pieces, TokenizerMode::Word)
}
