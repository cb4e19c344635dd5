//! The three prompt conditions a fixed response is scored under, and the
//! versioned instruction templates.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, ReasoningExample, TokenSequence, Vocab};
use crate::error::{Error, Result};

const TOY_V1: &str = include_str!("../templates/toy-v1.txt");
const PAPER_V1: &str = include_str!("../templates/paper-v1.txt");
const JUDGE_V1: &str = include_str!("../templates/judge-v1.txt");

pub const CORRECT_SENTINEL: &str = "### The response is correct. ###";

pub const JUDGMENT_OPEN: &str = "[JUDGMENT]";
pub const JUDGMENT_CLOSE: &str = "[/JUDGMENT]";
pub const REFERENCE_OPEN: &str = "[REFERENCE]";
pub const REFERENCE_CLOSE: &str = "[/REFERENCE]";

/// Chain-of-thought instruction with the `####` answer format and few-shot examples.
pub fn cot_instruction() -> &'static str {
    PAPER_V1.trim_end()
}

/// Instruction given to a judge model for grading a response.
pub fn judge_instruction() -> &'static str {
    JUDGE_V1.trim_end()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCondition {
    Base,
    Judge,
    Standard,
}

impl PromptCondition {
    pub const ALL: [PromptCondition; 3] = [Self::Base, Self::Judge, Self::Standard];

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Judge => "judge",
            Self::Standard => "standard",
        }
    }
}

impl fmt::Display for PromptCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TemplateVersion {
    /// One-line task header sized for the desk-scale models.
    #[default]
    #[serde(rename = "toy-v1")]
    ToyV1,
    /// Full instruction with few-shot examples; needs a window of at least 1024.
    #[serde(rename = "paper-v1")]
    PaperV1,
}

impl TemplateVersion {
    pub fn name(self) -> &'static str {
        match self {
            Self::ToyV1 => "toy-v1",
            Self::PaperV1 => "paper-v1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy-v1" => Ok(Self::ToyV1),
            "paper-v1" => Ok(Self::PaperV1),
            other => Err(Error::UnknownTemplate(other.to_string())),
        }
    }

    pub fn header(self) -> &'static str {
        match self {
            Self::ToyV1 => TOY_V1.trim_end(),
            Self::PaperV1 => cot_instruction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub condition: PromptCondition,
    pub version: TemplateVersion,
    pub text: String,
    pub token_ids: TokenSequence,
}

/// Text of the prompt for `condition`. Judge and Standard extend the Base
/// text with one sentinel-delimited block, so the response is always
/// appended after a complete context.
pub fn render_text(
    condition: PromptCondition,
    example: &ReasoningExample,
    version: TemplateVersion,
) -> Result<String> {
    let missing = |what: &'static str| Error::MissingPromptContent {
        condition: condition.name(),
        id: example.id.clone(),
        missing: what,
    };
    if example.question.trim().is_empty() {
        return Err(missing("question"));
    }
    let mut text = format!("{}\n{}\n", version.header(), example.question.trim());
    match condition {
        PromptCondition::Base => {}
        PromptCondition::Judge => {
            let judgment = example
                .judgment
                .as_deref()
                .map(str::trim)
                .filter(|j| !j.is_empty())
                .ok_or_else(|| missing("judgment"))?;
            text.push_str(&format!("{JUDGMENT_OPEN}\n{judgment}\n{JUDGMENT_CLOSE}\n"));
        }
        PromptCondition::Standard => {
            let solution = example.standard_solution.trim();
            if solution.is_empty() {
                return Err(missing("standard solution"));
            }
            text.push_str(&format!("{REFERENCE_OPEN}\n{solution}\n{REFERENCE_CLOSE}\n"));
        }
    }
    Ok(text)
}

pub fn render(
    condition: PromptCondition,
    example: &ReasoningExample,
    version: TemplateVersion,
    vocab: &Vocab,
) -> Result<RenderedPrompt> {
    let text = render_text(condition, example, version)?;
    let token_ids = tokenize(&text, vocab);
    Ok(RenderedPrompt {
        condition,
        version,
        text,
        token_ids,
    })
}

/// Every fixed string that can appear in a prompt, for vocabulary building.
pub fn template_texts(version: TemplateVersion) -> Vec<&'static str> {
    vec![
        version.header(),
        JUDGMENT_OPEN,
        JUDGMENT_CLOSE,
        REFERENCE_OPEN,
        REFERENCE_CLOSE,
    ]
}
