//! Saliency allocation from probability contrasts.
//!
//! Correct responses: a token is salient when its probability under the
//! reference-solution prompt exceeds `p0_correct`; non-salient tokens in the
//! same phrase and within `cluster_radius` become sub-salient.
//!
//! Incorrect responses: a token is salient when both judge ratios exceed `r0`
//! and its judge-conditioned probability exceeds `p0_incorrect`. Everything
//! else is irrelevant. Responses whose salient fraction exceeds
//! `filter_threshold` are excluded from training.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::collect::ConditionProbTable;
use crate::error::{Error, Result};
use crate::lm::LossConvention;

/// Which probability the `p0_incorrect` gate reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IncorrectGate {
    #[default]
    Judge,
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NlftConfig {
    pub p0_correct: f64,
    pub p0_incorrect: f64,
    pub r0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub eps: f64,
    pub cluster_radius: usize,
    pub filter_threshold: f64,
    pub loss_convention: LossConvention,
    pub incorrect_gate: IncorrectGate,
}

impl Default for NlftConfig {
    fn default() -> Self {
        NlftConfig {
            p0_correct: 0.95,
            p0_incorrect: 0.01,
            r0: 1.5,
            c1: 5.0,
            c2: 0.3,
            c3: 0.6,
            eps: 1e-12,
            cluster_radius: 2,
            filter_threshold: 0.5,
            loss_convention: LossConvention::Unlikelihood,
            incorrect_gate: IncorrectGate::Judge,
        }
    }
}

impl NlftConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0 < self.p0_incorrect && self.p0_incorrect < self.p0_correct && self.p0_correct < 1.0) {
            return bad("need 0 < p0_incorrect < p0_correct < 1");
        }
        if !(self.r0 > 0.0) {
            return bad("r0 must be positive");
        }
        if !(self.c2 < self.c3) {
            return bad("c2 must be smaller than c3");
        }
        if !(self.c1 > 0.0) {
            return bad("c1 must be positive");
        }
        if !(self.filter_threshold > 0.0 && self.filter_threshold <= 1.0) {
            return bad("filter_threshold must lie in (0, 1]");
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return bad("eps must lie in (0, 1e-3)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Saliency,
    SubSaliency,
    Irrelevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPair {
    pub r1: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyAssignment {
    pub example_id: String,
    pub labels: Vec<Label>,
    /// Present for the incorrect branch only, one pair per token.
    pub ratios: Option<Vec<RatioPair>>,
    pub branch: Branch,
    pub filtered_out: bool,
    /// Incorrect branch: phrase neighbours of salient tokens. They stay
    /// irrelevant and are kept for inspection only.
    pub clustered_neighbors: Vec<usize>,
}

impl SaliencyAssignment {
    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn saliency_indices(&self) -> Vec<usize> {
        indices_of(&self.labels, Label::Saliency)
    }
}

fn indices_of(labels: &[Label], label: Label) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == label)
        .map(|(i, _)| i)
        .collect()
}

/// Groups neighbours of salient tokens into their phrase.
pub trait ClusteringPolicy: Send + Sync {
    fn cluster(&self, tokens: &[String], saliency: &[usize], radius: usize) -> BTreeSet<usize>;
}

/// Phrase = maximal run of tokens closed by `.`, `;` or a newline (the
/// closing mark belongs to the run it ends). Neighbours must share the
/// salient token's phrase and lie within `radius` positions of it.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhraseWindow;

pub fn is_phrase_boundary(token: &str) -> bool {
    matches!(token, "." | ";" | "\n")
}

impl ClusteringPolicy for PhraseWindow {
    fn cluster(&self, tokens: &[String], saliency: &[usize], radius: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        if radius == 0 || saliency.is_empty() {
            return out;
        }
        let mut phrase = Vec::with_capacity(tokens.len());
        let mut current = 0usize;
        for t in tokens {
            phrase.push(current);
            if is_phrase_boundary(t) {
                current += 1;
            }
        }
        let salient: BTreeSet<usize> = saliency.iter().copied().collect();
        for &s in &salient {
            let lo = s.saturating_sub(radius);
            let hi = (s + radius).min(tokens.len().saturating_sub(1));
            for j in lo..=hi {
                if j != s && phrase[j] == phrase[s] && !salient.contains(&j) {
                    out.insert(j);
                }
            }
        }
        out
    }
}

pub fn cluster_sub_saliency(tokens: &[String], saliency: &[usize], config: &NlftConfig) -> BTreeSet<usize> {
    PhraseWindow.cluster(tokens, saliency, config.cluster_radius)
}

pub fn allocate_correct(table: &ConditionProbTable, config: &NlftConfig) -> Result<SaliencyAssignment> {
    allocate_correct_with(table, config, &PhraseWindow)
}

pub fn allocate_correct_with(
    table: &ConditionProbTable,
    config: &NlftConfig,
    policy: &dyn ClusteringPolicy,
) -> Result<SaliencyAssignment> {
    if !table.is_correct {
        return Err(Error::WrongBranch(format!(
            "example {} is incorrect; use the incorrect-branch allocator",
            table.example_id
        )));
    }
    let mut labels: Vec<Label> = table
        .p_standard
        .iter()
        .map(|&p| {
            if p > config.p0_correct {
                Label::Saliency
            } else {
                Label::Irrelevant
            }
        })
        .collect();
    let salient = indices_of(&labels, Label::Saliency);
    for j in policy.cluster(&table.tokens, &salient, config.cluster_radius) {
        labels[j] = Label::SubSaliency;
    }
    Ok(SaliencyAssignment {
        example_id: table.example_id.clone(),
        labels,
        ratios: None,
        branch: Branch::Correct,
        filtered_out: false,
        clustered_neighbors: Vec::new(),
    })
}

pub fn ratio_pair(p_base: f64, p_judge: f64, p_standard: f64, eps: f64) -> RatioPair {
    RatioPair {
        r1: p_judge / p_base.max(eps),
        r2: p_judge / p_standard.max(eps),
    }
}

pub fn allocate_incorrect(table: &ConditionProbTable, config: &NlftConfig) -> Result<SaliencyAssignment> {
    allocate_incorrect_with(table, config, &PhraseWindow)
}

pub fn allocate_incorrect_with(
    table: &ConditionProbTable,
    config: &NlftConfig,
    policy: &dyn ClusteringPolicy,
) -> Result<SaliencyAssignment> {
    if table.is_correct {
        return Err(Error::WrongBranch(format!(
            "example {} is correct; use the correct-branch allocator",
            table.example_id
        )));
    }
    let p_judge = table.p_judge.as_ref().ok_or_else(|| {
        Error::WrongBranch(format!("example {} has no judge probabilities", table.example_id))
    })?;
    let mut labels = Vec::with_capacity(p_judge.len());
    let mut ratios = Vec::with_capacity(p_judge.len());
    for t in 0..p_judge.len() {
        let pair = ratio_pair(table.p_base[t], p_judge[t], table.p_standard[t], config.eps);
        let gate = match config.incorrect_gate {
            IncorrectGate::Judge => p_judge[t],
            IncorrectGate::Base => table.p_base[t],
        };
        let salient = pair.r1 > config.r0 && pair.r2 > config.r0 && gate > config.p0_incorrect;
        labels.push(if salient { Label::Saliency } else { Label::Irrelevant });
        ratios.push(pair);
    }
    let salient = indices_of(&labels, Label::Saliency);
    let clustered_neighbors = policy
        .cluster(&table.tokens, &salient, config.cluster_radius)
        .into_iter()
        .collect();
    let mut assignment = SaliencyAssignment {
        example_id: table.example_id.clone(),
        labels,
        ratios: Some(ratios),
        branch: Branch::Incorrect,
        filtered_out: false,
        clustered_neighbors,
    };
    assignment.filtered_out = should_filter(&assignment, config)?;
    Ok(assignment)
}

/// Dispatches on the table's correctness flag.
pub fn allocate(table: &ConditionProbTable, config: &NlftConfig) -> Result<SaliencyAssignment> {
    if table.is_correct {
        allocate_correct(table, config)
    } else {
        allocate_incorrect(table, config)
    }
}

/// Fraction of salient tokens in an incorrect response.
pub fn erroneous_fraction(assignment: &SaliencyAssignment) -> Result<f64> {
    if assignment.branch != Branch::Incorrect {
        return Err(Error::WrongBranch(format!(
            "filtering applies to incorrect responses only (example {})",
            assignment.example_id
        )));
    }
    if assignment.labels.is_empty() {
        return Ok(0.0);
    }
    Ok(assignment.count(Label::Saliency) as f64 / assignment.labels.len() as f64)
}

pub fn should_filter(assignment: &SaliencyAssignment, config: &NlftConfig) -> Result<bool> {
    Ok(erroneous_fraction(assignment)? > config.filter_threshold)
}

/// JSONL record for assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub example_id: String,
    pub labels: Vec<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<Vec<f64>>,
    pub filtered: bool,
}

impl From<&SaliencyAssignment> for AssignmentRecord {
    fn from(a: &SaliencyAssignment) -> Self {
        AssignmentRecord {
            example_id: a.example_id.clone(),
            labels: a.labels.clone(),
            r1: a.ratios.as_ref().map(|r| r.iter().map(|p| p.r1).collect()),
            r2: a.ratios.as_ref().map(|r| r.iter().map(|p| p.r2).collect()),
            filtered: a.filtered_out,
        }
    }
}

impl From<AssignmentRecord> for SaliencyAssignment {
    fn from(r: AssignmentRecord) -> Self {
        let ratios = match (r.r1, r.r2) {
            (Some(a), Some(b)) => Some(a.into_iter().zip(b).map(|(r1, r2)| RatioPair { r1, r2 }).collect()),
            _ => None,
        };
        SaliencyAssignment {
            example_id: r.example_id,
            branch: if ratios.is_some() {
                Branch::Incorrect
            } else {
                Branch::Correct
            },
            labels: r.labels,
            ratios,
            filtered_out: r.filtered,
            clustered_neighbors: Vec::new(),
        }
    }
}
