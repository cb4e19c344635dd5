//! Per-token loss scales and the batch objective built from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::collect::ConditionProbTable;
use crate::error::{Error, Result};
use crate::lm::LossConvention;
use crate::saliency::{Branch, Label, NlftConfig, SaliencyAssignment};

/// Correct-branch scale.
///
/// Saliency: `1 + ((p − p0) / (1 − p0))^c1`, in (1, 2].
/// Sub-saliency: `(p / p0)^c2`. Irrelevant: `(p / p0)^c3`.
pub fn scale_correct(label: Label, p_standard: f64, config: &NlftConfig) -> Result<f64> {
    let p = p_standard.clamp(config.eps, 1.0);
    let p0 = config.p0_correct;
    match label {
        Label::Saliency => {
            if p <= p0 {
                return Err(Error::SaliencyBelowThreshold { p, p0 });
            }
            Ok(1.0 + ((p - p0) / (1.0 - p0)).powf(config.c1))
        }
        Label::SubSaliency => Ok((p / p0).powf(config.c2)),
        Label::Irrelevant => Ok((p / p0).powf(config.c3)),
    }
}

/// Incorrect-branch scale: `2 / (1 + e^{−(r1 − r0)})` for salient tokens, 0 otherwise.
pub fn scale_incorrect(label: Label, r1: f64, config: &NlftConfig) -> f64 {
    match label {
        Label::Saliency => 2.0 / (1.0 + (-(r1 - config.r0)).exp()),
        Label::SubSaliency | Label::Irrelevant => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    pub values: Vec<f64>,
    pub branch: Branch,
}

pub fn compute_scales(
    table: &ConditionProbTable,
    assignment: &SaliencyAssignment,
    config: &NlftConfig,
) -> Result<ScaleVector> {
    let n = table.len();
    if assignment.labels.len() != n {
        return Err(Error::LengthMismatch {
            what: "labels",
            got: assignment.labels.len(),
            expected: n,
        });
    }
    let values = match assignment.branch {
        Branch::Correct => assignment
            .labels
            .iter()
            .zip(&table.p_standard)
            .map(|(&l, &p)| scale_correct(l, p, config))
            .collect::<Result<Vec<_>>>()?,
        Branch::Incorrect => {
            let ratios = assignment.ratios.as_ref().ok_or_else(|| {
                Error::WrongBranch(format!("incorrect assignment {} lacks ratios", assignment.example_id))
            })?;
            assignment
                .labels
                .iter()
                .zip(ratios)
                .map(|(&l, r)| scale_incorrect(l, r.r1, config))
                .collect()
        }
    };
    Ok(ScaleVector {
        values,
        branch: assignment.branch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTerm {
    pub example_id: String,
    pub index: usize,
    pub token: String,
    pub label: Label,
    pub scale: f64,
    pub p_base: f64,
    /// Unscaled term before the `1/N` normalization.
    pub term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub n_tokens: usize,
    pub per_token_terms: Vec<TokenTerm>,
    /// `(example_id, token index)` pairs whose probability was clamped to `1 − eps`.
    pub clamped: Vec<(String, usize)>,
}

impl LossValue {
    /// CSV breakdown: example_id,index,token,label,scale,p_base,term,weighted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("example_id,index,token,label,scale,p_base,term,weighted\n");
        let n = self.n_tokens.max(1) as f64;
        for t in &self.per_token_terms {
            let label = match t.label {
                Label::Saliency => "saliency",
                Label::SubSaliency => "sub_saliency",
                Label::Irrelevant => "irrelevant",
            };
            let token = t.token.replace('\n', "\\n").replace('"', "\"\"");
            let _ = writeln!(
                out,
                "{},{},\"{}\",{},{},{},{},{}",
                t.example_id,
                t.index,
                token,
                label,
                t.scale,
                t.p_base,
                t.term,
                t.scale * t.term / n
            );
        }
        out
    }
}

/// One example's inputs to the batch objective.
#[derive(Debug, Clone, Copy)]
pub struct ScaledExample<'a> {
    pub table: &'a ConditionProbTable,
    pub assignment: &'a SaliencyAssignment,
    pub scales: &'a ScaleVector,
}

/// Batch objective evaluated on the stored base-condition probabilities.
/// `N` is the total token count of all unfiltered examples.
pub fn nlft_loss(batch: &[ScaledExample<'_>], config: &NlftConfig) -> Result<LossValue> {
    let mut sum = 0.0;
    let mut n_tokens = 0;
    let mut per_token_terms = Vec::new();
    let mut clamped = Vec::new();
    for ex in batch {
        if ex.assignment.filtered_out {
            continue;
        }
        let len = ex.table.len();
        if ex.scales.values.len() != len || ex.assignment.labels.len() != len {
            return Err(Error::LengthMismatch {
                what: "scales",
                got: ex.scales.values.len(),
                expected: len,
            });
        }
        n_tokens += len;
        for t in 0..len {
            let s = ex.scales.values[t];
            if s == 0.0 {
                continue;
            }
            let p = ex.table.p_base[t].clamp(config.eps, 1.0);
            let term = match (config.loss_convention, ex.scales.branch) {
                (LossConvention::Unlikelihood, Branch::Correct) => -p.ln(),
                (LossConvention::Unlikelihood, Branch::Incorrect) => {
                    let mut one_minus = 1.0 - p;
                    if one_minus < config.eps {
                        one_minus = config.eps;
                        clamped.push((ex.table.example_id.clone(), t));
                    }
                    -one_minus.ln()
                }
                (LossConvention::Literal, Branch::Correct) => p.ln(),
                (LossConvention::Literal, Branch::Incorrect) => 1.0 - p.ln(),
            };
            sum += s * term;
            per_token_terms.push(TokenTerm {
                example_id: ex.table.example_id.clone(),
                index: t,
                token: ex.table.tokens.get(t).cloned().unwrap_or_default(),
                label: ex.assignment.labels[t],
                scale: s,
                p_base: p,
                term,
            });
        }
    }
    let value = if n_tokens == 0 { 0.0 } else { sum / n_tokens as f64 };
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { index: 0 });
    }
    Ok(LossValue {
        value,
        n_tokens,
        per_token_terms,
        clamped,
    })
}

/// Token-mean negative log-likelihood: `(1/|y|) Σ −log P(y_t | X_base, y_<t)`.
pub fn sft_loss(logp_base: &[f64]) -> LossValue {
    let n = logp_base.len();
    let value = if n == 0 {
        0.0
    } else {
        logp_base.iter().map(|lp| -lp).sum::<f64>() / n as f64
    };
    LossValue {
        value,
        n_tokens: n,
        per_token_terms: Vec::new(),
        clamped: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::CollectedAt;
    use crate::saliency::RatioPair;

    fn cfg() -> NlftConfig {
        NlftConfig::default()
    }

    fn one_token(p_base: f64, correct: bool, scale: f64) -> (ConditionProbTable, SaliencyAssignment, ScaleVector) {
        let branch = if correct { Branch::Correct } else { Branch::Incorrect };
        (
            ConditionProbTable {
                example_id: "e".into(),
                tokens: vec!["x".into()],
                token_ids: vec![],
                p_base: vec![p_base],
                p_judge: (!correct).then(|| vec![0.5]),
                p_standard: vec![0.5],
                is_correct: correct,
                collected_at: CollectedAt::default(),
            },
            SaliencyAssignment {
                example_id: "e".into(),
                labels: vec![if correct { Label::Irrelevant } else { Label::Saliency }],
                ratios: (!correct).then(|| vec![RatioPair { r1: 2.0, r2: 2.0 }]),
                branch,
                filtered_out: false,
                clustered_neighbors: vec![],
            },
            ScaleVector {
                values: vec![scale],
                branch,
            },
        )
    }

    #[test]
    fn correct_scale_values() {
        assert_eq!(scale_correct(Label::Saliency, 1.0, &cfg()).unwrap(), 2.0);
        let s = scale_correct(Label::Saliency, 0.975, &cfg()).unwrap();
        assert!((s - 1.03125).abs() < 1e-12, "{s}");
        let sub = scale_correct(Label::SubSaliency, 0.475, &cfg()).unwrap();
        let irr = scale_correct(Label::Irrelevant, 0.475, &cfg()).unwrap();
        assert!((sub - 0.5f64.powf(0.3)).abs() < 1e-15);
        assert!((irr - 0.5f64.powf(0.6)).abs() < 1e-15);
        assert!((sub - 0.8123).abs() < 1e-4 && (irr - 0.6598).abs() < 1e-4);
        assert!(sub > irr);
    }

    #[test]
    fn saliency_at_or_below_threshold_is_an_allocation_bug() {
        assert!(scale_correct(Label::Saliency, 0.95, &cfg()).is_err());
        assert!(scale_correct(Label::Saliency, 0.5, &cfg()).is_err());
    }

    #[test]
    fn incorrect_scale_values() {
        let c = cfg();
        assert!((scale_incorrect(Label::Saliency, c.r0, &c) - 1.0).abs() < 1e-15);
        let s = scale_incorrect(Label::Saliency, c.r0 + 3f64.ln(), &c);
        assert!((s - 1.5).abs() < 1e-12);
        assert_eq!(scale_incorrect(Label::Irrelevant, 100.0, &c), 0.0);
    }

    #[test]
    fn both_conventions_on_one_token() {
        let (t, a, s) = one_token((-1f64).exp(), true, 1.0);
        let batch = [ScaledExample {
            table: &t,
            assignment: &a,
            scales: &s,
        }];
        let ul = nlft_loss(&batch, &cfg()).unwrap();
        assert!((ul.value - 1.0).abs() < 1e-15);
        let lit = nlft_loss(
            &batch,
            &NlftConfig {
                loss_convention: LossConvention::Literal,
                ..cfg()
            },
        )
        .unwrap();
        assert!((lit.value + 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_scales_and_filtered_give_zero() {
        let (t, a, s) = one_token(0.3, true, 0.0);
        let (t2, mut a2, s2) = one_token(0.3, false, 1.2);
        a2.filtered_out = true;
        let batch = [
            ScaledExample {
                table: &t,
                assignment: &a,
                scales: &s,
            },
            ScaledExample {
                table: &t2,
                assignment: &a2,
                scales: &s2,
            },
        ];
        let l = nlft_loss(&batch, &cfg()).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.n_tokens, 1);
        assert_eq!(nlft_loss(&batch[1..], &cfg()).unwrap().value, 0.0);
    }

    #[test]
    fn certain_incorrect_token_is_clamped() {
        let (t, a, s) = one_token(1.0, false, 1.0);
        let batch = [ScaledExample {
            table: &t,
            assignment: &a,
            scales: &s,
        }];
        let l = nlft_loss(&batch, &cfg()).unwrap();
        assert!(l.value.is_finite());
        assert_eq!(l.clamped, vec![("e".to_string(), 0)]);
    }

    #[test]
    fn sft_loss_of_uniform_model() {
        let l = sft_loss(&[-(10f64.ln()); 7]);
        assert!((l.value - 10f64.ln()).abs() < 1e-15);
        assert!((l.value - 2.3026).abs() < 1e-4);
        assert_eq!(sft_loss(&[]).value, 0.0);
    }

    #[test]
    fn breakdown_csv_has_header_and_rows() {
        let (t, a, s) = one_token(0.5, true, 0.7);
        let l = nlft_loss(
            &[ScaledExample {
                table: &t,
                assignment: &a,
                scales: &s,
            }],
            &cfg(),
        )
        .unwrap();
        let csv = l.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("example_id,index,token"));
    }
}
