//! Evaluation statistics: accuracy, 2x2 confusion matrices, weighted
//! precision/recall/F1, agreement decomposition, and McNemar's test.
//!
//! Conventions: 0/0 ratios are reported as 0 for per-class metrics; the
//! McNemar statistic carries no continuity correction; weighted recall
//! equals accuracy by construction (asserted in tests to 1e-12).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::labels::Verdict;
use crate::records::ConsensusOutcome;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("prediction and truth lists differ in length: {predictions} vs {truths}")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("at least one case is required")]
    Empty,
    #[error("no ground truth for case {case_id}")]
    MissingTruth { case_id: String },
}

/// Counts for a 2x2 confusion matrix; rows are the true class (0/1),
/// columns the predicted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix2x2 {
    pub true_negative: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_positive: u64,
}

impl ConfusionMatrix2x2 {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionMatrix2x2 {
            true_negative: tn,
            false_positive: fp,
            false_negative: fn_,
            true_positive: tp,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_negative + self.false_positive + self.false_negative + self.true_positive
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_negative + self.true_positive) as f64 / self.total() as f64
    }
}

/// Fraction of predictions matching the truths.
pub fn accuracy(predictions: &[Verdict], truths: &[Verdict]) -> Result<f64, StatsError> {
    check_paired(predictions, truths)?;
    let matches = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(matches as f64 / predictions.len() as f64)
}

/// Standard 2x2 confusion counts.
pub fn confusion(predictions: &[Verdict], truths: &[Verdict]) -> Result<ConfusionMatrix2x2, StatsError> {
    check_paired(predictions, truths)?;
    let mut cm = ConfusionMatrix2x2::default();
    for (p, t) in predictions.iter().zip(truths) {
        match (t, p) {
            (Verdict::Normal, Verdict::Normal) => cm.true_negative += 1,
            (Verdict::Normal, Verdict::Abnormal) => cm.false_positive += 1,
            (Verdict::Abnormal, Verdict::Normal) => cm.false_negative += 1,
            (Verdict::Abnormal, Verdict::Abnormal) => cm.true_positive += 1,
        }
    }
    Ok(cm)
}

fn check_paired(predictions: &[Verdict], truths: &[Verdict]) -> Result<(), StatsError> {
    if predictions.len() != truths.len() {
        return Err(StatsError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(StatsError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class precision/recall/F1 averaged with weights proportional to
/// true-class support. Weighted recall equals accuracy algebraically.
pub fn weighted_prf(cm: &ConfusionMatrix2x2) -> Result<WeightedPrf, StatsError> {
    if cm.total() == 0 {
        return Err(StatsError::Empty);
    }
    let (tn, fp, fn_, tp) = (
        cm.true_negative as f64,
        cm.false_positive as f64,
        cm.false_negative as f64,
        cm.true_positive as f64,
    );
    let support0 = tn + fp;
    let support1 = fn_ + tp;
    let total = support0 + support1;

    let precision0 = safe_div(tn, tn + fn_);
    let recall0 = safe_div(tn, support0);
    let f1_0 = safe_div(2.0 * precision0 * recall0, precision0 + recall0);

    let precision1 = safe_div(tp, tp + fp);
    let recall1 = safe_div(tp, support1);
    let f1_1 = safe_div(2.0 * precision1 * recall1, precision1 + recall1);

    Ok(WeightedPrf {
        precision: (support0 * precision0 + support1 * precision1) / total,
        recall: (support0 * recall0 + support1 * recall1) / total,
        f1: (support0 * f1_0 + support1 * f1_1) / total,
    })
}

/// Consensus/flag decomposition over a case set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub total_cases: u64,
    pub agreement_count: u64,
    pub agreement_correct: u64,
    pub agreement_incorrect: u64,
    pub disagreement_count: u64,
}

impl AgreementSummary {
    pub fn agreement_rate(&self) -> f64 {
        safe_div(self.agreement_count as f64, self.total_cases as f64)
    }

    /// Accuracy over agreed cases; absent (not 0) when nothing agreed.
    pub fn consensus_accuracy(&self) -> Option<f64> {
        (self.agreement_count > 0)
            .then(|| self.agreement_correct as f64 / self.agreement_count as f64)
    }
}

/// Decomposes outcomes into agreement counts against ground truth.
pub fn agreement_summary(
    outcomes: &[ConsensusOutcome],
    truths: &HashMap<String, Verdict>,
) -> Result<AgreementSummary, StatsError> {
    if outcomes.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut summary = AgreementSummary {
        total_cases: outcomes.len() as u64,
        agreement_count: 0,
        agreement_correct: 0,
        agreement_incorrect: 0,
        disagreement_count: 0,
    };
    for outcome in outcomes {
        match outcome.fused_verdict {
            Some(fused) => {
                let truth = truths
                    .get(&outcome.case_id)
                    .ok_or_else(|| StatsError::MissingTruth { case_id: outcome.case_id.clone() })?;
                summary.agreement_count += 1;
                if fused == *truth {
                    summary.agreement_correct += 1;
                } else {
                    summary.agreement_incorrect += 1;
                }
            }
            None => summary.disagreement_count += 1,
        }
    }
    Ok(summary)
}

/// McNemar's paired test on discordant counts.
///
/// `b` counts cases the individual model got right and the consensus got
/// wrong; `c` the opposite. With `b + c = 0` the statistic is undefined and
/// both fields are absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    pub b: u64,
    pub c: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_square: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

impl McNemarResult {
    pub fn applicable(&self) -> bool {
        self.chi_square.is_some()
    }
}

/// chi^2 = (b - c)^2 / (b + c), uncorrected, with the p-value from the
/// one-degree-of-freedom chi-square survival function.
pub fn mcnemar(b: u64, c: u64) -> McNemarResult {
    if b + c == 0 {
        return McNemarResult { b, c, chi_square: None, p_value: None };
    }
    let diff = b as f64 - c as f64;
    let chi_square = diff * diff / (b + c) as f64;
    McNemarResult { b, c, chi_square: Some(chi_square), p_value: Some(chi_square_p_value(chi_square)) }
}

/// Survival function of the chi-square distribution with one degree of
/// freedom: p = erfc(sqrt(x / 2)).
pub fn chi_square_p_value(chi_square: f64) -> f64 {
    erfc((chi_square / 2.0).sqrt())
}
