//! Case-level record types shared across the pipeline: the ingested case,
//! a backend's response, and the fused consensus outcome.
//!
//! All of these are immutable value objects; they are cheap to clone and
//! safe to share between concurrent tasks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{LabelVector, Verdict};
use crate::parser::ParseFailure;

/// Radiograph projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ViewType {
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "AP")]
    Ap,
    Lateral,
    #[default]
    Unknown,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("case {case_id} has no image references")]
    NoImages { case_id: String },
    #[error("consensus outcome for {case_id} violates the gate invariant: {detail}")]
    InvalidOutcome { case_id: String, detail: String },
}

/// One study: identifier, image references, view, labels, optional synthetic
/// note, and the resolved ground-truth verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    /// Paths relative to the dataset image root, in dispatch order.
    pub image_refs: Vec<String>,
    pub view: ViewType,
    pub labels: LabelVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub ground_truth: Verdict,
}

impl CaseRecord {
    pub fn new(
        case_id: String,
        image_refs: Vec<String>,
        view: ViewType,
        labels: LabelVector,
        ground_truth: Verdict,
    ) -> Result<Self, RecordError> {
        if image_refs.is_empty() {
            return Err(RecordError::NoImages { case_id });
        }
        Ok(CaseRecord { case_id, image_refs, view, labels, note: None, ground_truth })
    }
}

/// Why a backend produced no usable verdict for a case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputError {
    /// The backend call itself failed (network, timeout, fixture miss, ...).
    Backend { message: String },
    /// The backend responded but the response did not parse to a verdict.
    Parse { reason: ParseFailure },
}

/// One backend's response for one case. Exactly one of `verdict` / `error`
/// is present; `raw_text` is kept verbatim for audit (empty when the backend
/// call itself failed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub backend_id: String,
    pub case_id: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<OutputError>,
}

impl ModelOutput {
    pub fn parsed(
        backend_id: String,
        case_id: String,
        raw_text: String,
        verdict: Verdict,
        latency_ms: u64,
    ) -> Self {
        ModelOutput { backend_id, case_id, raw_text, verdict: Some(verdict), latency_ms, error: None }
    }

    pub fn parse_failed(
        backend_id: String,
        case_id: String,
        raw_text: String,
        reason: ParseFailure,
        latency_ms: u64,
    ) -> Self {
        ModelOutput {
            backend_id,
            case_id,
            raw_text,
            verdict: None,
            latency_ms,
            error: Some(OutputError::Parse { reason }),
        }
    }

    pub fn backend_failed(
        backend_id: String,
        case_id: String,
        message: String,
        latency_ms: u64,
    ) -> Self {
        ModelOutput {
            backend_id,
            case_id,
            raw_text: String::new(),
            verdict: None,
            latency_ms,
            error: Some(OutputError::Backend { message }),
        }
    }

    /// True when the backend returned response text (even if it failed to
    /// parse); false when the call itself failed.
    pub fn has_response(&self) -> bool {
        !matches!(self.error, Some(OutputError::Backend { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusStatus {
    Consensus,
    Flagged,
}

/// Why a case was flagged for manual review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlagReason {
    /// Inter-model similarity fell below the configured threshold.
    BelowThreshold,
    /// Similarity cleared the gate but the parsed verdicts disagree; verdict
    /// disagreement always flags the case.
    VerdictDisagreement,
    /// At least one backend response could not be parsed to a verdict.
    ParseFailure,
    /// Fewer than two backends produced response text.
    BackendFailure,
    /// The similarity metric itself failed (e.g. embedding provider error).
    MetricFailure { message: String },
}

/// A backend's parsed verdict as recorded on the fused outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendVerdict {
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
}

/// The fused result for one case: an accepted consensus verdict with its
/// similarity score, or a manual-review flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub case_id: String,
    /// Inter-model similarity in [0, 1] (minimum pairwise score when more
    /// than two backends contribute).
    pub similarity: f64,
    pub status: ConsensusStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag_reason: Option<FlagReason>,
    /// Contributing outputs, ordered by backend id.
    pub backend_verdicts: Vec<BackendVerdict>,
}

impl ConsensusOutcome {
    /// Validates the structural invariant: consensus status, a present fused
    /// verdict, and an absent flag reason all travel together.
    pub fn validate(&self) -> Result<(), RecordError> {
        let ok = match self.status {
            ConsensusStatus::Consensus => {
                self.fused_verdict.is_some() && self.flag_reason.is_none()
            }
            ConsensusStatus::Flagged => self.fused_verdict.is_none() && self.flag_reason.is_some(),
        };
        if !(0.0..=1.0).contains(&self.similarity) {
            return Err(RecordError::InvalidOutcome {
                case_id: self.case_id.clone(),
                detail: format!("similarity {} outside [0, 1]", self.similarity),
            });
        }
        if ok {
            Ok(())
        } else {
            Err(RecordError::InvalidOutcome {
                case_id: self.case_id.clone(),
                detail: format!(
                    "status {:?} with fused_verdict {:?} and flag_reason {:?}",
                    self.status, self.fused_verdict, self.flag_reason
                ),
            })
        }
    }

    pub fn is_consensus(&self) -> bool {
        self.status == ConsensusStatus::Consensus
    }
}
