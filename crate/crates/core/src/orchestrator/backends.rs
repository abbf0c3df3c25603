//! Backend implementations behind one interface: deterministic replay from
//! fixtures, a seeded synthetic classifier, and (in `live.rs`) real HTTP
//! providers.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::PromptPayload;
use crate::labels::Verdict;
use crate::util::unit_draw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendErrorKind {
    Timeout,
    Network,
    RateLimited,
    Server,
    Client,
    FixtureMiss,
    Other,
}

/// A backend invocation failure with its retry classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub message: String,
}

impl BackendError {
    pub fn new(kind: BackendErrorKind, message: impl Into<String>) -> Self {
        BackendError { kind, message: message.into() }
    }

    /// Transient errors are retried: network failures, timeouts, HTTP 429
    /// and 5xx. Other client errors and fixture misses are not.
    pub fn is_transient(&self) -> bool {
        matches!(
            self.kind,
            BackendErrorKind::Timeout
                | BackendErrorKind::Network
                | BackendErrorKind::RateLimited
                | BackendErrorKind::Server
        )
    }
}

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

impl std::error::Error for BackendError {}

/// Behavioral contract for a model backend. `invoke` never mutates the
/// payload; logging is the dispatcher's responsibility.
#[async_trait]
pub trait Backend: Send + Sync {
    fn backend_id(&self) -> &str;
    async fn invoke(&self, payload: &PromptPayload) -> Result<String, BackendError>;
}

/// One canned response, keyed by `(backend_id, case_id)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub backend_id: String,
    pub case_id: String,
    pub raw_text: String,
}

/// Canned responses loaded from a line-delimited JSON fixture file. Text is
/// preserved byte-exactly through the JSON string encoding.
#[derive(Debug, Default, Clone)]
pub struct FixtureSet {
    responses: HashMap<(String, String), String>,
}

impl FixtureSet {
    pub fn load(path: &Path) -> std::io::Result<FixtureSet> {
        let text = std::fs::read_to_string(path)?;
        let mut responses = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("fixture line {}: {e}", i + 1),
                )
            })?;
            responses.insert((record.backend_id, record.case_id), record.raw_text);
        }
        Ok(FixtureSet { responses })
    }

    pub fn write(records: &[FixtureRecord], path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::new();
        for record in records {
            serde_json::to_writer(&mut buf, record)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
            buf.write_all(b"\n")?;
        }
        crate::util::write_atomic(path, &buf)
    }

    pub fn get(&self, backend_id: &str, case_id: &str) -> Option<&String> {
        self.responses.get(&(backend_id.to_string(), case_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

/// Replays canned responses; misses surface as non-transient backend errors.
pub struct ReplayBackend {
    backend_id: String,
    fixtures: Arc<FixtureSet>,
}

impl ReplayBackend {
    pub fn new(backend_id: impl Into<String>, fixtures: Arc<FixtureSet>) -> Self {
        ReplayBackend { backend_id: backend_id.into(), fixtures }
    }
}

#[async_trait]
impl Backend for ReplayBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    async fn invoke(&self, payload: &PromptPayload) -> Result<String, BackendError> {
        self.fixtures.get(&self.backend_id, payload.case_id()).cloned().ok_or_else(|| {
            BackendError::new(
                BackendErrorKind::FixtureMiss,
                format!("no fixture for ({}, {})", self.backend_id, payload.case_id()),
            )
        })
    }
}

/// Synthetic classifier with configurable sensitivity and specificity.
///
/// Emits the canonical response format with a verdict drawn deterministically
/// per `(seed, case_id)`; useful for ensemble studies without live models.
pub struct MockBackend {
    backend_id: String,
    sensitivity: f64,
    specificity: f64,
    seed: u64,
    truths: Arc<HashMap<String, Verdict>>,
}

impl MockBackend {
    pub fn new(
        backend_id: impl Into<String>,
        sensitivity: f64,
        specificity: f64,
        seed: u64,
        truths: Arc<HashMap<String, Verdict>>,
    ) -> Self {
        MockBackend { backend_id: backend_id.into(), sensitivity, specificity, seed, truths }
    }

    /// The deterministic verdict this profile emits for a case.
    pub fn response_verdict(
        sensitivity: f64,
        specificity: f64,
        seed: u64,
        case_id: &str,
        ground_truth: Verdict,
    ) -> Verdict {
        let u = unit_draw(seed, case_id);
        match ground_truth {
            Verdict::Abnormal => {
                if u < sensitivity {
                    Verdict::Abnormal
                } else {
                    Verdict::Normal
                }
            }
            Verdict::Normal => {
                if u < specificity {
                    Verdict::Normal
                } else {
                    Verdict::Abnormal
                }
            }
        }
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    async fn invoke(&self, payload: &PromptPayload) -> Result<String, BackendError> {
        let truth = self.truths.get(payload.case_id()).ok_or_else(|| {
            BackendError::new(
                BackendErrorKind::Other,
                format!("no ground truth for case {}", payload.case_id()),
            )
        })?;
        let verdict = Self::response_verdict(
            self.sensitivity,
            self.specificity,
            self.seed,
            payload.case_id(),
            *truth,
        );
        Ok(format!("POSSIBLE DIAGNOSES:\n{verdict}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::PromptPayload;

    fn payload(case_id: &str) -> PromptPayload {
        PromptPayload::new(
            case_id.to_string(),
            "",
            "Any findings?",
            vec![crate::orchestrator::ImageAttachment {
                base64_text: "aGVsbG8=".into(),
                mime_type: "image/jpeg".into(),
            }],
        )
        .unwrap()
    }

    #[tokio::test]
    async fn replay_returns_exact_fixture_text() {
        let records = vec![FixtureRecord {
            backend_id: "gpt".into(),
            case_id: "case007".into(),
            raw_text: "POSSIBLE DIAGNOSES:\n1".into(),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("responses.jsonl");
        FixtureSet::write(&records, &path).unwrap();
        let fixtures = Arc::new(FixtureSet::load(&path).unwrap());
        let backend = ReplayBackend::new("gpt", fixtures);
        let text = backend.invoke(&payload("case007")).await.unwrap();
        assert_eq!(text, "POSSIBLE DIAGNOSES:\n1");
    }

    #[tokio::test]
    async fn replay_miss_is_a_fixture_error() {
        let backend = ReplayBackend::new("gpt", Arc::new(FixtureSet::default()));
        let err = backend.invoke(&payload("missing")).await.unwrap_err();
        assert_eq!(err.kind, BackendErrorKind::FixtureMiss);
        assert!(!err.is_transient());
    }

    #[test]
    fn fixture_text_round_trips_byte_exactly() {
        let curly = "POSSIBLE DIAGNOSES:\n1\n\ttabs \"quotes\" and \u{00e9}accents";
        let records = vec![FixtureRecord {
            backend_id: "b".into(),
            case_id: "c".into(),
            raw_text: curly.into(),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        FixtureSet::write(&records, &path).unwrap();
        let loaded = FixtureSet::load(&path).unwrap();
        assert_eq!(loaded.get("b", "c").unwrap(), curly);
    }

    #[tokio::test]
    async fn perfect_mock_always_matches_truth() {
        let truths: HashMap<String, Verdict> = (0..50)
            .map(|i| {
                let v = if i % 2 == 0 { Verdict::Normal } else { Verdict::Abnormal };
                (format!("c{i}"), v)
            })
            .collect();
        let truths = Arc::new(truths);
        let mock = MockBackend::new("mock", 1.0, 1.0, 9, truths.clone());
        for (case_id, truth) in truths.iter() {
            let text = mock.invoke(&payload(case_id)).await.unwrap();
            let expected = format!("POSSIBLE DIAGNOSES:\n{truth}");
            assert_eq!(text, expected);
        }
    }

    #[tokio::test]
    async fn anti_classifier_always_inverts() {
        let truths =
            Arc::new(HashMap::from([("c0".to_string(), Verdict::Abnormal)]));
        let mock = MockBackend::new("mock", 0.0, 0.0, 9, truths);
        let text = mock.invoke(&payload("c0")).await.unwrap();
        assert_eq!(text, "POSSIBLE DIAGNOSES:\n0");
    }

    #[test]
    fn mock_calibration_over_large_samples() {
        // Empirical true-positive rate over 10,000 positive cases.
        let hits = (0..10_000)
            .filter(|i| {
                MockBackend::response_verdict(0.8, 0.9, 1, &format!("p{i}"), Verdict::Abnormal)
                    == Verdict::Abnormal
            })
            .count();
        let rate = hits as f64 / 10_000.0;
        assert!((rate - 0.8).abs() < 0.01, "TPR {rate}");
    }

    #[test]
    fn mock_is_deterministic_per_seed_and_case() {
        let a = MockBackend::response_verdict(0.5, 0.5, 3, "case-x", Verdict::Abnormal);
        let b = MockBackend::response_verdict(0.5, 0.5, 3, "case-x", Verdict::Abnormal);
        assert_eq!(a, b);
    }
}
