//! Prompt construction and concurrent backend dispatch.
//!
//! Every backend in a dispatch receives the identical payload. Invocations
//! run concurrently with per-backend timeout and exponential-backoff retry;
//! retries of one backend never block another. Results are ordered by
//! backend id so downstream reports are independent of scheduling.

mod backends;
mod live;
mod prompt;

pub use backends::{
    Backend, BackendError, BackendErrorKind, FixtureRecord, FixtureSet, MockBackend, ReplayBackend,
};
pub use live::{ApiFlavor, LiveHttpBackend};
pub use prompt::{build_prompt, PROMPT_TEMPLATE};

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::Verdict;
use crate::parser::{parse_response, ParseResult};
use crate::records::ModelOutput;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("question must be non-empty")]
    EmptyQuestion,
    #[error("payload must carry at least one image")]
    NoImages,
    #[error("dispatch requires at least two backends, got {got}")]
    TooFewBackends { got: usize },
    #[error("backend {backend_id}: {detail}")]
    BackendConfig { backend_id: String, detail: String },
    #[error("fixture file {path}: {source}")]
    Fixture { path: PathBuf, source: std::io::Error },
}

/// All backend invocations for a case failed; the case is unevaluable. The
/// error outputs are preserved for the run log.
#[derive(Debug, Error)]
#[error("all {} backends failed for case {case_id}", outputs.len())]
pub struct AllBackendsFailed {
    pub case_id: String,
    pub outputs: Vec<ModelOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub base64_text: String,
    pub mime_type: String,
}

/// The identical payload handed to every backend for a case. Prompt text is
/// produced only by [`build_prompt`]; construct through [`PromptPayload::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPayload {
    case_id: String,
    prompt_text: String,
    images: Vec<ImageAttachment>,
    question: String,
    context: String,
}

impl PromptPayload {
    pub fn new(
        case_id: String,
        context: &str,
        question: &str,
        images: Vec<ImageAttachment>,
    ) -> Result<Self, OrchestratorError> {
        if images.is_empty() {
            return Err(OrchestratorError::NoImages);
        }
        let prompt_text = build_prompt(context, question)?;
        Ok(PromptPayload {
            case_id,
            prompt_text,
            images,
            question: question.to_string(),
            context: context.to_string(),
        })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn prompt_text(&self) -> &str {
        &self.prompt_text
    }

    pub fn images(&self) -> &[ImageAttachment] {
        &self.images
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn context(&self) -> &str {
        &self.context
    }
}

/// Per-backend timeout/retry policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_initial_ms")]
    pub backoff_initial_ms: u64,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_initial_ms() -> u64 {
    1_000
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_initial_ms: default_backoff_initial_ms(),
        }
    }
}

/// Kind-specific backend configuration; the enum makes invalid field
/// combinations unrepresentable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    LiveHttp {
        endpoint: String,
        model_name: String,
        credential_env_var: String,
        api_flavor: ApiFlavor,
    },
    Replay {
        fixture_path: PathBuf,
    },
    Mock {
        sensitivity: f64,
        specificity: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend_id: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(flatten)]
    pub retry: RetryPolicy,
}

/// A backend paired with its retry policy, ready to dispatch.
#[derive(Clone)]
pub struct ConfiguredBackend {
    pub backend: Arc<dyn Backend>,
    pub retry: RetryPolicy,
}

/// Instantiates a backend from configuration. Mock backends need the ground
/// truth map; replay backends load their fixture file once, up front.
pub fn build_backend(
    config: &BackendConfig,
    truths: &Arc<HashMap<String, Verdict>>,
) -> Result<ConfiguredBackend, OrchestratorError> {
    let backend: Arc<dyn Backend> = match &config.kind {
        BackendKind::Replay { fixture_path } => {
            let fixtures = FixtureSet::load(fixture_path).map_err(|source| {
                OrchestratorError::Fixture { path: fixture_path.clone(), source }
            })?;
            Arc::new(ReplayBackend::new(config.backend_id.clone(), Arc::new(fixtures)))
        }
        BackendKind::Mock { sensitivity, specificity, seed } => {
            for (name, value) in [("sensitivity", sensitivity), ("specificity", specificity)] {
                if !(0.0..=1.0).contains(value) {
                    return Err(OrchestratorError::BackendConfig {
                        backend_id: config.backend_id.clone(),
                        detail: format!("{name} {value} outside [0, 1]"),
                    });
                }
            }
            Arc::new(MockBackend::new(
                config.backend_id.clone(),
                *sensitivity,
                *specificity,
                *seed,
                truths.clone(),
            ))
        }
        BackendKind::LiveHttp { endpoint, model_name, credential_env_var, api_flavor } => {
            Arc::new(LiveHttpBackend::new(
                config.backend_id.clone(),
                endpoint.clone(),
                model_name.clone(),
                credential_env_var.clone(),
                *api_flavor,
            ))
        }
    };
    Ok(ConfiguredBackend { backend, retry: config.retry })
}

async fn invoke_with_retry(
    configured: &ConfiguredBackend,
    payload: &PromptPayload,
) -> (Result<String, BackendError>, u64) {
    let policy = configured.retry;
    let timeout = Duration::from_millis(policy.timeout_ms);
    let mut attempt = 0u32;
    loop {
        let started = Instant::now();
        let result = match tokio::time::timeout(timeout, configured.backend.invoke(payload)).await
        {
            Ok(inner) => inner,
            Err(_) => Err(BackendError::new(
                BackendErrorKind::Timeout,
                format!("no response within {} ms", policy.timeout_ms),
            )),
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        match result {
            Ok(text) => return (Ok(text), latency_ms),
            Err(err) if err.is_transient() && attempt < policy.max_retries => {
                let backoff = policy.backoff_initial_ms.saturating_mul(1u64 << attempt.min(16));
                tokio::time::sleep(Duration::from_millis(backoff)).await;
                attempt += 1;
            }
            Err(err) => return (Err(err), latency_ms),
        }
    }
}

/// Invokes every backend concurrently with the identical payload and returns
/// one [`ModelOutput`] per backend, ordered by backend id. Failures are
/// recorded as outputs, never dropped; if every backend fails at the
/// transport level the case-level [`AllBackendsFailed`] error carries them.
pub async fn dispatch_case(
    payload: &PromptPayload,
    backends: &[ConfiguredBackend],
) -> Result<Vec<ModelOutput>, AllBackendsFailed> {
    assert!(
        backends.len() >= 2,
        "dispatch_case requires at least two backends; validate config first"
    );
    let invocations = backends.iter().map(|configured| async move {
        let (result, latency_ms) = invoke_with_retry(configured, payload).await;
        (configured.backend.backend_id().to_string(), result, latency_ms)
    });
    let mut results = join_all(invocations).await;
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let outputs: Vec<ModelOutput> = results
        .into_iter()
        .map(|(backend_id, result, latency_ms)| match result {
            Ok(raw_text) => match parse_response(&raw_text) {
                ParseResult::Parsed { verdict, .. } => ModelOutput::parsed(
                    backend_id,
                    payload.case_id().to_string(),
                    raw_text,
                    verdict,
                    latency_ms,
                ),
                ParseResult::Failed { reason } => ModelOutput::parse_failed(
                    backend_id,
                    payload.case_id().to_string(),
                    raw_text,
                    reason,
                    latency_ms,
                ),
            },
            Err(err) => ModelOutput::backend_failed(
                backend_id,
                payload.case_id().to_string(),
                err.to_string(),
                latency_ms,
            ),
        })
        .collect();

    if outputs.iter().all(|o| !o.has_response()) {
        return Err(AllBackendsFailed { case_id: payload.case_id().to_string(), outputs });
    }
    Ok(outputs)
}

/// One request-log line: every invocation is logged with its case, backend,
/// latency, and outcome. Credentials never appear here.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RequestLogRecord {
    pub timestamp: String,
    pub case_id: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub outcome: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use async_trait::async_trait;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    fn payload(case_id: &str) -> PromptPayload {
        PromptPayload::new(
            case_id.to_string(),
            "",
            "Any findings?",
            vec![ImageAttachment { base64_text: "QUJD".into(), mime_type: "image/jpeg".into() }],
        )
        .unwrap()
    }

    struct ScriptedBackend {
        id: String,
        responses: Vec<Result<String, BackendError>>,
        calls: Arc<AtomicU32>,
        seen_prompts: Arc<Mutex<Vec<String>>>,
        delay: Option<Duration>,
    }

    impl ScriptedBackend {
        fn ok(id: &str, text: &str) -> Self {
            ScriptedBackend {
                id: id.into(),
                responses: vec![Ok(text.into())],
                calls: Arc::new(AtomicU32::new(0)),
                seen_prompts: Arc::new(Mutex::new(vec![])),
                delay: None,
            }
        }

        fn failing(id: &str, error: BackendError, attempts_before_success: usize) -> Self {
            let mut responses: Vec<Result<String, BackendError>> =
                (0..attempts_before_success).map(|_| Err(error.clone())).collect();
            responses.push(Ok("POSSIBLE DIAGNOSES:\n0".into()));
            ScriptedBackend {
                id: id.into(),
                responses,
                calls: Arc::new(AtomicU32::new(0)),
                seen_prompts: Arc::new(Mutex::new(vec![])),
                delay: None,
            }
        }
    }

    #[async_trait]
    impl Backend for ScriptedBackend {
        fn backend_id(&self) -> &str {
            &self.id
        }

        async fn invoke(&self, payload: &PromptPayload) -> Result<String, BackendError> {
            if let Some(delay) = self.delay {
                tokio::time::sleep(delay).await;
            }
            self.seen_prompts.lock().unwrap().push(payload.prompt_text().to_string());
            let call = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
            self.responses[call.min(self.responses.len() - 1)].clone()
        }
    }

    fn configured(backend: ScriptedBackend) -> ConfiguredBackend {
        ConfiguredBackend {
            backend: Arc::new(backend),
            retry: RetryPolicy { timeout_ms: 1_000, max_retries: 3, backoff_initial_ms: 1 },
        }
    }

    #[tokio::test]
    async fn happy_path_two_backends() {
        let backends = vec![
            configured(ScriptedBackend::ok("beta", "POSSIBLE DIAGNOSES:\n0")),
            configured(ScriptedBackend::ok("alpha", "POSSIBLE DIAGNOSES:\n1")),
        ];
        let outputs = dispatch_case(&payload("c1"), &backends).await.unwrap();
        assert_eq!(outputs.len(), 2);
        // Ordered by backend id, not completion or configuration order.
        assert_eq!(outputs[0].backend_id, "alpha");
        assert_eq!(outputs[1].backend_id, "beta");
        assert_eq!(outputs[0].verdict, Some(Verdict::Abnormal));
        assert_eq!(outputs[1].verdict, Some(Verdict::Normal));
        assert!(outputs.iter().all(|o| !o.raw_text.is_empty()));
    }

    #[tokio::test]
    async fn transient_failures_are_retried_until_success() {
        let flaky = ScriptedBackend::failing(
            "flaky",
            BackendError::new(BackendErrorKind::Server, "http status 502"),
            2,
        );
        let backends = vec![
            configured(ScriptedBackend::ok("stable", "POSSIBLE DIAGNOSES:\n1")),
            configured(flaky),
        ];
        let outputs = dispatch_case(&payload("c1"), &backends).await.unwrap();
        let flaky_out = outputs.iter().find(|o| o.backend_id == "flaky").unwrap();
        assert_eq!(flaky_out.verdict, Some(Verdict::Normal));
    }

    #[tokio::test]
    async fn exhausted_retries_surface_as_output_error() {
        let dead = ScriptedBackend::failing(
            "dead",
            BackendError::new(BackendErrorKind::Timeout, "no response"),
            99,
        );
        let backends = vec![
            configured(ScriptedBackend::ok("alive", "POSSIBLE DIAGNOSES:\n1")),
            configured(dead),
        ];
        let outputs = dispatch_case(&payload("c1"), &backends).await.unwrap();
        let dead_out = outputs.iter().find(|o| o.backend_id == "dead").unwrap();
        assert!(dead_out.error.is_some());
        assert!(!dead_out.has_response());
        let alive_out = outputs.iter().find(|o| o.backend_id == "alive").unwrap();
        assert_eq!(alive_out.verdict, Some(Verdict::Abnormal));
    }

    #[tokio::test]
    async fn non_transient_errors_are_not_retried() {
        let rejected = ScriptedBackend::failing(
            "rejected",
            BackendError::new(BackendErrorKind::Client, "http status 400"),
            99,
        );
        let calls = rejected.calls.clone();
        let backends = vec![
            configured(ScriptedBackend::ok("fine", "POSSIBLE DIAGNOSES:\n1")),
            configured(rejected),
        ];
        let outputs = dispatch_case(&payload("c1"), &backends).await.unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 1, "4xx must not be retried");
        let rejected_out = outputs.iter().find(|o| o.backend_id == "rejected").unwrap();
        assert!(rejected_out.error.is_some());
    }

    #[tokio::test]
    async fn all_backends_failing_is_a_case_level_error() {
        let backends = vec![
            configured(ScriptedBackend::failing(
                "a",
                BackendError::new(BackendErrorKind::Client, "400"),
                99,
            )),
            configured(ScriptedBackend::failing(
                "b",
                BackendError::new(BackendErrorKind::Client, "401"),
                99,
            )),
        ];
        let err = dispatch_case(&payload("c9"), &backends).await.unwrap_err();
        assert_eq!(err.case_id, "c9");
        assert_eq!(err.outputs.len(), 2);
        assert!(err.outputs.iter().all(|o| o.error.is_some()));
    }

    #[tokio::test]
    async fn all_backends_receive_identical_prompts() {
        let a = ScriptedBackend::ok("a", "POSSIBLE DIAGNOSES:\n1");
        let b = ScriptedBackend::ok("b", "POSSIBLE DIAGNOSES:\n1");
        let (seen_a, seen_b) = (a.seen_prompts.clone(), b.seen_prompts.clone());
        let backends = vec![configured(a), configured(b)];
        dispatch_case(&payload("c1"), &backends).await.unwrap();
        let seen_a = seen_a.lock().unwrap();
        let seen_b = seen_b.lock().unwrap();
        assert_eq!(seen_a.len(), 1);
        assert_eq!(*seen_a, *seen_b, "backends must see byte-identical prompt text");
    }

    #[tokio::test(start_paused = true)]
    async fn slow_backend_retries_do_not_block_the_other() {
        let slow = ScriptedBackend {
            id: "slow".into(),
            responses: vec![
                Err(BackendError::new(BackendErrorKind::Server, "503")),
                Err(BackendError::new(BackendErrorKind::Server, "503")),
                Ok("POSSIBLE DIAGNOSES:\n0".into()),
            ],
            calls: Arc::new(AtomicU32::new(0)),
            seen_prompts: Arc::new(Mutex::new(vec![])),
            delay: Some(Duration::from_millis(50)),
        };
        let backends = vec![
            ConfiguredBackend {
                backend: Arc::new(slow),
                retry: RetryPolicy { timeout_ms: 10_000, max_retries: 3, backoff_initial_ms: 500 },
            },
            configured(ScriptedBackend::ok("fast", "POSSIBLE DIAGNOSES:\n1")),
        ];
        // With paused time, sleeps auto-advance; both outputs must arrive.
        let outputs = dispatch_case(&payload("c1"), &backends).await.unwrap();
        assert_eq!(outputs.len(), 2);
        assert_eq!(outputs[0].backend_id, "fast");
        assert_eq!(outputs[0].verdict, Some(Verdict::Abnormal));
        assert_eq!(outputs[1].backend_id, "slow");
        assert_eq!(outputs[1].verdict, Some(Verdict::Normal));
    }

    #[test]
    fn backend_config_serde_round_trip() {
        let toml_text = r#"
backend_id = "chatgpt"
kind = "replay"
fixture_path = "responses.jsonl"
timeout_ms = 500
"#;
        let config: BackendConfig = toml::from_str(toml_text).unwrap();
        assert_eq!(config.backend_id, "chatgpt");
        assert!(matches!(config.kind, BackendKind::Replay { .. }));
        assert_eq!(config.retry.timeout_ms, 500);
        assert_eq!(config.retry.max_retries, 3);

        let mock: BackendConfig = toml::from_str(
            r#"
backend_id = "synthetic"
kind = "mock"
sensitivity = 0.8
specificity = 0.9
seed = 1
"#,
        )
        .unwrap();
        assert!(matches!(mock.kind, BackendKind::Mock { seed: 1, .. }));
    }

    #[test]
    fn mock_config_validates_rates() {
        let config = BackendConfig {
            backend_id: "m".into(),
            kind: BackendKind::Mock { sensitivity: 1.5, specificity: 0.5, seed: 0 },
            retry: RetryPolicy::default(),
        };
        let truths = Arc::new(HashMap::new());
        assert!(matches!(
            build_backend(&config, &truths),
            Err(OrchestratorError::BackendConfig { .. })
        ));
    }
}
