//! Live HTTP backend adapters.
//!
//! One adapter per provider API family; both normalize to the [`Backend`]
//! contract. The payload's semantic content (prompt text + base64 images) is
//! fixed upstream; only the wire format differs per flavor. Credentials are
//! read from the environment at invoke time and never logged.

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::backends::{Backend, BackendError, BackendErrorKind};
use super::PromptPayload;

/// Provider API family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiFlavor {
    OpenAiChat,
    AnthropicMessages,
}

pub struct LiveHttpBackend {
    backend_id: String,
    endpoint: String,
    model_name: String,
    credential_env_var: String,
    flavor: ApiFlavor,
    client: reqwest::Client,
}

impl LiveHttpBackend {
    pub fn new(
        backend_id: impl Into<String>,
        endpoint: impl Into<String>,
        model_name: impl Into<String>,
        credential_env_var: impl Into<String>,
        flavor: ApiFlavor,
    ) -> Self {
        LiveHttpBackend {
            backend_id: backend_id.into(),
            endpoint: endpoint.into(),
            model_name: model_name.into(),
            credential_env_var: credential_env_var.into(),
            flavor,
            client: reqwest::Client::new(),
        }
    }

    /// Builds the provider-specific JSON request body.
    pub fn request_body(flavor: ApiFlavor, model: &str, payload: &PromptPayload) -> Value {
        match flavor {
            ApiFlavor::OpenAiChat => {
                let mut content = vec![json!({ "type": "text", "text": payload.prompt_text() })];
                for image in payload.images() {
                    content.push(json!({
                        "type": "image_url",
                        "image_url": {
                            "url": format!("data:{};base64,{}", image.mime_type, image.base64_text)
                        }
                    }));
                }
                json!({
                    "model": model,
                    "messages": [{ "role": "user", "content": content }]
                })
            }
            ApiFlavor::AnthropicMessages => {
                let mut content: Vec<Value> = payload
                    .images()
                    .iter()
                    .map(|image| {
                        json!({
                            "type": "image",
                            "source": {
                                "type": "base64",
                                "media_type": image.mime_type,
                                "data": image.base64_text
                            }
                        })
                    })
                    .collect();
                content.push(json!({ "type": "text", "text": payload.prompt_text() }));
                json!({
                    "model": model,
                    "max_tokens": 256,
                    "messages": [{ "role": "user", "content": content }]
                })
            }
        }
    }

    /// Pulls the completion text out of a provider response body.
    pub fn extract_text(flavor: ApiFlavor, body: &Value) -> Option<String> {
        match flavor {
            ApiFlavor::OpenAiChat => body["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string),
            ApiFlavor::AnthropicMessages => {
                body["content"][0]["text"].as_str().map(str::to_string)
            }
        }
    }

    fn classify_status(status: reqwest::StatusCode) -> BackendErrorKind {
        if status.as_u16() == 429 {
            BackendErrorKind::RateLimited
        } else if status.is_server_error() {
            BackendErrorKind::Server
        } else {
            BackendErrorKind::Client
        }
    }
}

#[async_trait]
impl Backend for LiveHttpBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    async fn invoke(&self, payload: &PromptPayload) -> Result<String, BackendError> {
        let credential = std::env::var(&self.credential_env_var).map_err(|_| {
            BackendError::new(
                BackendErrorKind::Other,
                format!("credential env var {} is not set", self.credential_env_var),
            )
        })?;
        let body = Self::request_body(self.flavor, &self.model_name, payload);
        let mut request = self.client.post(&self.endpoint).json(&body);
        request = match self.flavor {
            ApiFlavor::OpenAiChat => request.bearer_auth(credential),
            ApiFlavor::AnthropicMessages => request
                .header("x-api-key", credential)
                .header("anthropic-version", "2023-06-01"),
        };
        let response = request
            .send()
            .await
            .map_err(|e| BackendError::new(BackendErrorKind::Network, e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::new(
                Self::classify_status(status),
                format!("http status {status}"),
            ));
        }
        let body: Value = response
            .json()
            .await
            .map_err(|e| BackendError::new(BackendErrorKind::Other, e.to_string()))?;
        Self::extract_text(self.flavor, &body).ok_or_else(|| {
            BackendError::new(BackendErrorKind::Other, "response carried no completion text")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::ImageAttachment;

    fn payload() -> PromptPayload {
        PromptPayload::new(
            "case1".to_string(),
            "note",
            "Any findings?",
            vec![ImageAttachment { base64_text: "QUJD".into(), mime_type: "image/jpeg".into() }],
        )
        .unwrap()
    }

    #[test]
    fn openai_body_carries_prompt_and_data_url() {
        let body = LiveHttpBackend::request_body(ApiFlavor::OpenAiChat, "gpt-4", &payload());
        assert_eq!(body["model"], "gpt-4");
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["type"], "text");
        assert_eq!(
            content[1]["image_url"]["url"],
            "data:image/jpeg;base64,QUJD"
        );
    }

    #[test]
    fn anthropic_body_carries_base64_source() {
        let body =
            LiveHttpBackend::request_body(ApiFlavor::AnthropicMessages, "claude-3", &payload());
        assert_eq!(body["model"], "claude-3");
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["source"]["data"], "QUJD");
        assert_eq!(content[0]["source"]["media_type"], "image/jpeg");
        assert_eq!(content[1]["type"], "text");
    }

    #[test]
    fn completion_text_extraction() {
        let openai = serde_json::json!({
            "choices": [{ "message": { "content": "POSSIBLE DIAGNOSES:\n1" } }]
        });
        assert_eq!(
            LiveHttpBackend::extract_text(ApiFlavor::OpenAiChat, &openai).unwrap(),
            "POSSIBLE DIAGNOSES:\n1"
        );
        let anthropic = serde_json::json!({
            "content": [{ "type": "text", "text": "POSSIBLE DIAGNOSES:\n0" }]
        });
        assert_eq!(
            LiveHttpBackend::extract_text(ApiFlavor::AnthropicMessages, &anthropic).unwrap(),
            "POSSIBLE DIAGNOSES:\n0"
        );
    }

    #[test]
    fn status_classification_drives_retry() {
        use reqwest::StatusCode;
        assert_eq!(
            LiveHttpBackend::classify_status(StatusCode::TOO_MANY_REQUESTS),
            BackendErrorKind::RateLimited
        );
        assert_eq!(
            LiveHttpBackend::classify_status(StatusCode::BAD_GATEWAY),
            BackendErrorKind::Server
        );
        assert_eq!(
            LiveHttpBackend::classify_status(StatusCode::UNAUTHORIZED),
            BackendErrorKind::Client
        );
        assert!(BackendError::new(BackendErrorKind::RateLimited, "x").is_transient());
        assert!(!BackendError::new(BackendErrorKind::Client, "x").is_transient());
    }
}
