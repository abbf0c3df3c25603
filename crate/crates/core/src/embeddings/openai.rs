//! Live text-embedding provider speaking the OpenAI embeddings API shape.
//!
//! Wrap it in a [`super::CachedProvider`] for deterministic reruns. Image
//! embedding services have no comparable standard API; image content is
//! served by the hashing embedder or a custom provider implementation.

use serde::Deserialize;

use super::{EmbedContent, EmbedError, EmbeddingProvider, EmbeddingVector, Modality};

pub struct OpenAiEmbeddings {
    provider_id: String,
    endpoint: String,
    model: String,
    credential_env_var: String,
    dimension: usize,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    embedding: Vec<f64>,
}

impl OpenAiEmbeddings {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        credential_env_var: impl Into<String>,
        dimension: usize,
    ) -> Self {
        let model = model.into();
        OpenAiEmbeddings {
            provider_id: format!("openai-{model}"),
            endpoint: endpoint.into(),
            model,
            credential_env_var: credential_env_var.into(),
            dimension,
            client: reqwest::blocking::Client::new(),
        }
    }

    pub(crate) fn request_body(model: &str, text: &str) -> serde_json::Value {
        serde_json::json!({ "model": model, "input": [text] })
    }

    fn provider_err(&self, message: impl Into<String>) -> EmbedError {
        EmbedError::Provider { provider_id: self.provider_id.clone(), message: message.into() }
    }
}

impl EmbeddingProvider for OpenAiEmbeddings {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn modality(&self) -> Modality {
        Modality::Text
    }

    fn embed(&self, content: &EmbedContent<'_>) -> Result<EmbeddingVector, EmbedError> {
        let text = match content {
            EmbedContent::Text(text) => *text,
            EmbedContent::ImageBytes(_) => {
                return Err(EmbedError::ModalityMismatch {
                    provider_id: self.provider_id.clone(),
                    expected: Modality::Text,
                    actual: Modality::Image,
                })
            }
        };
        let key = std::env::var(&self.credential_env_var).map_err(|_| {
            self.provider_err(format!("credential env var {} is not set", self.credential_env_var))
        })?;
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(key)
            .json(&Self::request_body(&self.model, text))
            .send()
            .map_err(|e| self.provider_err(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(self.provider_err(format!("http status {status}")));
        }
        let parsed: EmbeddingsResponse =
            response.json().map_err(|e| self.provider_err(e.to_string()))?;
        let row = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| self.provider_err("empty embeddings response"))?;
        if row.embedding.len() != self.dimension {
            return Err(self.provider_err(format!(
                "provider returned dimension {}, declared {}",
                row.embedding.len(),
                self.dimension
            )));
        }
        EmbeddingVector::new(self.provider_id.clone(), Modality::Text, row.embedding)
    }
}
