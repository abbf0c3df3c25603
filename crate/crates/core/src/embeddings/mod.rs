//! Provider-agnostic embedding access, cosine alignment, and multimodal
//! concatenation.
//!
//! Neural embedding models (CLIP, BioClinicalBERT, ada-002) are reachable
//! only as external providers behind [`EmbeddingProvider`]; nothing neural
//! runs in-process. A deterministic [`hashing::HashingEmbedder`] ships for
//! offline runs and tests.

mod cache;
mod hashing;
mod openai;

pub use cache::CachedProvider;
pub use hashing::HashingEmbedder;
pub use openai::OpenAiEmbeddings;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
    Multimodal,
}

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("embedding contains non-finite values (provider {provider_id})")]
    NonFinite { provider_id: String },
    #[error("embedding vector must be non-empty")]
    Empty,
    #[error("expected {expected:?} input for provider {provider_id}, got {actual:?}")]
    ModalityMismatch { provider_id: String, expected: Modality, actual: Modality },
    #[error("concat_multimodal requires (image, text) arguments, got ({left:?}, {right:?})")]
    ConcatOrder { left: Modality, right: Modality },
    #[error("embedding provider {provider_id} failed: {message}")]
    Provider { provider_id: String, message: String },
    #[error("embedding cache i/o failed: {0}")]
    Cache(#[from] std::io::Error),
}

/// A fixed-dimension embedding with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    provider_id: String,
    modality: Modality,
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(
        provider_id: impl Into<String>,
        modality: Modality,
        values: Vec<f64>,
    ) -> Result<Self, EmbedError> {
        let provider_id = provider_id.into();
        if values.is_empty() {
            return Err(EmbedError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite { provider_id });
        }
        Ok(EmbeddingVector { provider_id, modality, values })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }
}

/// Content handed to a provider for embedding.
#[derive(Debug, Clone, Copy)]
pub enum EmbedContent<'a> {
    Text(&'a str),
    ImageBytes(&'a [u8]),
}

impl EmbedContent<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            EmbedContent::Text(_) => Modality::Text,
            EmbedContent::ImageBytes(_) => Modality::Image,
        }
    }
}

/// Behavioral contract for embedding access: fixed dimension and modality
/// per provider, deterministic output for identical input (providers that
/// are not deterministic must be wrapped in a [`CachedProvider`]).
pub trait EmbeddingProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn dimension(&self) -> usize;
    fn modality(&self) -> Modality;

    /// Identifier of the embedding space this provider maps into, when it is
    /// shared with other providers. Cross-modal cosine similarity is only
    /// computed between providers declaring the same space.
    fn shared_space(&self) -> Option<&str> {
        None
    }

    fn embed(&self, content: &EmbedContent<'_>) -> Result<EmbeddingVector, EmbedError>;
}

/// Cosine similarity `(x . y) / (|x| |y|)` in double precision.
pub fn cosine_similarity(x: &EmbeddingVector, y: &EmbeddingVector) -> Result<f64, EmbedError> {
    if x.dimension() != y.dimension() {
        return Err(EmbedError::DimensionMismatch { left: x.dimension(), right: y.dimension() });
    }
    let mut dot = 0.0f64;
    let mut nx = 0.0f64;
    let mut ny = 0.0f64;
    for (a, b) in x.values.iter().zip(&y.values) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok(dot / (nx.sqrt() * ny.sqrt()))
}

/// Concatenates an image embedding and a text embedding into one multimodal
/// vector: dimension is the sum, image values first.
pub fn concat_multimodal(
    img: &EmbeddingVector,
    text: &EmbeddingVector,
) -> Result<EmbeddingVector, EmbedError> {
    if img.modality() != Modality::Image || text.modality() != Modality::Text {
        return Err(EmbedError::ConcatOrder { left: img.modality(), right: text.modality() });
    }
    let mut values = Vec::with_capacity(img.dimension() + text.dimension());
    values.extend_from_slice(img.values());
    values.extend_from_slice(text.values());
    EmbeddingVector::new(
        format!("{}+{}", img.provider_id(), text.provider_id()),
        Modality::Multimodal,
        values,
    )
}
