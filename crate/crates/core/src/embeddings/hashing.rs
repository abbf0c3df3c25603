//! Deterministic feature-hashing embedder for offline runs.
//!
//! This is NOT a semantic model: it hashes tokens (or raw bytes) into a
//! fixed-dimension vector so that the embedding code paths are exercisable
//! without network access. Identical inputs embed identically; unrelated
//! inputs land near-orthogonal. Scores from it measure token overlap, not
//! meaning.

use sha2::{Digest, Sha256};

use super::{EmbedContent, EmbedError, EmbeddingProvider, EmbeddingVector, Modality};

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    provider_id: String,
    dimension: usize,
    seed: u64,
    modality: Modality,
    shared_space: Option<String>,
}

impl HashingEmbedder {
    pub fn new(dimension: usize, seed: u64, modality: Modality) -> Self {
        assert!(dimension > 0, "hashing embedder needs a positive dimension");
        let tag = match modality {
            Modality::Image => "img",
            Modality::Text => "text",
            Modality::Multimodal => "multi",
        };
        HashingEmbedder {
            provider_id: format!("hashing-{tag}-{dimension}-{seed}"),
            dimension,
            seed,
            modality,
            shared_space: None,
        }
    }

    /// Declares a shared embedding space, enabling cross-modal cosine checks
    /// against other providers declaring the same space.
    pub fn with_shared_space(mut self, space: impl Into<String>) -> Self {
        self.shared_space = Some(space.into());
        self
    }

    fn embed_tokens(&self, text: &str) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dimension];
        let mut any = false;
        for token in text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            any = true;
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(token.as_bytes());
            let digest = hasher.finalize();
            let bucket =
                u64::from_le_bytes(digest[0..8].try_into().unwrap()) as usize % self.dimension;
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        if !any {
            acc[0] = 1.0;
        }
        l2_normalize(acc)
    }

    fn embed_bytes(&self, bytes: &[u8]) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(bytes);
        let root = hasher.finalize();

        let mut values = Vec::with_capacity(self.dimension);
        let mut counter = 0u64;
        while values.len() < self.dimension {
            let mut block = Sha256::new();
            block.update(root);
            block.update(counter.to_le_bytes());
            let digest = block.finalize();
            for chunk in digest.chunks_exact(8) {
                if values.len() == self.dimension {
                    break;
                }
                let raw = u64::from_le_bytes(chunk.try_into().unwrap());
                // Map to [-1, 1).
                values.push((raw >> 11) as f64 / (1u64 << 52) as f64 - 1.0);
            }
            counter += 1;
        }
        l2_normalize(values)
    }
}

fn l2_normalize(mut values: Vec<f64>) -> Vec<f64> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut values {
            *v /= norm;
        }
    }
    values
}

impl EmbeddingProvider for HashingEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn modality(&self) -> Modality {
        self.modality
    }

    fn shared_space(&self) -> Option<&str> {
        self.shared_space.as_deref()
    }

    fn embed(&self, content: &EmbedContent<'_>) -> Result<EmbeddingVector, EmbedError> {
        if content.modality() != self.modality {
            return Err(EmbedError::ModalityMismatch {
                provider_id: self.provider_id.clone(),
                expected: self.modality,
                actual: content.modality(),
            });
        }
        let values = match content {
            EmbedContent::Text(text) => self.embed_tokens(text),
            EmbedContent::ImageBytes(bytes) => self.embed_bytes(bytes),
        };
        EmbeddingVector::new(self.provider_id.clone(), self.modality, values)
    }
}
