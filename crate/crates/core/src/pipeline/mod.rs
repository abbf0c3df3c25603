//! Run configuration and the pipeline commands behind the CLI.
//!
//! Configuration lives in one TOML file; relative paths resolve against the
//! config file's directory. Every command echoes the fully resolved config
//! into the output directory so each run is auditable, and all randomness
//! (sampling, note generation, mock backends) flows from recorded seeds.

mod artifacts;
mod commands;

pub use artifacts::{
    read_case_results, read_outputs, AlignmentRecord, CaseResultRecord, FlaggedBackend,
    FlaggedCaseRecord,
};
pub use commands::{
    cmd_evaluate, cmd_ingest, cmd_notegen, cmd_run, cmd_sweep, IngestReport, NotegenReport,
    RunOptions, RunReport,
};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{ConsensusConfig, ConsensusError};
use crate::embeddings::{
    CachedProvider, EmbedError, EmbeddingProvider, HashingEmbedder, Modality, OpenAiEmbeddings,
};
use crate::ingest::{IngestError, SamplingSpec};
use crate::labels::UncertainPolicy;
use crate::notegen::NotegenError;
use crate::orchestrator::{BackendConfig, OrchestratorError};
use crate::report::ReportError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {detail}")]
    Config { detail: String },
    #[error("config file {path}: {source}")]
    ConfigRead { path: PathBuf, source: std::io::Error },
    #[error("config file {path}: {source}")]
    ConfigParse { path: PathBuf, source: Box<toml::de::Error> },
    #[error("outputs already exist at {path}; pass resume to continue the run")]
    OutputsExist { path: PathBuf },
    #[error("run artifacts are incomplete: {missing} of {total} cases have no persisted result; resume the run first")]
    RunIncomplete { missing: usize, total: usize },
    #[error("run artifacts cover case {case_id} which is not in the configured dataset")]
    UnknownCase { case_id: String },
    #[error("no note available for case {case_id} (looked in {notes_dir})")]
    NoteMissing { case_id: String, notes_dir: PathBuf },
    #[error("note round-trip audit failed for case {case_id}: {detail}")]
    AuditFailed { case_id: String, detail: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Notegen(#[from] NotegenError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Unimodal,
    Multimodal,
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunMode::Unimodal => f.write_str("unimodal"),
            RunMode::Multimodal => f.write_str("multimodal"),
        }
    }
}

/// Embedding provider configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    /// Deterministic, non-semantic feature hashing (offline runs and tests).
    Hashing { dimension: usize, seed: u64, space: Option<String> },
    /// Live OpenAI-shaped text embeddings endpoint.
    OpenAi { endpoint: String, model: String, credential_env_var: String, dimension: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmbeddingsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ProviderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<ProviderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
}

fn default_jpeg_quality() -> u8 {
    crate::ingest::DEFAULT_JPEG_QUALITY
}

fn default_case_parallelism() -> usize {
    4
}

fn default_question() -> String {
    "Are any of the listed conditions present?".to_string()
}

fn default_threshold_grid() -> Vec<f64> {
    crate::consensus::DEFAULT_THRESHOLD_GRID.to_vec()
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub dataset_index: PathBuf,
    pub image_root: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub uncertain_policy: UncertainPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notegen_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase_bank: Option<PathBuf>,
    #[serde(default = "default_jpeg_quality")]
    pub jpeg_quality: u8,
    #[serde(default = "default_case_parallelism")]
    pub case_parallelism: usize,
    #[serde(default = "default_question")]
    pub question: String,
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    #[serde(default = "default_threshold_grid")]
    pub threshold_grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<EmbeddingsConfig>,
}

impl RunConfig {
    /// Validates cross-field invariants.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.backends.len() < 2 {
            return Err(PipelineError::Config {
                detail: format!(
                    "consensus needs at least two backends, {} configured",
                    self.backends.len()
                ),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for backend in &self.backends {
            if !seen.insert(&backend.backend_id) {
                return Err(PipelineError::Config {
                    detail: format!("duplicate backend_id {}", backend.backend_id),
                });
            }
        }
        self.consensus.validate()?;
        if self.mode == RunMode::Multimodal
            && self.notegen_seed.is_none()
            && self.notes_dir.is_none()
        {
            return Err(PipelineError::Config {
                detail: "multimodal mode requires notes_dir or notegen_seed".into(),
            });
        }
        if self.case_parallelism == 0 {
            return Err(PipelineError::Config { detail: "case_parallelism must be >= 1".into() });
        }
        if self.threshold_grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(PipelineError::Config {
                detail: "threshold_grid must be sorted ascending".into(),
            });
        }
        if self.question.trim().is_empty() {
            return Err(PipelineError::Config { detail: "question must be non-empty".into() });
        }
        Ok(())
    }

    /// Canonical serialized form, echoed into the output directory.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash binding a summary to the exact configuration that produced it.
    pub fn config_hash(&self) -> String {
        crate::util::sha256_hex(self.to_toml().as_bytes())
    }

    /// Restricts the run to a subset of configured backends.
    pub fn select_backends(&mut self, ids: &[String]) -> Result<(), PipelineError> {
        if ids.is_empty() {
            return Ok(());
        }
        for id in ids {
            if !self.backends.iter().any(|b| &b.backend_id == id) {
                return Err(PipelineError::Config {
                    detail: format!("backend {id} is not defined in the config"),
                });
            }
        }
        self.backends.retain(|b| ids.contains(&b.backend_id));
        Ok(())
    }
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

/// Loads a config file and resolves its relative paths against the file's
/// directory.
pub fn load_config(path: &Path) -> Result<RunConfig, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| PipelineError::ConfigRead { path: path.to_path_buf(), source })?;
    let mut config: RunConfig = toml::from_str(&text)
        .map_err(|source| PipelineError::ConfigParse { path: path.to_path_buf(), source: Box::new(source) })?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    resolve(&base, &mut config.dataset_index);
    resolve(&base, &mut config.image_root);
    resolve(&base, &mut config.output_dir);
    if let Some(dir) = &mut config.notes_dir {
        resolve(&base, dir);
    }
    if let Some(bank) = &mut config.phrase_bank {
        resolve(&base, bank);
    }
    for backend in &mut config.backends {
        if let crate::orchestrator::BackendKind::Replay { fixture_path } = &mut backend.kind {
            resolve(&base, fixture_path);
        }
    }
    if let Some(embeddings) = &mut config.embeddings {
        if let Some(cache) = &mut embeddings.cache_path {
            resolve(&base, cache);
        }
    }
    Ok(config)
}

/// Instantiates an embedding provider, wrapping it in the file cache when
/// one is configured.
pub fn build_provider(
    config: &ProviderConfig,
    modality: Modality,
    cache_path: Option<&Path>,
) -> Result<Arc<dyn EmbeddingProvider>, PipelineError> {
    let provider: Arc<dyn EmbeddingProvider> = match config {
        ProviderConfig::Hashing { dimension, seed, space } => {
            let mut embedder = HashingEmbedder::new(*dimension, *seed, modality);
            if let Some(space) = space {
                embedder = embedder.with_shared_space(space.clone());
            }
            match cache_path {
                Some(path) => Arc::new(CachedProvider::with_file(embedder, path)?),
                None => Arc::new(embedder),
            }
        }
        ProviderConfig::OpenAi { endpoint, model, credential_env_var, dimension } => {
            if modality != Modality::Text {
                return Err(PipelineError::Config {
                    detail: "the openai embeddings adapter only supports text content".into(),
                });
            }
            let inner = OpenAiEmbeddings::new(
                endpoint.clone(),
                model.clone(),
                credential_env_var.clone(),
                *dimension,
            );
            match cache_path {
                Some(path) => Arc::new(CachedProvider::with_file(inner, path)?),
                None => Arc::new(inner),
            }
        }
    };
    Ok(provider)
}
