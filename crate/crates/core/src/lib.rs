//! Multi-model consensus pipeline for chest-radiograph diagnosis.
//!
//! The pipeline dispatches the same prompt and image payload to two or more
//! language-model backends in parallel, fuses their outputs by a similarity
//! threshold gate, flags disagreements for manual review, and computes the
//! full statistical evaluation (accuracy, confusion matrices, weighted PRF,
//! agreement decomposition, McNemar's test, threshold sensitivity).
//!
//! Live backends sit behind the [`orchestrator::Backend`] trait next to
//! deterministic replay and mock implementations, so every number the
//! evaluation reports is reproducible from fixtures alone.

pub mod consensus;
pub mod embeddings;
pub mod ingest;
pub mod labels;
pub mod notegen;
pub mod orchestrator;
pub mod parser;
pub mod pipeline;
pub mod records;
pub mod replication;
pub mod report;
pub mod stats;
pub(crate) mod util;

pub use labels::{FindingLabel, LabelState, LabelVector, UncertainPolicy, Verdict};
pub use records::{CaseRecord, ConsensusOutcome, ConsensusStatus, ModelOutput};
