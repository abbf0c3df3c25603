//! Run artifact persistence: line-delimited outputs, case results, the
//! flagged-case queue, alignment telemetry, and the request log.
//!
//! `outputs.jsonl` is appended incrementally as cases complete so an
//! interrupted run can resume; a torn trailing line (from a kill mid-write)
//! is detected and truncated away on load. Everything else is rewritten
//! atomically at the end of a run.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::records::{ConsensusOutcome, FlagReason, ModelOutput};

use super::PipelineError;

pub const OUTPUTS_FILE: &str = "outputs.jsonl";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.jsonl";
pub const FLAGGED_QUEUE_FILE: &str = "flagged_queue.jsonl";
pub const REQUEST_LOG_FILE: &str = "request_log.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Per-case persisted result: a fused outcome, or an unevaluable marker for
/// cases where every backend failed (excluded from metric denominators).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CaseResultRecord {
    Outcome(ConsensusOutcome),
    Unevaluable { case_id: String, reason: String },
}

impl CaseResultRecord {
    pub fn case_id(&self) -> &str {
        match self {
            CaseResultRecord::Outcome(outcome) => &outcome.case_id,
            CaseResultRecord::Unevaluable { case_id, .. } => case_id,
        }
    }

    pub fn outcome(&self) -> Option<&ConsensusOutcome> {
        match self {
            CaseResultRecord::Outcome(outcome) => Some(outcome),
            CaseResultRecord::Unevaluable { .. } => None,
        }
    }
}

/// One flagged-case queue line: the manual-review artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedCaseRecord {
    pub case_id: String,
    pub similarity: f64,
    pub reason: FlagReason,
    pub backends: Vec<FlaggedBackend>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedBackend {
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<crate::labels::Verdict>,
    /// Path of the verbatim response text, relative to the run directory.
    pub raw_text_path: String,
}

/// Per-case image-note alignment cosine (diagnostic telemetry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub case_id: String,
    pub image_provider: String,
    pub text_provider: String,
    pub cosine: f64,
}

pub fn jsonl_bytes<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item).expect("artifact serializes");
        buf.push(b'\n');
    }
    buf
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        items.push(item);
    }
    Ok(items)
}

pub fn read_case_results(path: &Path) -> Result<Vec<CaseResultRecord>, PipelineError> {
    read_jsonl(path)
}

pub fn read_alignment(path: &Path) -> Result<Vec<AlignmentRecord>, PipelineError> {
    read_jsonl(path)
}

/// Loads persisted outputs grouped by case, in file order.
///
/// A case counts as complete when it carries exactly `backends` outputs. A
/// malformed or incomplete tail (a killed run's torn write) is truncated
/// from the file; malformed lines elsewhere are an error.
pub fn read_outputs(
    path: &Path,
    backends: usize,
) -> Result<(Vec<(String, Vec<ModelOutput>)>, usize), PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut parsed: Vec<ModelOutput> = Vec::with_capacity(lines.len());
    let mut valid_bytes = 0usize;
    let mut torn_tail = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            valid_bytes += line.len() + 1;
            continue;
        }
        match serde_json::from_str::<ModelOutput>(line) {
            Ok(output) => {
                parsed.push(output);
                valid_bytes += line.len() + 1;
            }
            Err(e) => {
                if i == lines.len() - 1 {
                    torn_tail = true;
                    break;
                }
                return Err(PipelineError::Io(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{} line {}: {e}", path.display(), i + 1),
                )));
            }
        }
    }

    let mut grouped: Vec<(String, Vec<ModelOutput>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for output in parsed {
        match index.get(&output.case_id) {
            Some(&slot) => grouped[slot].1.push(output),
            None => {
                index.insert(output.case_id.clone(), grouped.len());
                grouped.push((output.case_id.clone(), vec![output]));
            }
        }
    }

    // An incomplete final case is part of the torn tail: drop it and rewrite.
    let mut dropped_partial = false;
    if let Some((_, outputs)) = grouped.last() {
        if outputs.len() != backends {
            let (case_id, partial) = grouped.pop().expect("non-empty");
            dropped_partial = true;
            log::warn!(
                "dropping {} partial outputs for case {case_id} (interrupted write)",
                partial.len()
            );
        }
    }
    if let Some((case_id, outputs)) = grouped.iter().find(|(_, o)| o.len() != backends) {
        return Err(PipelineError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!(
                "{}: case {case_id} has {} outputs, expected {backends}",
                path.display(),
                outputs.len()
            ),
        )));
    }

    if torn_tail && !dropped_partial {
        // Malformed tail line only; truncate it away.
        log::warn!("truncating torn trailing line in {}", path.display());
        crate::util::write_atomic(path, text[..valid_bytes.min(text.len())].as_bytes())?;
    } else if dropped_partial {
        let keep: Vec<&ModelOutput> = grouped.iter().flat_map(|(_, o)| o.iter()).collect();
        crate::util::write_atomic(path, &jsonl_bytes(keep))?;
    }

    let resumed = grouped.len();
    Ok((grouped, resumed))
}

/// Append-style writer that flushes after each case so interruption loses at
/// most the line being written.
pub struct OutputsAppender {
    writer: std::io::BufWriter<std::fs::File>,
}

impl OutputsAppender {
    pub fn open(path: &Path) -> Result<Self, PipelineError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(OutputsAppender { writer: std::io::BufWriter::new(file) })
    }

    pub fn append_case(&mut self, outputs: &[ModelOutput]) -> Result<(), PipelineError> {
        for output in outputs {
            serde_json::to_writer(&mut self.writer, output)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
            self.writer.write_all(b"\n")?;
        }
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Verdict;

    fn output(case: &str, backend: &str) -> ModelOutput {
        ModelOutput::parsed(
            backend.into(),
            case.into(),
            "POSSIBLE DIAGNOSES:\n1".into(),
            Verdict::Abnormal,
            1,
        )
    }

    #[test]
    fn append_and_read_outputs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(OUTPUTS_FILE);
        let mut appender = OutputsAppender::open(&path).unwrap();
        appender.append_case(&[output("c1", "a"), output("c1", "b")]).unwrap();
        appender.append_case(&[output("c2", "a"), output("c2", "b")]).unwrap();
        drop(appender);
        let (grouped, resumed) = read_outputs(&path, 2).unwrap();
        assert_eq!(resumed, 2);
        assert_eq!(grouped[0].0, "c1");
        assert_eq!(grouped[1].1.len(), 2);
    }

    #[test]
    fn torn_tail_line_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(OUTPUTS_FILE);
        let mut appender = OutputsAppender::open(&path).unwrap();
        appender.append_case(&[output("c1", "a"), output("c1", "b")]).unwrap();
        drop(appender);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(b"{\"backend_id\":\"a\",\"case_id\":\"c2\"");
        std::fs::write(&path, &bytes).unwrap();

        let (grouped, _) = read_outputs(&path, 2).unwrap();
        assert_eq!(grouped.len(), 1);
        // The file was repaired in place.
        let repaired = std::fs::read_to_string(&path).unwrap();
        assert_eq!(repaired.lines().count(), 2);
        let (grouped2, _) = read_outputs(&path, 2).unwrap();
        assert_eq!(grouped2, grouped);
    }

    #[test]
    fn partial_final_case_is_dropped_for_retry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(OUTPUTS_FILE);
        let mut appender = OutputsAppender::open(&path).unwrap();
        appender.append_case(&[output("c1", "a"), output("c1", "b")]).unwrap();
        appender.append_case(&[output("c2", "a")]).unwrap(); // interrupted mid-case
        drop(appender);
        let (grouped, _) = read_outputs(&path, 2).unwrap();
        assert_eq!(grouped.len(), 1);
        assert_eq!(grouped[0].0, "c1");
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
    }

    #[test]
    fn case_result_record_round_trips() {
        use crate::records::{ConsensusStatus, FlagReason};
        let records = vec![
            CaseResultRecord::Outcome(ConsensusOutcome {
                case_id: "c1".into(),
                similarity: 1.0,
                status: ConsensusStatus::Consensus,
                fused_verdict: Some(Verdict::Abnormal),
                flag_reason: None,
                backend_verdicts: vec![],
            }),
            CaseResultRecord::Outcome(ConsensusOutcome {
                case_id: "c2".into(),
                similarity: 0.5,
                status: ConsensusStatus::Flagged,
                fused_verdict: None,
                flag_reason: Some(FlagReason::BelowThreshold),
                backend_verdicts: vec![],
            }),
            CaseResultRecord::Unevaluable { case_id: "c3".into(), reason: "all failed".into() },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(OUTCOMES_FILE);
        crate::util::write_atomic(&path, &jsonl_bytes(&records)).unwrap();
        let back = read_case_results(&path).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[2].case_id(), "c3");
        assert!(back[2].outcome().is_none());
    }
}
