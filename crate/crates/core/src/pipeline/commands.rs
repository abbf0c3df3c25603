//! The five pipeline commands: ingest, notegen, run, evaluate, sweep.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use super::artifacts::{
    jsonl_bytes, read_alignment, read_case_results, read_outputs, AlignmentRecord,
    CaseResultRecord, FlaggedBackend, FlaggedCaseRecord, OutputsAppender, ALIGNMENT_FILE,
    FLAGGED_QUEUE_FILE, OUTCOMES_FILE, OUTPUTS_FILE, REQUEST_LOG_FILE, RESOLVED_CONFIG_FILE,
};
use super::{build_provider, PipelineError, RunConfig, RunMode};
use crate::consensus::{fuse, ScoredCase, SensitivityTable, SimilarityScorer};
use crate::embeddings::{cosine_similarity, EmbedContent, EmbeddingProvider, Modality};
use crate::ingest::{
    encode_payload, load_dataset_index, prepare_raster, write_manifest, DatasetIndex,
    ManifestEntry, RowRejection, SourceFormat,
};
use crate::labels::Verdict;
use crate::notegen::{extract_labels, generate_note, ClinicalNote, PhraseBank};
use crate::orchestrator::{
    build_backend, dispatch_case, ConfiguredBackend, ImageAttachment, PromptPayload,
    RequestLogRecord,
};
use crate::records::{CaseRecord, ConsensusOutcome, FlagReason, ModelOutput};
use crate::report::{
    build_eval_summary, write_reports, AlignmentSummary, EvalInputs, EvalSummary, RunMetadata,
};
use crate::util::{derive_seed, sha256_hex, write_atomic};

fn echo_config(config: &RunConfig) -> Result<(), PipelineError> {
    write_atomic(&config.output_dir.join(RESOLVED_CONFIG_FILE), config.to_toml().as_bytes())?;
    Ok(())
}

fn load_index(config: &RunConfig) -> Result<DatasetIndex, PipelineError> {
    Ok(load_dataset_index(
        &config.dataset_index,
        config.uncertain_policy,
        config.sampling.as_ref(),
    )?)
}

fn phrase_bank(config: &RunConfig) -> Result<PhraseBank, PipelineError> {
    match &config.phrase_bank {
        Some(path) => Ok(PhraseBank::from_path(path)?),
        None => Ok(PhraseBank::builtin().clone()),
    }
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageFailure {
    pub case_id: String,
    pub path: String,
    pub error: String,
}

/// Dataset + image export accounting, persisted as `ingest_report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub cases_accepted: usize,
    pub images_exported: usize,
    pub rejections: Vec<RowRejection>,
    pub image_failures: Vec<ImageFailure>,
}

impl IngestReport {
    pub fn is_partial(&self) -> bool {
        !self.rejections.is_empty() || !self.image_failures.is_empty()
    }
}

/// Loads the index, re-encodes every case image into
/// `<out>/images/<case_id>.jpg`, and writes the manifest and dataset report.
/// Image failures reject the case and the run continues.
pub fn cmd_ingest(config: &RunConfig) -> Result<IngestReport, PipelineError> {
    config.validate()?;
    let index = load_index(config)?;
    echo_config(config)?;

    let images_dir = config.output_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let mut manifest = Vec::with_capacity(index.cases.len());
    let mut image_failures = Vec::new();
    for case in &index.cases {
        match export_case_image(config, case, &images_dir) {
            Ok(entry) => manifest.push(entry),
            Err(err) => image_failures.push(ImageFailure {
                case_id: case.case_id.clone(),
                path: case.image_refs[0].clone(),
                error: err.to_string(),
            }),
        }
    }
    write_manifest(&manifest, &config.output_dir.join("manifest.jsonl"))?;

    let report = IngestReport {
        rows_read: index.rows_read,
        cases_accepted: index.cases.len(),
        images_exported: manifest.len(),
        rejections: index.rejections.clone(),
        image_failures,
    };
    let mut report_bytes = serde_json::to_vec_pretty(&report)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
    report_bytes.push(b'\n');
    write_atomic(&config.output_dir.join("ingest_report.json"), &report_bytes)?;
    Ok(report)
}

fn export_case_image(
    config: &RunConfig,
    case: &CaseRecord,
    images_dir: &Path,
) -> Result<ManifestEntry, PipelineError> {
    let source_path = config.image_root.join(&case.image_refs[0]);
    let bytes = std::fs::read(&source_path)?;
    let raster = prepare_raster(&bytes, hint_from_path(&source_path))?;
    let encoded = encode_payload(&raster, config.jpeg_quality)?;
    let file_name = format!("{}.jpg", case.case_id);
    std::fs::write(images_dir.join(&file_name), &encoded.jpeg_bytes)?;
    Ok(ManifestEntry {
        case_id: case.case_id.clone(),
        relative_path: format!("images/{file_name}"),
        width: encoded.width,
        height: encoded.height,
        source_format: encoded.source_format,
    })
}

fn hint_from_path(path: &Path) -> Option<SourceFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_lowercase).as_deref() {
        Some("dcm") => Some(SourceFormat::Dicom),
        Some("jpg" | "jpeg") => Some(SourceFormat::Jpeg),
        Some("png") => Some(SourceFormat::Png),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// notegen
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NotegenReport {
    pub written: usize,
    pub skipped: Vec<(String, String)>,
}

/// Generates one note file per case into `<out>/notes/<case_id>.txt`.
///
/// Deterministic under a fixed seed: each case's note seed is derived from
/// `(notegen_seed, case_id)`, so subsets and orderings do not shift other
/// cases' notes. With `audit`, every emitted note is re-parsed and its
/// labels extracted; any mismatch aborts.
pub fn cmd_notegen(config: &RunConfig, audit: bool) -> Result<NotegenReport, PipelineError> {
    let seed = config.notegen_seed.ok_or_else(|| PipelineError::Config {
        detail: "notegen requires notegen_seed".into(),
    })?;
    let index = load_index(config)?;
    let bank = phrase_bank(config)?;
    echo_config(config)?;

    let notes_dir = config.output_dir.join("notes");
    std::fs::create_dir_all(&notes_dir)?;

    let mut written = 0usize;
    let mut skipped = Vec::new();
    for case in &index.cases {
        let note = match generate_note(&case.labels, derive_seed(seed, &case.case_id), &bank) {
            Ok(note) => note,
            Err(err) => {
                log::warn!("skipping note for {}: {err}", case.case_id);
                skipped.push((case.case_id.clone(), err.to_string()));
                continue;
            }
        };
        let rendered = note.render();
        if audit {
            let parsed = ClinicalNote::parse(&rendered)
                .map_err(|e| PipelineError::AuditFailed {
                    case_id: case.case_id.clone(),
                    detail: e.to_string(),
                })?;
            let extracted = extract_labels(&parsed, &bank).map_err(|e| {
                PipelineError::AuditFailed { case_id: case.case_id.clone(), detail: e.to_string() }
            })?;
            if extracted != case.labels {
                return Err(PipelineError::AuditFailed {
                    case_id: case.case_id.clone(),
                    detail: "extracted labels differ from source labels".into(),
                });
            }
        }
        write_atomic(&notes_dir.join(format!("{}.txt", case.case_id)), rendered.as_bytes())?;
        written += 1;
    }
    Ok(NotegenReport { written, skipped })
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Skip cases whose outputs are already persisted.
    pub resume: bool,
    /// Dispatch at most this many pending cases (smoke runs, resume tests).
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub total_cases: usize,
    pub dispatched: usize,
    pub resumed: usize,
    pub remaining: usize,
    pub consensus: usize,
    pub flagged: usize,
    pub unevaluable: usize,
}

struct CaseWork {
    case: CaseRecord,
    note_text: Option<String>,
}

enum CaseCompletion {
    Outputs(Vec<ModelOutput>),
    /// Payload could not be built (for example a missing image file).
    Unevaluable { reason: String },
}

/// Dispatches every case to all configured backends and persists raw
/// outputs, fused outcomes, the flagged queue, and the request log.
///
/// Backend invocations within a case run concurrently; cases run through a
/// bounded-parallel pool that preserves dataset order. The run is resumable:
/// completed cases are skipped and the final artifacts are rebuilt from the
/// full output set, so an interrupted-and-resumed run converges to the same
/// bytes as an uninterrupted one.
pub async fn cmd_run(config: &RunConfig, options: RunOptions) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let index = load_index(config)?;
    echo_config(config)?;

    let truths: Arc<HashMap<String, Verdict>> = Arc::new(
        index.cases.iter().map(|c| (c.case_id.clone(), c.ground_truth)).collect(),
    );
    let backends: Vec<ConfiguredBackend> = config
        .backends
        .iter()
        .map(|b| build_backend(b, &truths))
        .collect::<Result<_, _>>()?;
    let scorer = build_scorer(config)?;

    // Notes (multimodal): pre-generated directory or seeded generation.
    let notes = prepare_notes(config, &index)?;

    // Resume bookkeeping.
    let outputs_path = config.output_dir.join(OUTPUTS_FILE);
    let mut done: HashMap<String, Vec<ModelOutput>> = HashMap::new();
    if outputs_path.exists() && std::fs::metadata(&outputs_path)?.len() > 0 {
        if !options.resume {
            return Err(PipelineError::OutputsExist { path: outputs_path });
        }
        let (grouped, _) = read_outputs(&outputs_path, backends.len())?;
        for (case_id, outputs) in grouped {
            done.insert(case_id, outputs);
        }
    }
    let resumed = done.len();

    // Alignment telemetry (stage 1): image-note cosine when both providers
    // share a declared embedding space.
    let alignment_records = compute_alignment(config, &index, &notes)?;
    if !alignment_records.is_empty() {
        write_atomic(
            &config.output_dir.join(ALIGNMENT_FILE),
            &jsonl_bytes(&alignment_records),
        )?;
    }

    // Pending work in dataset order.
    let pending: Vec<CaseWork> = index
        .cases
        .iter()
        .filter(|case| !done.contains_key(&case.case_id))
        .map(|case| CaseWork {
            case: case.clone(),
            note_text: notes.get(&case.case_id).cloned(),
        })
        .collect();
    let to_dispatch = match options.limit {
        Some(limit) => pending.len().min(limit),
        None => pending.len(),
    };
    let remaining = pending.len() - to_dispatch;

    let mut appender = OutputsAppender::open(&outputs_path)?;
    let request_log = Arc::new(Mutex::new(RequestLogWriter::open(
        &config.output_dir.join(REQUEST_LOG_FILE),
    )?));

    let shared_backends = Arc::new(backends);
    let question = Arc::new(config.question.clone());
    let image_root = Arc::new(config.image_root.clone());
    let quality = config.jpeg_quality;

    let mut completions: Vec<(String, CaseCompletion)> = Vec::with_capacity(to_dispatch);
    {
        let mut stream = futures::stream::iter(pending.into_iter().take(to_dispatch).map(
            |work| {
                let backends = shared_backends.clone();
                let question = question.clone();
                let image_root = image_root.clone();
                let request_log = request_log.clone();
                async move {
                    let case_id = work.case.case_id.clone();
                    let completion =
                        run_one_case(work, &backends, &question, &image_root, quality).await;
                    if let CaseCompletion::Outputs(outputs) = &completion {
                        request_log.lock().expect("request log lock").log_case(outputs);
                    }
                    (case_id, completion)
                }
            },
        ))
        .buffered(config.case_parallelism);

        while let Some((case_id, completion)) = stream.next().await {
            if let CaseCompletion::Outputs(outputs) = &completion {
                appender.append_case(outputs)?;
            }
            completions.push((case_id, completion));
        }
    }
    let dispatched = completions.len();

    // Merge resumed and fresh outputs, then derive outcomes in dataset order.
    for (case_id, completion) in completions {
        if let CaseCompletion::Outputs(outputs) = completion {
            done.insert(case_id, outputs);
        } else if let CaseCompletion::Unevaluable { reason } = completion {
            // Persist nothing for payload failures; they are retried on
            // resume. Record for this run's outcome file only.
            done.insert(
                case_id.clone(),
                vec![ModelOutput::backend_failed(
                    "payload".into(),
                    case_id,
                    reason,
                    0,
                )],
            );
        }
    }

    let mut case_results: Vec<CaseResultRecord> = Vec::new();
    let mut consensus = 0usize;
    let mut flagged = 0usize;
    let mut unevaluable = 0usize;
    for case in &index.cases {
        let Some(outputs) = done.get(&case.case_id) else {
            continue; // beyond the limit; not yet dispatched
        };
        let record = case_result(&case.case_id, outputs, config, &scorer)?;
        match &record {
            CaseResultRecord::Outcome(outcome) if outcome.is_consensus() => consensus += 1,
            CaseResultRecord::Outcome(_) => flagged += 1,
            CaseResultRecord::Unevaluable { .. } => unevaluable += 1,
        }
        case_results.push(record);
    }

    write_atomic(&config.output_dir.join(OUTCOMES_FILE), &jsonl_bytes(&case_results))?;
    write_raw_texts(&config.output_dir, done.values().flatten())?;
    write_flagged_queue(&config.output_dir, &case_results)?;

    Ok(RunReport {
        total_cases: index.cases.len(),
        dispatched,
        resumed,
        remaining,
        consensus,
        flagged,
        unevaluable,
    })
}

fn build_scorer(config: &RunConfig) -> Result<SimilarityScorer, PipelineError> {
    let provider: Option<Arc<dyn EmbeddingProvider>> =
        if config.consensus.metric.needs_provider() {
            let embeddings = config.embeddings.as_ref().ok_or_else(|| PipelineError::Config {
                detail: format!(
                    "metric {:?} requires an [embeddings.text] provider",
                    config.consensus.metric
                ),
            })?;
            let text = embeddings.text.as_ref().ok_or_else(|| PipelineError::Config {
                detail: "metric requires [embeddings.text]".into(),
            })?;
            Some(build_provider(text, Modality::Text, embeddings.cache_path.as_deref())?)
        } else {
            None
        };
    Ok(SimilarityScorer::new(config.consensus.metric, provider)?)
}

fn prepare_notes(
    config: &RunConfig,
    index: &DatasetIndex,
) -> Result<HashMap<String, String>, PipelineError> {
    if config.mode != RunMode::Multimodal {
        return Ok(HashMap::new());
    }
    let mut notes = HashMap::with_capacity(index.cases.len());
    if let Some(notes_dir) = &config.notes_dir {
        for case in &index.cases {
            let path = notes_dir.join(format!("{}.txt", case.case_id));
            let text = std::fs::read_to_string(&path).map_err(|_| PipelineError::NoteMissing {
                case_id: case.case_id.clone(),
                notes_dir: notes_dir.clone(),
            })?;
            notes.insert(case.case_id.clone(), text);
        }
    } else {
        let seed = config.notegen_seed.expect("validated: multimodal has notes_dir or seed");
        let bank = phrase_bank(config)?;
        for case in &index.cases {
            let note = generate_note(&case.labels, derive_seed(seed, &case.case_id), &bank)?;
            notes.insert(case.case_id.clone(), note.render());
        }
    }
    Ok(notes)
}

fn compute_alignment(
    config: &RunConfig,
    index: &DatasetIndex,
    notes: &HashMap<String, String>,
) -> Result<Vec<AlignmentRecord>, PipelineError> {
    if config.mode != RunMode::Multimodal {
        return Ok(Vec::new());
    }
    let Some(embeddings) = &config.embeddings else {
        return Ok(Vec::new());
    };
    let (Some(image_cfg), Some(text_cfg)) = (&embeddings.image, &embeddings.text) else {
        return Ok(Vec::new());
    };
    let image_provider =
        build_provider(image_cfg, Modality::Image, embeddings.cache_path.as_deref())?;
    let text_provider =
        build_provider(text_cfg, Modality::Text, embeddings.cache_path.as_deref())?;

    // Cross-modal cosine is only defined when the providers declare the same
    // embedding space (and agree on dimension).
    let shared = match (image_provider.shared_space(), text_provider.shared_space()) {
        (Some(a), Some(b)) if a == b && image_provider.dimension() == text_provider.dimension() => {
            true
        }
        _ => false,
    };
    if !shared {
        log::info!("alignment skipped: providers do not declare a shared embedding space");
        return Ok(Vec::new());
    }

    let mut records = Vec::with_capacity(index.cases.len());
    for case in &index.cases {
        let Some(note_text) = notes.get(&case.case_id) else { continue };
        let image_path = config.image_root.join(&case.image_refs[0]);
        let Ok(bytes) = std::fs::read(&image_path) else { continue };
        let image_vec = image_provider.embed(&EmbedContent::ImageBytes(&bytes))?;
        let text_vec = text_provider.embed(&EmbedContent::Text(note_text))?;
        let cosine = cosine_similarity(&image_vec, &text_vec)?;
        records.push(AlignmentRecord {
            case_id: case.case_id.clone(),
            image_provider: image_provider.provider_id().to_string(),
            text_provider: text_provider.provider_id().to_string(),
            cosine,
        });
    }
    Ok(records)
}

async fn run_one_case(
    work: CaseWork,
    backends: &[ConfiguredBackend],
    question: &str,
    image_root: &Path,
    jpeg_quality: u8,
) -> CaseCompletion {
    let payload = match build_payload(&work, question, image_root, jpeg_quality) {
        Ok(payload) => payload,
        Err(err) => return CaseCompletion::Unevaluable { reason: err.to_string() },
    };
    match dispatch_case(&payload, backends).await {
        Ok(outputs) => CaseCompletion::Outputs(outputs),
        Err(all_failed) => CaseCompletion::Outputs(all_failed.outputs),
    }
}

fn build_payload(
    work: &CaseWork,
    question: &str,
    image_root: &Path,
    jpeg_quality: u8,
) -> Result<PromptPayload, PipelineError> {
    let mut images = Vec::with_capacity(work.case.image_refs.len());
    for image_ref in &work.case.image_refs {
        let path = image_root.join(image_ref);
        let bytes = std::fs::read(&path)?;
        let raster = prepare_raster(&bytes, hint_from_path(&path))?;
        let encoded = encode_payload(&raster, jpeg_quality)?;
        images.push(ImageAttachment {
            base64_text: encoded.base64_text,
            mime_type: encoded.mime_type,
        });
    }
    let context = work.note_text.as_deref().unwrap_or("");
    Ok(PromptPayload::new(work.case.case_id.clone(), context, question, images)?)
}

/// Derives one case's persisted result from its outputs: an unevaluable
/// marker when no backend responded, a fused outcome otherwise. Pure in the
/// outputs, so resumed runs reproduce identical outcome files.
fn case_result(
    case_id: &str,
    outputs: &[ModelOutput],
    config: &RunConfig,
    scorer: &SimilarityScorer,
) -> Result<CaseResultRecord, PipelineError> {
    if outputs.iter().all(|o| !o.has_response()) {
        let reason = outputs
            .iter()
            .filter_map(|o| o.error.as_ref())
            .map(|e| match e {
                crate::records::OutputError::Backend { message } => message.clone(),
                crate::records::OutputError::Parse { reason } => format!("{reason:?}"),
            })
            .collect::<Vec<_>>()
            .join("; ");
        return Ok(CaseResultRecord::Unevaluable { case_id: case_id.to_string(), reason });
    }
    match fuse(outputs, &config.consensus, scorer) {
        Ok(outcome) => Ok(CaseResultRecord::Outcome(outcome)),
        Err(crate::consensus::ConsensusError::Metric(err)) => {
            // Metric failures flag the case with the reason; they never
            // silently drop it.
            let mut backend_verdicts: Vec<crate::records::BackendVerdict> = outputs
                .iter()
                .map(|o| crate::records::BackendVerdict {
                    backend_id: o.backend_id.clone(),
                    verdict: o.verdict,
                })
                .collect();
            backend_verdicts.sort_by(|a, b| a.backend_id.cmp(&b.backend_id));
            Ok(CaseResultRecord::Outcome(ConsensusOutcome {
                case_id: case_id.to_string(),
                similarity: 0.0,
                status: crate::records::ConsensusStatus::Flagged,
                fused_verdict: None,
                flag_reason: Some(FlagReason::MetricFailure { message: err.to_string() }),
                backend_verdicts,
            }))
        }
        Err(other) => Err(other.into()),
    }
}

fn raw_text_rel_path(case_id: &str, backend_id: &str) -> String {
    format!("raw/{case_id}.{backend_id}.txt")
}

fn write_raw_texts<'a>(
    out_dir: &Path,
    outputs: impl Iterator<Item = &'a ModelOutput>,
) -> Result<(), PipelineError> {
    let raw_dir = out_dir.join("raw");
    std::fs::create_dir_all(&raw_dir)?;
    for output in outputs {
        if output.has_response() {
            let path = out_dir.join(raw_text_rel_path(&output.case_id, &output.backend_id));
            std::fs::write(path, output.raw_text.as_bytes())?;
        }
    }
    Ok(())
}

fn write_flagged_queue(
    out_dir: &Path,
    case_results: &[CaseResultRecord],
) -> Result<(), PipelineError> {
    let records: Vec<FlaggedCaseRecord> = case_results
        .iter()
        .filter_map(|record| record.outcome())
        .filter(|outcome| !outcome.is_consensus())
        .map(|outcome| FlaggedCaseRecord {
            case_id: outcome.case_id.clone(),
            similarity: outcome.similarity,
            reason: outcome.flag_reason.clone().expect("flagged outcomes carry a reason"),
            backends: outcome
                .backend_verdicts
                .iter()
                .map(|bv| FlaggedBackend {
                    backend_id: bv.backend_id.clone(),
                    verdict: bv.verdict,
                    raw_text_path: raw_text_rel_path(&outcome.case_id, &bv.backend_id),
                })
                .collect(),
        })
        .collect();
    write_atomic(&out_dir.join(FLAGGED_QUEUE_FILE), &jsonl_bytes(&records))?;
    Ok(())
}

struct RequestLogWriter {
    writer: std::io::BufWriter<std::fs::File>,
}

impl RequestLogWriter {
    fn open(path: &Path) -> Result<Self, PipelineError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RequestLogWriter { writer: std::io::BufWriter::new(file) })
    }

    fn log_case(&mut self, outputs: &[ModelOutput]) {
        for output in outputs {
            let record = RequestLogRecord {
                timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
                case_id: output.case_id.clone(),
                backend_id: output.backend_id.clone(),
                latency_ms: output.latency_ms,
                outcome: match &output.error {
                    None => "ok".to_string(),
                    Some(crate::records::OutputError::Parse { reason }) => {
                        format!("parse_failure:{reason:?}")
                    }
                    Some(crate::records::OutputError::Backend { message }) => {
                        format!("backend_failure:{message}")
                    }
                },
            };
            if serde_json::to_writer(&mut self.writer, &record).is_ok() {
                let _ = std::io::Write::write_all(&mut self.writer, b"\n");
            }
        }
        let _ = std::io::Write::flush(&mut self.writer);
    }
}

// ---------------------------------------------------------------------------
// evaluate / sweep
// ---------------------------------------------------------------------------

/// Builds the evaluation summary from persisted run artifacts and writes the
/// report files under `<out>/eval/`.
pub fn cmd_evaluate(config: &RunConfig) -> Result<EvalSummary, PipelineError> {
    config.validate()?;
    let index = load_index(config)?;
    let (outputs, case_results) = load_run_artifacts(config, &index)?;

    let truths: HashMap<String, Verdict> =
        index.cases.iter().map(|c| (c.case_id.clone(), c.ground_truth)).collect();
    let outcomes: Vec<ConsensusOutcome> =
        case_results.iter().filter_map(|r| r.outcome().cloned()).collect();
    let unevaluable = case_results.len() - outcomes.len();

    let alignment = load_alignment_summary(config)?;
    let run = RunMetadata {
        mode: config.mode.to_string(),
        uncertain_policy: config.uncertain_policy,
        metric: config.consensus.metric,
        consensus_threshold: config.consensus.threshold,
        dataset_hash: sha256_hex(&std::fs::read(&config.dataset_index)?),
        config_hash: config.config_hash(),
        notegen_seed: config.notegen_seed,
        sampling_seed: config.sampling.as_ref().map(|s| s.seed),
        total_cases: index.cases.len() as u64,
        evaluable_cases: outcomes.len() as u64,
        unevaluable_cases: unevaluable as u64,
    };

    let summary = build_eval_summary(EvalInputs {
        truths: &truths,
        outputs: &outputs,
        outcomes: &outcomes,
        threshold_grid: &config.threshold_grid,
        run,
        alignment,
    })?;
    write_reports(&summary, &config.output_dir.join("eval"))?;
    Ok(summary)
}

/// Re-runs the threshold sweep from persisted outcomes (no re-dispatch) and
/// writes `eval/tables/sensitivity.csv`.
pub fn cmd_sweep(config: &RunConfig) -> Result<SensitivityTable, PipelineError> {
    config.validate()?;
    let index = load_index(config)?;
    let (_, case_results) = load_run_artifacts(config, &index)?;
    let truths: HashMap<String, Verdict> =
        index.cases.iter().map(|c| (c.case_id.clone(), c.ground_truth)).collect();

    let scored: Vec<ScoredCase> = case_results
        .iter()
        .filter_map(|r| r.outcome())
        .map(|outcome| {
            let both_correct = outcome
                .fused_verdict
                .and_then(|f| truths.get(&outcome.case_id).map(|t| f == *t))
                .unwrap_or(false);
            ScoredCase {
                similarity: outcome.similarity,
                verdicts_agree: outcome.fused_verdict.is_some(),
                both_correct,
            }
        })
        .collect();
    let table = crate::consensus::sweep(&scored, &config.threshold_grid)?;

    let mut rows = String::from("threshold,consensus_count,consensus_accuracy_percent\n");
    for row in &table.rows {
        let acc = row
            .consensus_accuracy
            .map(crate::util::fmt_percent)
            .unwrap_or_else(|| "not_applicable".into());
        rows.push_str(&format!("{},{},{acc}\n", row.threshold, row.consensus_count));
    }
    write_atomic(&config.output_dir.join("eval/tables/sensitivity.csv"), rows.as_bytes())?;
    Ok(table)
}

fn load_run_artifacts(
    config: &RunConfig,
    index: &DatasetIndex,
) -> Result<(Vec<ModelOutput>, Vec<CaseResultRecord>), PipelineError> {
    let outputs_path = config.output_dir.join(OUTPUTS_FILE);
    let outcomes_path = config.output_dir.join(OUTCOMES_FILE);
    if !outputs_path.exists() || !outcomes_path.exists() {
        return Err(PipelineError::RunIncomplete { missing: index.cases.len(), total: index.cases.len() });
    }
    let (grouped, _) = read_outputs(&outputs_path, config.backends.len())?;
    let case_results = read_case_results(&outcomes_path)?;

    let known: std::collections::HashSet<&str> =
        index.cases.iter().map(|c| c.case_id.as_str()).collect();
    for record in &case_results {
        if !known.contains(record.case_id()) {
            return Err(PipelineError::UnknownCase { case_id: record.case_id().to_string() });
        }
    }
    let covered: std::collections::HashSet<&str> =
        case_results.iter().map(|r| r.case_id()).collect();
    let missing = index.cases.iter().filter(|c| !covered.contains(c.case_id.as_str())).count();
    if missing > 0 {
        return Err(PipelineError::RunIncomplete { missing, total: index.cases.len() });
    }

    // Only outputs from evaluable (non-unevaluable) cases feed the metrics.
    let unevaluable: std::collections::HashSet<&str> = case_results
        .iter()
        .filter(|r| r.outcome().is_none())
        .map(|r| r.case_id())
        .collect();
    let outputs: Vec<ModelOutput> = grouped
        .into_iter()
        .filter(|(case_id, _)| !unevaluable.contains(case_id.as_str()))
        .flat_map(|(_, outputs)| outputs)
        .collect();
    Ok((outputs, case_results))
}

fn load_alignment_summary(config: &RunConfig) -> Result<Option<AlignmentSummary>, PipelineError> {
    let path = config.output_dir.join(ALIGNMENT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let records = read_alignment(&path)?;
    if records.is_empty() {
        return Ok(None);
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for record in &records {
        min = min.min(record.cosine);
        max = max.max(record.cosine);
        sum += record.cosine;
    }
    Ok(Some(AlignmentSummary {
        image_provider: records[0].image_provider.clone(),
        text_provider: records[0].text_provider.clone(),
        cases: records.len() as u64,
        mean_cosine: sum / records.len() as f64,
        min_cosine: min,
        max_cosine: max,
    }))
}
