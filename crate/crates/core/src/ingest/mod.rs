//! Dataset index ingestion and image payload preparation.
//!
//! Loads the CheXpert-convention CSV index into [`CaseRecord`]s with resolved
//! label vectors, optionally taking a seeded uniform sample, and converts
//! radiograph files into normalized, base64-encoded JPEG payloads.

mod dicom;
mod image;

pub use dicom::{parse_dicom, DicomError, DicomPixelData, Photometric};
pub use image::{
    decode_image, detect_format, encode_payload, normalize_to_8bit, prepare_raster, DecodedImage,
    EncodedImage, Raster, RasterData, SourceFormat, DEFAULT_JPEG_QUALITY,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{FindingLabel, LabelError, LabelState, LabelVector, UncertainPolicy};
use crate::records::{CaseRecord, ViewType};
use crate::util::chacha;
use rand_chacha::rand_core::RngCore;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("index i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("index csv is malformed: {0}")]
    Csv(#[from] csv::Error),
    #[error("index is missing required columns: {missing:?}")]
    Schema { missing: Vec<String> },
    #[error("sample count {requested} exceeds available rows {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error("failed to decode {format} image: {detail}")]
    Decode { format: SourceFormat, detail: String },
    #[error("unrecognized image format (no DICOM/JPEG/PNG magic and no hint)")]
    UnknownImageFormat,
    #[error("raster has zero dimensions")]
    EmptyRaster,
    #[error("pixel values are non-finite after rescale")]
    NonFinitePixels,
    #[error("jpeg quality {quality} outside 1..=100")]
    BadQuality { quality: u8 },
    #[error("jpeg encoding failed: {detail}")]
    Encode { detail: String },
}

/// Seeded uniform sampling without replacement. A pure function of
/// `(row set, count, seed)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectReason {
    BadLabelCell { column: String, value: String },
    /// Uncertain label under the `exclude_case` policy.
    PolicyExcluded,
    DuplicateCaseId { case_id: String },
    InconsistentLabels { detail: String },
    EmptyPath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowRejection {
    /// 1-based data row number (excluding the header).
    pub row: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub reason: RejectReason,
}

/// The loaded dataset with full row accounting.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub cases: Vec<CaseRecord>,
    pub source: PathBuf,
    pub policy: UncertainPolicy,
    pub rows_read: usize,
    pub rejections: Vec<RowRejection>,
}

const PATH_COLUMN: &str = "Path";
const FRONTAL_LATERAL_COLUMN: &str = "Frontal/Lateral";
const AP_PA_COLUMN: &str = "AP/PA";

/// Derives the case id from the index path: separators become underscores
/// and the file extension is dropped.
pub fn case_id_from_path(path: &str) -> String {
    let no_ext = match path.rsplit_once('.') {
        Some((stem, ext)) if !ext.contains('/') && !ext.contains('\\') => stem,
        _ => path,
    };
    no_ext.replace(['/', '\\'], "_")
}

fn parse_label_cell(cell: &str) -> Result<LabelState, ()> {
    match cell.trim() {
        "" => Ok(LabelState::Unmentioned),
        "1" | "1.0" => Ok(LabelState::Positive),
        "0" | "0.0" => Ok(LabelState::Negative),
        "-1" | "-1.0" => Ok(LabelState::Uncertain),
        _ => Err(()),
    }
}

fn parse_view(frontal_lateral: Option<&str>, ap_pa: Option<&str>) -> ViewType {
    match frontal_lateral.map(str::trim) {
        Some("Lateral") => ViewType::Lateral,
        Some("Frontal") => match ap_pa.map(str::trim) {
            Some("PA") => ViewType::Pa,
            Some("AP") => ViewType::Ap,
            _ => ViewType::Unknown,
        },
        _ => ViewType::Unknown,
    }
}

/// Loads the dataset index, resolving labels per `policy` and rejecting (and
/// recording) rows that cannot be ingested. With `sample`, selects a seeded
/// uniform subset without replacement, preserving index order.
pub fn load_dataset_index(
    index_file: &Path,
    policy: UncertainPolicy,
    sample: Option<&SamplingSpec>,
) -> Result<DatasetIndex, IngestError> {
    let mut reader = csv::Reader::from_path(index_file)?;
    let headers = reader.headers()?.clone();
    let column_index = |name: &str| headers.iter().position(|h| h == name);

    let mut missing: Vec<String> = Vec::new();
    let path_idx = column_index(PATH_COLUMN);
    if path_idx.is_none() {
        missing.push(PATH_COLUMN.to_string());
    }
    let mut label_idx = Vec::with_capacity(14);
    for finding in FindingLabel::ALL {
        match column_index(finding.display_name()) {
            Some(idx) => label_idx.push(idx),
            None => missing.push(finding.display_name().to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(IngestError::Schema { missing });
    }
    let path_idx = path_idx.expect("checked above");
    let view_fl_idx = column_index(FRONTAL_LATERAL_COLUMN);
    let view_ap_idx = column_index(AP_PA_COLUMN);

    let mut cases: Vec<CaseRecord> = Vec::new();
    let mut rejections = Vec::new();
    let mut seen_ids = std::collections::HashSet::new();
    let mut rows_read = 0usize;

    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        rows_read += 1;
        let record = record?;
        let path = record.get(path_idx).unwrap_or("").trim().to_string();
        if path.is_empty() {
            rejections.push(RowRejection { row, path: None, reason: RejectReason::EmptyPath });
            continue;
        }

        let mut labels = LabelVector::uniform(LabelState::Unmentioned);
        let mut bad_cell = None;
        for (finding, idx) in FindingLabel::ALL.into_iter().zip(&label_idx) {
            let cell = record.get(*idx).unwrap_or("");
            match parse_label_cell(cell) {
                Ok(state) => labels.set(finding, state),
                Err(()) => {
                    bad_cell = Some(RejectReason::BadLabelCell {
                        column: finding.display_name().to_string(),
                        value: cell.to_string(),
                    });
                    break;
                }
            }
        }
        if let Some(reason) = bad_cell {
            rejections.push(RowRejection { row, path: Some(path), reason });
            continue;
        }

        let ground_truth = match labels.ground_truth_verdict(policy) {
            Ok(v) => v,
            Err(LabelError::ExcludedByPolicy) => {
                rejections.push(RowRejection {
                    row,
                    path: Some(path),
                    reason: RejectReason::PolicyExcluded,
                });
                continue;
            }
            Err(err) => {
                rejections.push(RowRejection {
                    row,
                    path: Some(path),
                    reason: RejectReason::InconsistentLabels { detail: err.to_string() },
                });
                continue;
            }
        };

        let case_id = case_id_from_path(&path);
        if !seen_ids.insert(case_id.clone()) {
            rejections.push(RowRejection {
                row,
                path: Some(path),
                reason: RejectReason::DuplicateCaseId { case_id },
            });
            continue;
        }

        let view = parse_view(
            view_fl_idx.and_then(|i| record.get(i)),
            view_ap_idx.and_then(|i| record.get(i)),
        );
        let resolved = labels.resolve(policy).expect("verdict resolution succeeded above");
        let case = CaseRecord::new(case_id, vec![path], view, resolved, ground_truth)
            .expect("image_refs is non-empty");
        cases.push(case);
    }

    if let Some(spec) = sample {
        cases = sample_cases(cases, spec)?;
    }

    Ok(DatasetIndex {
        cases,
        source: index_file.to_path_buf(),
        policy,
        rows_read,
        rejections,
    })
}

/// Partial Fisher-Yates selection over a ChaCha20 stream: deterministic for
/// a fixed `(rows, count, seed)`, independent of platform and crate
/// versions. Selected rows keep their index order.
fn sample_cases(cases: Vec<CaseRecord>, spec: &SamplingSpec) -> Result<Vec<CaseRecord>, IngestError> {
    if spec.count > cases.len() {
        return Err(IngestError::SampleTooLarge {
            requested: spec.count,
            available: cases.len(),
        });
    }
    let mut rng = chacha(spec.seed);
    let mut indices: Vec<usize> = (0..cases.len()).collect();
    for i in 0..spec.count {
        let j = i + (rng.next_u64() % (indices.len() - i) as u64) as usize;
        indices.swap(i, j);
    }
    let mut selected: Vec<usize> = indices[..spec.count].to_vec();
    selected.sort_unstable();
    let keep: std::collections::HashSet<usize> = selected.into_iter().collect();
    Ok(cases
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, c)| c)
        .collect())
}

/// One manifest record per exported case image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub relative_path: String,
    pub width: u32,
    pub height: u32,
    pub source_format: SourceFormat,
}

/// Writes the manifest as line-delimited JSON.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), IngestError> {
    let mut buf = Vec::new();
    for entry in entries {
        serde_json::to_writer(&mut buf, entry)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?;
        buf.write_all(b"\n")?;
    }
    crate::util::write_atomic(path, &buf)?;
    Ok(())
}

/// Reads a manifest written by [`write_manifest`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, IngestError> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        entries.push(entry);
    }
    Ok(entries)
}
