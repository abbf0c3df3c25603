//! Evaluation summary assembly and report emission.
//!
//! The summary is a deterministic JSON document (no timestamps; maps are
//! ordered) plus CSV tables and a Markdown rendering. Percentages are
//! reported at one decimal, rounded half-up.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{ScoredCase, SensitivityTable, SimilarityMetric};
use crate::labels::{UncertainPolicy, Verdict};
use crate::records::{ConsensusOutcome, ModelOutput};
use crate::stats::{
    accuracy, agreement_summary, confusion, mcnemar, weighted_prf, AgreementSummary,
    ConfusionMatrix2x2, McNemarResult, StatsError, WeightedPrf,
};
use crate::util::{fmt_percent, write_atomic};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("report i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("no evaluable cases in the run")]
    NoEvaluableCases,
    #[error("case {case_id} has outputs but no ground truth in the dataset")]
    UnknownCase { case_id: String },
}

/// Reproducibility metadata embedded in every summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub mode: String,
    pub uncertain_policy: UncertainPolicy,
    pub metric: SimilarityMetric,
    pub consensus_threshold: f64,
    pub dataset_hash: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notegen_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_seed: Option<u64>,
    pub total_cases: u64,
    pub evaluable_cases: u64,
    pub unevaluable_cases: u64,
}

/// Per-backend evaluation block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendEval {
    /// Cases where this backend produced a parsed verdict; the denominator
    /// for its accuracy.
    pub cases_with_verdict: u64,
    pub confusion: ConfusionMatrix2x2,
    pub accuracy: f64,
    pub weighted: WeightedPrf,
}

/// Image-note alignment telemetry (diagnostic only, never a gate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub image_provider: String,
    pub text_provider: String,
    pub cases: u64,
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub max_cosine: f64,
}

/// The complete evaluation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub run: RunMetadata,
    pub backends: BTreeMap<String, BackendEval>,
    pub agreement: AgreementSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus_accuracy: Option<f64>,
    /// McNemar per backend vs the consensus, over consensus cases where the
    /// backend has a parsed verdict (this case universe makes the test
    /// degenerate under verdict-agreement fusion; reported for completeness).
    pub mcnemar: BTreeMap<String, McNemarResult>,
    pub mcnemar_universe: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentSummary>,
}

/// Everything `build_eval_summary` needs from a completed run.
pub struct EvalInputs<'a> {
    pub truths: &'a HashMap<String, Verdict>,
    pub outputs: &'a [ModelOutput],
    pub outcomes: &'a [ConsensusOutcome],
    pub threshold_grid: &'a [f64],
    pub run: RunMetadata,
    pub alignment: Option<AlignmentSummary>,
}

/// Assembles the full evaluation summary from run artifacts.
///
/// Unevaluable cases are excluded from every denominator and reported in the
/// run metadata. Per-backend accuracy is computed over the cases where that
/// backend produced a parsed verdict.
pub fn build_eval_summary(inputs: EvalInputs<'_>) -> Result<EvalSummary, ReportError> {
    if inputs.outcomes.is_empty() {
        return Err(ReportError::NoEvaluableCases);
    }

    // Per-backend confusion and accuracy.
    let mut by_backend: BTreeMap<String, Vec<(&str, Verdict)>> = BTreeMap::new();
    for output in inputs.outputs {
        if let Some(verdict) = output.verdict {
            by_backend
                .entry(output.backend_id.clone())
                .or_default()
                .push((output.case_id.as_str(), verdict));
        }
    }
    let mut backends = BTreeMap::new();
    for (backend_id, cases) in by_backend {
        let mut preds = Vec::with_capacity(cases.len());
        let mut truths = Vec::with_capacity(cases.len());
        for (case_id, verdict) in &cases {
            let truth = inputs
                .truths
                .get(*case_id)
                .ok_or_else(|| ReportError::UnknownCase { case_id: case_id.to_string() })?;
            preds.push(*verdict);
            truths.push(*truth);
        }
        let cm = confusion(&preds, &truths)?;
        backends.insert(
            backend_id,
            BackendEval {
                cases_with_verdict: preds.len() as u64,
                confusion: cm,
                accuracy: accuracy(&preds, &truths)?,
                weighted: weighted_prf(&cm)?,
            },
        );
    }

    let agreement = agreement_summary(inputs.outcomes, inputs.truths)?;

    // McNemar per backend vs consensus over agreed cases with a verdict.
    let fused_by_case: HashMap<&str, Verdict> = inputs
        .outcomes
        .iter()
        .filter_map(|o| o.fused_verdict.map(|v| (o.case_id.as_str(), v)))
        .collect();
    let mut mcnemar_results = BTreeMap::new();
    for backend_id in backends.keys() {
        let mut b = 0u64;
        let mut c = 0u64;
        for output in inputs.outputs.iter().filter(|o| &o.backend_id == backend_id) {
            let (Some(model), Some(fused)) =
                (output.verdict, fused_by_case.get(output.case_id.as_str()))
            else {
                continue;
            };
            let truth = inputs
                .truths
                .get(&output.case_id)
                .ok_or_else(|| ReportError::UnknownCase { case_id: output.case_id.clone() })?;
            let model_correct = model == *truth;
            let consensus_correct = *fused == *truth;
            match (model_correct, consensus_correct) {
                (true, false) => b += 1,
                (false, true) => c += 1,
                _ => {}
            }
        }
        mcnemar_results.insert(backend_id.clone(), mcnemar(b, c));
    }

    // Sensitivity sweep reuses the already-computed similarities.
    let scored: Vec<ScoredCase> = inputs
        .outcomes
        .iter()
        .map(|o| {
            let both_correct = o
                .fused_verdict
                .and_then(|f| inputs.truths.get(&o.case_id).map(|t| f == *t))
                .unwrap_or(false);
            ScoredCase {
                similarity: o.similarity,
                verdicts_agree: o.fused_verdict.is_some(),
                both_correct,
            }
        })
        .collect();
    let sensitivity = if inputs.threshold_grid.is_empty() {
        None
    } else {
        Some(
            crate::consensus::sweep(&scored, inputs.threshold_grid)
                .expect("outcomes non-empty and grid sorted"),
        )
    };

    Ok(EvalSummary {
        run: inputs.run,
        backends,
        consensus_accuracy: agreement.consensus_accuracy(),
        agreement,
        mcnemar: mcnemar_results,
        mcnemar_universe: "consensus cases where the backend produced a parsed verdict".into(),
        sensitivity,
        alignment: inputs.alignment,
    })
}

/// Serializes the summary deterministically (pretty JSON, trailing newline).
pub fn summary_json(summary: &EvalSummary) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(summary).expect("summary serializes");
    bytes.push(b'\n');
    bytes
}

/// Writes `eval_summary.json`, the per-table CSV files, and `summary.md`.
pub fn write_reports(summary: &EvalSummary, out_dir: &Path) -> Result<(), ReportError> {
    write_atomic(&out_dir.join("eval_summary.json"), &summary_json(summary))?;

    let tables = out_dir.join("tables");

    // Correctness (accuracy) per backend plus consensus.
    let mut correctness = String::from("metric");
    for backend_id in summary.backends.keys() {
        correctness.push_str(&format!(",{backend_id}"));
    }
    correctness.push_str(",consensus\ncorrectness_percent");
    for eval in summary.backends.values() {
        correctness.push_str(&format!(",{}", fmt_percent(eval.accuracy)));
    }
    match summary.consensus_accuracy {
        Some(acc) => correctness.push_str(&format!(",{}", fmt_percent(acc))),
        None => correctness.push_str(",not_applicable"),
    }
    correctness.push_str("\ncorrect_over_total");
    for eval in summary.backends.values() {
        let correct = eval.confusion.true_negative + eval.confusion.true_positive;
        correctness.push_str(&format!(",{}/{}", correct, eval.cases_with_verdict));
    }
    correctness.push_str(&format!(
        ",{}/{}\n",
        summary.agreement.agreement_correct, summary.agreement.agreement_count
    ));
    write_atomic(&tables.join("correctness.csv"), correctness.as_bytes())?;

    // Confusion matrices.
    let mut cmatrix = String::from(
        "backend,true0_pred0,true0_pred1,true1_pred0,true1_pred1\n",
    );
    for (backend_id, eval) in &summary.backends {
        let cm = eval.confusion;
        cmatrix.push_str(&format!(
            "{backend_id},{},{},{},{}\n",
            cm.true_negative, cm.false_positive, cm.false_negative, cm.true_positive
        ));
    }
    write_atomic(&tables.join("confusion_matrices.csv"), cmatrix.as_bytes())?;

    // Classification metrics.
    let mut metrics =
        String::from("model,accuracy,precision_weighted,recall_weighted,f1_weighted\n");
    for (backend_id, eval) in &summary.backends {
        metrics.push_str(&format!(
            "{backend_id},{:.3},{:.2},{:.3},{:.2}\n",
            eval.accuracy, eval.weighted.precision, eval.weighted.recall, eval.weighted.f1
        ));
    }
    write_atomic(&tables.join("classification_metrics.csv"), metrics.as_bytes())?;

    // Agreement decomposition.
    let a = &summary.agreement;
    let agreement_csv = format!(
        "description,count,percentage\n\
         total_cases,{},100.0\n\
         agreement_cases,{},{}\n\
         agreement_correct,{},{}\n\
         agreement_incorrect,{},{}\n\
         disagreement_cases,{},{}\n",
        a.total_cases,
        a.agreement_count,
        fmt_percent(a.agreement_rate()),
        a.agreement_correct,
        a.consensus_accuracy().map(fmt_percent).unwrap_or_else(|| "not_applicable".into()),
        a.agreement_incorrect,
        if a.agreement_count > 0 {
            fmt_percent(a.agreement_incorrect as f64 / a.agreement_count as f64)
        } else {
            "not_applicable".into()
        },
        a.disagreement_count,
        fmt_percent(a.disagreement_count as f64 / a.total_cases as f64),
    );
    write_atomic(&tables.join("agreement.csv"), agreement_csv.as_bytes())?;

    // McNemar.
    let mut mcnemar_csv = String::from("backend,b,c,chi_square,p_value\n");
    for (backend_id, result) in &summary.mcnemar {
        let chi = result
            .chi_square
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "not_applicable".into());
        let p = result
            .p_value
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "not_applicable".into());
        mcnemar_csv.push_str(&format!("{backend_id},{},{},{chi},{p}\n", result.b, result.c));
    }
    write_atomic(&tables.join("mcnemar.csv"), mcnemar_csv.as_bytes())?;

    // Sensitivity sweep.
    if let Some(sensitivity) = &summary.sensitivity {
        let mut rows = String::from("threshold,consensus_count,consensus_accuracy_percent\n");
        for row in &sensitivity.rows {
            let acc = row
                .consensus_accuracy
                .map(fmt_percent)
                .unwrap_or_else(|| "not_applicable".into());
            rows.push_str(&format!("{},{},{acc}\n", row.threshold, row.consensus_count));
        }
        write_atomic(&tables.join("sensitivity.csv"), rows.as_bytes())?;
    }

    write_atomic(&out_dir.join("summary.md"), render_markdown(summary).as_bytes())?;
    Ok(())
}

fn render_markdown(summary: &EvalSummary) -> String {
    let mut md = String::new();
    md.push_str("# Evaluation Summary\n\n");
    md.push_str(&format!(
        "- mode: {}\n- cases: {} total, {} evaluable, {} unevaluable\n- metric: {:?} at threshold {}\n- dataset hash: `{}`\n- config hash: `{}`\n\n",
        summary.run.mode,
        summary.run.total_cases,
        summary.run.evaluable_cases,
        summary.run.unevaluable_cases,
        summary.run.metric,
        summary.run.consensus_threshold,
        summary.run.dataset_hash,
        summary.run.config_hash,
    ));

    md.push_str("## Diagnostic correctness\n\n| Metric |");
    for backend_id in summary.backends.keys() {
        md.push_str(&format!(" {backend_id} |"));
    }
    md.push_str(" Consensus |\n|---|");
    for _ in 0..summary.backends.len() + 1 {
        md.push_str("---|");
    }
    md.push_str("\n| Correctness (%) |");
    for eval in summary.backends.values() {
        md.push_str(&format!(" {} |", fmt_percent(eval.accuracy)));
    }
    match summary.consensus_accuracy {
        Some(acc) => md.push_str(&format!(" {} |\n", fmt_percent(acc))),
        None => md.push_str(" n/a |\n"),
    }
    md.push_str("| Count (correct/total) |");
    for eval in summary.backends.values() {
        let correct = eval.confusion.true_negative + eval.confusion.true_positive;
        md.push_str(&format!(" {}/{} |", correct, eval.cases_with_verdict));
    }
    md.push_str(&format!(
        " {}/{} |\n\n",
        summary.agreement.agreement_correct, summary.agreement.agreement_count
    ));

    md.push_str("## Confusion matrices\n\n| Backend | TN | FP | FN | TP |\n|---|---|---|---|---|\n");
    for (backend_id, eval) in &summary.backends {
        let cm = eval.confusion;
        md.push_str(&format!(
            "| {backend_id} | {} | {} | {} | {} |\n",
            cm.true_negative, cm.false_positive, cm.false_negative, cm.true_positive
        ));
    }

    md.push_str("\n## Classification metrics (weighted)\n\n| Model | Accuracy | Precision | Recall | F1 |\n|---|---|---|---|---|\n");
    for (backend_id, eval) in &summary.backends {
        md.push_str(&format!(
            "| {backend_id} | {:.3} | {:.2} | {:.3} | {:.2} |\n",
            eval.accuracy, eval.weighted.precision, eval.weighted.recall, eval.weighted.f1
        ));
    }

    let a = &summary.agreement;
    md.push_str("\n## Model agreement\n\n| Description | Count | Percentage |\n|---|---|---|\n");
    md.push_str(&format!("| Total cases | {} | 100.0 |\n", a.total_cases));
    md.push_str(&format!(
        "| Agreement cases | {} | {} |\n",
        a.agreement_count,
        fmt_percent(a.agreement_rate())
    ));
    md.push_str(&format!(
        "| Correct predictions | {} | {} |\n",
        a.agreement_correct,
        a.consensus_accuracy().map(fmt_percent).unwrap_or_else(|| "n/a".into())
    ));
    md.push_str(&format!(
        "| Incorrect predictions | {} | {} |\n",
        a.agreement_incorrect,
        if a.agreement_count > 0 {
            fmt_percent(a.agreement_incorrect as f64 / a.agreement_count as f64)
        } else {
            "n/a".into()
        }
    ));
    md.push_str(&format!(
        "| Disagreement cases | {} | {} |\n",
        a.disagreement_count,
        fmt_percent(a.disagreement_count as f64 / a.total_cases as f64)
    ));

    md.push_str("\n## McNemar (backend vs consensus)\n\n");
    md.push_str(&format!("Case universe: {}.\n\n", summary.mcnemar_universe));
    md.push_str("| Backend | b | c | chi-square | p |\n|---|---|---|---|---|\n");
    for (backend_id, result) in &summary.mcnemar {
        md.push_str(&format!(
            "| {backend_id} | {} | {} | {} | {} |\n",
            result.b,
            result.c,
            result.chi_square.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
            result.p_value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
        ));
    }

    if let Some(sensitivity) = &summary.sensitivity {
        md.push_str("\n## Threshold sensitivity\n\n| Threshold | Consensus count | Accuracy (%) |\n|---|---|---|\n");
        for row in &sensitivity.rows {
            md.push_str(&format!(
                "| {} | {} | {} |\n",
                row.threshold,
                row.consensus_count,
                row.consensus_accuracy.map(fmt_percent).unwrap_or_else(|| "n/a".into())
            ));
        }
    }

    if let Some(alignment) = &summary.alignment {
        md.push_str(&format!(
            "\n## Image-text alignment (diagnostic)\n\nProviders `{}` / `{}` over {} cases: mean cosine {:.4} (min {:.4}, max {:.4}).\n",
            alignment.image_provider,
            alignment.text_provider,
            alignment.cases,
            alignment.mean_cosine,
            alignment.min_cosine,
            alignment.max_cosine,
        ));
    }

    md
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{BackendVerdict, ConsensusStatus, FlagReason};

    fn sample_summary() -> EvalSummary {
        let truths: HashMap<String, Verdict> = (0..4)
            .map(|i| {
                (format!("c{i}"), if i < 2 { Verdict::Normal } else { Verdict::Abnormal })
            })
            .collect();
        let outputs: Vec<ModelOutput> = (0..4)
            .flat_map(|i| {
                let verdict = if i < 2 { Verdict::Normal } else { Verdict::Abnormal };
                ["a", "b"].map(|backend| {
                    ModelOutput::parsed(
                        backend.into(),
                        format!("c{i}"),
                        format!("POSSIBLE DIAGNOSES:\n{verdict}"),
                        verdict,
                        1,
                    )
                })
            })
            .collect();
        let outcomes: Vec<ConsensusOutcome> = (0..4)
            .map(|i| {
                let verdict = if i < 2 { Verdict::Normal } else { Verdict::Abnormal };
                ConsensusOutcome {
                    case_id: format!("c{i}"),
                    similarity: 1.0,
                    status: ConsensusStatus::Consensus,
                    fused_verdict: Some(verdict),
                    flag_reason: None,
                    backend_verdicts: vec![
                        BackendVerdict { backend_id: "a".into(), verdict: Some(verdict) },
                        BackendVerdict { backend_id: "b".into(), verdict: Some(verdict) },
                    ],
                }
            })
            .collect();
        let run = RunMetadata {
            mode: "unimodal".into(),
            uncertain_policy: UncertainPolicy::UncertainAsNegative,
            metric: SimilarityMetric::TokenF1,
            consensus_threshold: 0.95,
            dataset_hash: "d".into(),
            config_hash: "c".into(),
            notegen_seed: None,
            sampling_seed: None,
            total_cases: 4,
            evaluable_cases: 4,
            unevaluable_cases: 0,
        };
        build_eval_summary(EvalInputs {
            truths: &truths,
            outputs: &outputs,
            outcomes: &outcomes,
            threshold_grid: &[0.9, 0.95],
            run,
            alignment: None,
        })
        .unwrap()
    }

    #[test]
    fn summary_assembles_consistent_numbers() {
        let summary = sample_summary();
        assert_eq!(summary.backends.len(), 2);
        let a = &summary.backends["a"];
        assert_eq!(a.accuracy, 1.0);
        assert_eq!(a.confusion.true_negative, 2);
        assert_eq!(summary.agreement.agreement_count, 4);
        assert_eq!(summary.consensus_accuracy, Some(1.0));
        // Perfect agreement: no discordant pairs, McNemar inapplicable.
        assert!(!summary.mcnemar["a"].applicable());
        assert_eq!(summary.sensitivity.as_ref().unwrap().rows.len(), 2);
    }

    #[test]
    fn summary_json_is_deterministic() {
        let a = summary_json(&sample_summary());
        let b = summary_json(&sample_summary());
        assert_eq!(a, b);
    }

    #[test]
    fn empty_outcomes_is_a_run_error() {
        let truths = HashMap::new();
        let result = build_eval_summary(EvalInputs {
            truths: &truths,
            outputs: &[],
            outcomes: &[],
            threshold_grid: &[],
            run: RunMetadata {
                mode: "unimodal".into(),
                uncertain_policy: UncertainPolicy::UncertainAsNegative,
                metric: SimilarityMetric::ExactVerdict,
                consensus_threshold: 0.95,
                dataset_hash: String::new(),
                config_hash: String::new(),
                notegen_seed: None,
                sampling_seed: None,
                total_cases: 3,
                evaluable_cases: 0,
                unevaluable_cases: 3,
            },
            alignment: None,
        });
        assert!(matches!(result, Err(ReportError::NoEvaluableCases)));
    }

    #[test]
    fn reports_write_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let summary = sample_summary();
        write_reports(&summary, dir.path()).unwrap();
        for file in [
            "eval_summary.json",
            "summary.md",
            "tables/correctness.csv",
            "tables/confusion_matrices.csv",
            "tables/classification_metrics.csv",
            "tables/agreement.csv",
            "tables/mcnemar.csv",
            "tables/sensitivity.csv",
        ] {
            assert!(dir.path().join(file).exists(), "{file} missing");
        }
        let json = std::fs::read(dir.path().join("eval_summary.json")).unwrap();
        let parsed: EvalSummary = serde_json::from_slice(&json).unwrap();
        assert_eq!(parsed, summary);
    }
}
