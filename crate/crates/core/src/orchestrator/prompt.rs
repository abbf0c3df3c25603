//! The diagnostic prompt template.
//!
//! Every payload's prompt text comes from [`build_prompt`]; only the context
//! and question placeholders are substituted, nothing else is altered, so
//! all backends in a dispatch see byte-identical instructions.

use super::OrchestratorError;

/// Template with `{context}` and `{question}` placeholders.
pub const PROMPT_TEMPLATE: &str = r#"Assume you are a radiology assistant. Based on given X-ray(s) and its clinical context, identify any possible or tentative diseases out of the following list (or none):
Enlarged Cardiomediastinum, Cardiomegaly, Lung Opacity, Lung Lesion, Edema, Consolidation, Pneumonia, Atelectasis, Pneumothorax, Pleural Effusion, Pleural Other, Fracture, Support Devices. If you identify any, output a single digit "1," otherwise output "0."
Note: For research use only. Do not use for clinical decisions.

Context: {context}
Question: {question}

Respond in this format:
POSSIBLE DIAGNOSES:
<either 1 or 0>"#;

/// Substitutes the two placeholders. The question must be non-empty; the
/// context may be empty (unimodal) or a rendered clinical note (multimodal).
pub fn build_prompt(context: &str, question: &str) -> Result<String, OrchestratorError> {
    if question.trim().is_empty() {
        return Err(OrchestratorError::EmptyQuestion);
    }
    Ok(PROMPT_TEMPLATE
        .replace("{context}", context)
        .replace("{question}", question))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_contains_format_header_and_disclaimer() {
        let text = build_prompt("", "Any abnormality?").unwrap();
        assert!(text.contains("POSSIBLE DIAGNOSES:"));
        assert!(text.contains("For research use only."));
        assert!(text.contains("Question: Any abnormality?"));
        assert!(text.contains("Context: \n"));
        // All 13 abnormality findings are listed.
        for finding in crate::labels::FindingLabel::ABNORMALITIES {
            assert!(text.contains(finding.display_name()), "{finding} missing");
        }
    }

    #[test]
    fn empty_question_is_rejected() {
        assert!(matches!(build_prompt("", ""), Err(OrchestratorError::EmptyQuestion)));
        assert!(matches!(build_prompt("ctx", "   "), Err(OrchestratorError::EmptyQuestion)));
    }

    #[test]
    fn build_prompt_is_pure() {
        let a = build_prompt("note text", "q").unwrap();
        let b = build_prompt("note text", "q").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn only_placeholders_are_substituted() {
        let text = build_prompt("CTX_MARKER", "Q_MARKER").unwrap();
        let expected = PROMPT_TEMPLATE
            .replace("{context}", "CTX_MARKER")
            .replace("{question}", "Q_MARKER");
        assert_eq!(text, expected);
        assert!(!text.contains("{context}"));
        assert!(!text.contains("{question}"));
    }
}
