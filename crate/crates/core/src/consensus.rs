//! Inter-model output similarity, the consensus threshold gate, and
//! threshold sensitivity sweeps.
//!
//! A case is accepted as consensus when the inter-model similarity clears
//! the configured threshold (inclusive: equality at the threshold counts)
//! AND every parsed verdict agrees. Verdict disagreement always flags the
//! case, whatever the text similarity says: semantic closeness must never
//! override a conflicting diagnosis.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{cosine_similarity, EmbedContent, EmbedError, EmbeddingProvider, Modality};
use crate::records::{
    BackendVerdict, ConsensusOutcome, ConsensusStatus, FlagReason, ModelOutput,
};

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("consensus requires at least two outputs, got {got}")]
    TooFewOutputs { got: usize },
    #[error("threshold {value} outside [0, 1]")]
    BadThreshold { value: f64 },
    #[error("metric {metric:?} requires a text embedding provider")]
    MissingProvider { metric: SimilarityMetric },
    #[error("embedding provider must have text modality, got {modality:?}")]
    WrongProviderModality { modality: Modality },
    #[error("similarity metric failed: {0}")]
    Metric(#[from] EmbedError),
    #[error("sweep requires a non-empty case list")]
    EmptyCases,
    #[error("sweep thresholds must be sorted ascending")]
    UnsortedThresholds,
}

/// How two outputs are compared. Every metric is symmetric and normalized
/// to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    /// 1.0 iff both parsed verdicts are present and equal, else 0.0.
    #[default]
    ExactVerdict,
    /// Whitespace-token multiset F1 over lowercased raw text.
    TokenF1,
    /// Whole-text embedding cosine, clamped to [0, 1].
    EmbeddingCosine,
    /// Greedy token-level embedding matching combined as F1 = 2PR/(P+R).
    BertScoreF1,
}

impl SimilarityMetric {
    pub fn needs_provider(self) -> bool {
        matches!(self, SimilarityMetric::EmbeddingCosine | SimilarityMetric::BertScoreF1)
    }
}

/// Threshold gate configuration. Equality at the threshold counts as
/// consensus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub threshold: f64,
    #[serde(default)]
    pub metric: SimilarityMetric,
}

pub const DEFAULT_THRESHOLD: f64 = 0.95;
pub const DEFAULT_THRESHOLD_GRID: [f64; 5] = [0.90, 0.925, 0.95, 0.975, 1.00];

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig { threshold: DEFAULT_THRESHOLD, metric: SimilarityMetric::default() }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConsensusError::BadThreshold { value: self.threshold });
        }
        Ok(())
    }
}

/// Scores output pairs under a configured metric.
pub struct SimilarityScorer {
    metric: SimilarityMetric,
    provider: Option<Arc<dyn EmbeddingProvider>>,
}

impl SimilarityScorer {
    pub fn new(
        metric: SimilarityMetric,
        provider: Option<Arc<dyn EmbeddingProvider>>,
    ) -> Result<Self, ConsensusError> {
        if metric.needs_provider() {
            match &provider {
                None => return Err(ConsensusError::MissingProvider { metric }),
                Some(p) if p.modality() != Modality::Text => {
                    return Err(ConsensusError::WrongProviderModality { modality: p.modality() })
                }
                Some(_) => {}
            }
        }
        Ok(SimilarityScorer { metric, provider })
    }

    pub fn metric(&self) -> SimilarityMetric {
        self.metric
    }

    /// Similarity of a pair of outputs in [0, 1].
    pub fn score(&self, a: &ModelOutput, b: &ModelOutput) -> Result<f64, ConsensusError> {
        match self.metric {
            SimilarityMetric::ExactVerdict => Ok(match (a.verdict, b.verdict) {
                (Some(x), Some(y)) if x == y => 1.0,
                // Missing parse counts as disagreement by construction.
                _ => 0.0,
            }),
            SimilarityMetric::TokenF1 => Ok(token_f1(&a.raw_text, &b.raw_text)),
            SimilarityMetric::EmbeddingCosine => {
                let provider = self.provider.as_ref().expect("validated in new");
                let va = provider.embed(&EmbedContent::Text(&a.raw_text))?;
                let vb = provider.embed(&EmbedContent::Text(&b.raw_text))?;
                Ok(cosine_similarity(&va, &vb)?.clamp(0.0, 1.0))
            }
            SimilarityMetric::BertScoreF1 => {
                let provider = self.provider.as_ref().expect("validated in new");
                bert_score_f1(&a.raw_text, &b.raw_text, provider.as_ref())
            }
        }
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

/// Multiset token F1: P = |matched| / |tokens_a|, R = |matched| / |tokens_b|,
/// F1 = 2PR / (P + R), with 0 when P + R = 0.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta = tokens(a);
    let tb = tokens(b);
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &tb {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut matched = 0usize;
    for t in &ta {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                matched += 1;
            }
        }
    }
    let p = matched as f64 / ta.len() as f64;
    let r = matched as f64 / tb.len() as f64;
    f1_combine(p, r)
}

/// F1 = 2PR / (P + R); 0 when the denominator vanishes.
pub fn f1_combine(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Greedy token-level matching by embedding cosine: each token is matched to
/// its best counterpart, precision averages over `a`'s tokens, recall over
/// `b`'s, combined as F1.
fn bert_score_f1(
    a: &str,
    b: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<f64, ConsensusError> {
    let ta = tokens(a);
    let tb = tokens(b);
    if ta.is_empty() || tb.is_empty() {
        return Ok(0.0);
    }
    let mut embeddings: HashMap<&str, crate::embeddings::EmbeddingVector> = HashMap::new();
    for t in ta.iter().chain(tb.iter()) {
        if !embeddings.contains_key(t.as_str()) {
            let v = provider.embed(&EmbedContent::Text(t))?;
            embeddings.insert(t.as_str(), v);
        }
    }
    let best = |from: &[String], to: &[String]| -> Result<f64, ConsensusError> {
        let mut total = 0.0f64;
        for t in from {
            let et = &embeddings[t.as_str()];
            let mut best = f64::NEG_INFINITY;
            for u in to {
                let eu = &embeddings[u.as_str()];
                let cos = if t == u { 1.0 } else { cosine_similarity(et, eu)? };
                best = best.max(cos);
            }
            total += best.clamp(0.0, 1.0);
        }
        Ok(total / from.len() as f64)
    };
    let p = best(&ta, &tb)?;
    let r = best(&tb, &ta)?;
    Ok(f1_combine(p, r))
}

/// Fuses the outputs for one case into a [`ConsensusOutcome`].
///
/// With two backends the score is their pairwise similarity; with more, the
/// minimum pairwise similarity (the strictest reading). Consensus requires
/// the score to clear the threshold (inclusive) and all parsed verdicts to
/// be present and equal.
pub fn fuse(
    outputs: &[ModelOutput],
    config: &ConsensusConfig,
    scorer: &SimilarityScorer,
) -> Result<ConsensusOutcome, ConsensusError> {
    if outputs.len() < 2 {
        return Err(ConsensusError::TooFewOutputs { got: outputs.len() });
    }
    config.validate()?;

    let case_id = outputs[0].case_id.clone();
    let mut backend_verdicts: Vec<BackendVerdict> = outputs
        .iter()
        .map(|o| BackendVerdict { backend_id: o.backend_id.clone(), verdict: o.verdict })
        .collect();
    backend_verdicts.sort_by(|a, b| a.backend_id.cmp(&b.backend_id));

    let flagged = |similarity: f64, reason: FlagReason| ConsensusOutcome {
        case_id: case_id.clone(),
        similarity,
        status: ConsensusStatus::Flagged,
        fused_verdict: None,
        flag_reason: Some(reason),
        backend_verdicts: backend_verdicts.clone(),
    };

    let responded: Vec<&ModelOutput> = outputs.iter().filter(|o| o.has_response()).collect();
    if responded.len() < 2 {
        return Ok(flagged(0.0, FlagReason::BackendFailure));
    }

    let mut min_similarity = f64::INFINITY;
    for i in 0..responded.len() {
        for j in i + 1..responded.len() {
            let s = scorer.score(responded[i], responded[j])?;
            min_similarity = min_similarity.min(s);
        }
    }

    let verdicts: Vec<Option<crate::labels::Verdict>> =
        responded.iter().map(|o| o.verdict).collect();
    if verdicts.iter().all(|v| v.is_none()) {
        return Ok(flagged(min_similarity, FlagReason::ParseFailure));
    }
    if min_similarity < config.threshold {
        return Ok(flagged(min_similarity, FlagReason::BelowThreshold));
    }
    if verdicts.iter().any(|v| v.is_none()) {
        return Ok(flagged(min_similarity, FlagReason::ParseFailure));
    }
    let first = verdicts[0].expect("checked above");
    if verdicts.iter().any(|v| *v != Some(first)) {
        return Ok(flagged(min_similarity, FlagReason::VerdictDisagreement));
    }

    Ok(ConsensusOutcome {
        case_id,
        similarity: min_similarity,
        status: ConsensusStatus::Consensus,
        fused_verdict: Some(first),
        flag_reason: None,
        backend_verdicts,
    })
}

/// Input to the sensitivity sweep: the already-computed similarity for a
/// case plus whether the verdicts agreed and, if so, matched ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub similarity: f64,
    pub verdicts_agree: bool,
    /// All verdicts agree AND equal ground truth.
    pub both_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub threshold: f64,
    pub consensus_count: usize,
    /// Fraction of counted cases whose fused verdict matches ground truth;
    /// absent when the count is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub rows: Vec<SensitivityRow>,
}

/// Re-counts consensus membership at each threshold from already-computed
/// similarities; no re-dispatch. Counts are non-increasing in the threshold.
pub fn sweep(cases: &[ScoredCase], thresholds: &[f64]) -> Result<SensitivityTable, ConsensusError> {
    if cases.is_empty() {
        return Err(ConsensusError::EmptyCases);
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(ConsensusError::UnsortedThresholds);
    }
    let rows = thresholds
        .iter()
        .map(|&threshold| {
            let counted: Vec<&ScoredCase> =
                cases.iter().filter(|c| c.similarity >= threshold).collect();
            let correct = counted.iter().filter(|c| c.verdicts_agree && c.both_correct).count();
            let consensus_count = counted.len();
            SensitivityRow {
                threshold,
                consensus_count,
                consensus_accuracy: (consensus_count > 0)
                    .then(|| correct as f64 / consensus_count as f64),
            }
        })
        .collect();
    Ok(SensitivityTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::HashingEmbedder;
    use crate::labels::Verdict;
    use crate::parser::ParseFailure;
    use approx::assert_abs_diff_eq;

    fn output(backend: &str, digit: u8, text: &str) -> ModelOutput {
        ModelOutput::parsed(
            backend.into(),
            "case".into(),
            text.into(),
            Verdict::from_digit(digit).unwrap(),
            1,
        )
    }

    fn exact_scorer() -> SimilarityScorer {
        SimilarityScorer::new(SimilarityMetric::ExactVerdict, None).unwrap()
    }

    fn token_scorer() -> SimilarityScorer {
        SimilarityScorer::new(SimilarityMetric::TokenF1, None).unwrap()
    }

    #[test]
    fn identical_texts_have_token_f1_one() {
        let a = output("a", 1, "POSSIBLE DIAGNOSES:\n1");
        let b = output("b", 1, "POSSIBLE DIAGNOSES:\n1");
        assert_eq!(token_scorer().score(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn exact_verdict_disagreement_scores_zero() {
        let a = output("a", 1, "POSSIBLE DIAGNOSES:\n1");
        let b = output("b", 0, "POSSIBLE DIAGNOSES:\n0");
        assert_eq!(exact_scorer().score(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn f1_combiner_matches_hand_arithmetic() {
        // 2 * 0.9 * 0.93 / 1.83
        assert_abs_diff_eq!(f1_combine(0.9, 0.93), 0.91475, epsilon = 1e-5);
        assert_eq!(f1_combine(0.0, 0.0), 0.0);
    }

    #[test]
    fn token_f1_realizes_hand_computed_p_and_r() {
        // 837 shared tokens, 93 unique to a, 63 unique to b:
        // P = 837/930 = 0.9, R = 837/900 = 0.93.
        let shared: Vec<String> = (0..837).map(|i| format!("s{i}")).collect();
        let a_only: Vec<String> = (0..93).map(|i| format!("a{i}")).collect();
        let b_only: Vec<String> = (0..63).map(|i| format!("b{i}")).collect();
        let a_text = shared.iter().chain(&a_only).cloned().collect::<Vec<_>>().join(" ");
        let b_text = shared.iter().chain(&b_only).cloned().collect::<Vec<_>>().join(" ");
        assert_abs_diff_eq!(token_f1(&a_text, &b_text), 0.91475, epsilon = 1e-5);
    }

    #[test]
    fn metrics_are_symmetric_and_reflexive() {
        let provider: Arc<dyn EmbeddingProvider> =
            Arc::new(HashingEmbedder::new(64, 7, Modality::Text));
        let scorers = vec![
            exact_scorer(),
            token_scorer(),
            SimilarityScorer::new(SimilarityMetric::EmbeddingCosine, Some(provider.clone()))
                .unwrap(),
            SimilarityScorer::new(SimilarityMetric::BertScoreF1, Some(provider)).unwrap(),
        ];
        let a = output("a", 1, "POSSIBLE DIAGNOSES: 1 with mild cardiomegaly");
        let b = output("b", 1, "POSSIBLE DIAGNOSES: 1 likely effusion present");
        for scorer in &scorers {
            let ab = scorer.score(&a, &b).unwrap();
            let ba = scorer.score(&b, &a).unwrap();
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
            assert!((0.0..=1.0).contains(&ab));
            assert_abs_diff_eq!(scorer.score(&a, &a).unwrap(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn embedding_metrics_require_a_text_provider() {
        assert!(matches!(
            SimilarityScorer::new(SimilarityMetric::BertScoreF1, None),
            Err(ConsensusError::MissingProvider { .. })
        ));
        let image_provider: Arc<dyn EmbeddingProvider> =
            Arc::new(HashingEmbedder::new(16, 0, Modality::Image));
        assert!(matches!(
            SimilarityScorer::new(SimilarityMetric::EmbeddingCosine, Some(image_provider)),
            Err(ConsensusError::WrongProviderModality { .. })
        ));
    }

    #[test]
    fn agreeing_verdicts_fuse_to_consensus() {
        let config = ConsensusConfig { threshold: 0.95, metric: SimilarityMetric::ExactVerdict };
        let outputs =
            vec![output("a", 1, "POSSIBLE DIAGNOSES:\n1"), output("b", 1, "POSSIBLE DIAGNOSES:\n1")];
        let outcome = fuse(&outputs, &config, &exact_scorer()).unwrap();
        outcome.validate().unwrap();
        assert_eq!(outcome.status, ConsensusStatus::Consensus);
        assert_eq!(outcome.fused_verdict, Some(Verdict::Abnormal));
        assert_eq!(outcome.similarity, 1.0);
    }

    #[test]
    fn disagreeing_verdicts_flag_the_case() {
        let config = ConsensusConfig::default();
        let outputs =
            vec![output("a", 1, "POSSIBLE DIAGNOSES:\n1"), output("b", 0, "POSSIBLE DIAGNOSES:\n0")];
        let outcome = fuse(&outputs, &config, &exact_scorer()).unwrap();
        assert_eq!(outcome.status, ConsensusStatus::Flagged);
        assert_eq!(outcome.flag_reason, Some(FlagReason::BelowThreshold));
        assert!(outcome.fused_verdict.is_none());
    }

    #[test]
    fn score_equal_to_threshold_is_consensus() {
        // P = R = 3/4 exactly, so token F1 = 0.75 exactly.
        let config = ConsensusConfig { threshold: 0.75, metric: SimilarityMetric::TokenF1 };
        let a = output("a", 1, "alpha beta gamma 1");
        let b = output("b", 1, "alpha beta delta 1");
        let outcome = fuse(&[a, b], &config, &token_scorer()).unwrap();
        assert_eq!(outcome.similarity, 0.75);
        assert_eq!(outcome.status, ConsensusStatus::Consensus);
    }

    #[test]
    fn high_text_similarity_with_verdict_disagreement_flags() {
        let config = ConsensusConfig { threshold: 0.5, metric: SimilarityMetric::TokenF1 };
        let a = output("a", 1, "shared words everywhere 1");
        let b = output("b", 0, "shared words everywhere 0");
        let outcome = fuse(&[a, b], &config, &token_scorer()).unwrap();
        assert_eq!(outcome.status, ConsensusStatus::Flagged);
        assert_eq!(outcome.flag_reason, Some(FlagReason::VerdictDisagreement));
    }

    #[test]
    fn parse_failure_flags_with_reason() {
        let config = ConsensusConfig { threshold: 0.5, metric: SimilarityMetric::TokenF1 };
        let a = output("a", 1, "identical words here");
        let b = ModelOutput::parse_failed(
            "b".into(),
            "case".into(),
            "identical words here".into(),
            ParseFailure::MissingHeader,
            1,
        );
        let outcome = fuse(&[a, b], &config, &token_scorer()).unwrap();
        assert_eq!(outcome.status, ConsensusStatus::Flagged);
        assert_eq!(outcome.flag_reason, Some(FlagReason::ParseFailure));
        assert_eq!(outcome.similarity, 1.0);
    }

    #[test]
    fn backend_failure_flags_the_case() {
        let config = ConsensusConfig::default();
        let a = output("a", 1, "POSSIBLE DIAGNOSES:\n1");
        let b = ModelOutput::backend_failed("b".into(), "case".into(), "timeout".into(), 60_000);
        let outcome = fuse(&[a, b], &config, &exact_scorer()).unwrap();
        assert_eq!(outcome.status, ConsensusStatus::Flagged);
        assert_eq!(outcome.flag_reason, Some(FlagReason::BackendFailure));
    }

    #[test]
    fn fewer_than_two_outputs_is_an_error() {
        let config = ConsensusConfig::default();
        let a = output("a", 1, "x");
        assert!(matches!(
            fuse(&[a], &config, &exact_scorer()),
            Err(ConsensusError::TooFewOutputs { got: 1 })
        ));
    }

    #[test]
    fn three_backends_use_minimum_pairwise_similarity() {
        let config = ConsensusConfig { threshold: 0.9, metric: SimilarityMetric::TokenF1 };
        let a = output("a", 1, "one two three four 1");
        let b = output("b", 1, "one two three four 1");
        let c = output("c", 1, "one two entirely different words 1");
        let outcome = fuse(&[a, b, c], &config, &token_scorer()).unwrap();
        assert_eq!(outcome.status, ConsensusStatus::Flagged);
        assert!(outcome.similarity < 0.9);
        assert_eq!(outcome.backend_verdicts.len(), 3);
    }

    #[test]
    fn sweep_counts_and_accuracy() {
        let mut cases = Vec::new();
        for i in 0..46 {
            cases.push(ScoredCase {
                similarity: 1.0,
                verdicts_agree: true,
                both_correct: i < 42,
            });
        }
        for _ in 0..4 {
            cases.push(ScoredCase { similarity: 0.915, verdicts_agree: false, both_correct: false });
        }
        let table = sweep(&cases, &[0.90, 0.95, 1.00]).unwrap();
        assert_eq!(table.rows[0].consensus_count, 50);
        assert_eq!(table.rows[1].consensus_count, 46);
        assert_eq!(table.rows[2].consensus_count, 46);
        assert_abs_diff_eq!(
            table.rows[1].consensus_accuracy.unwrap(),
            42.0 / 46.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sweep_trivial_cases() {
        let cases = vec![
            ScoredCase { similarity: 0.4, verdicts_agree: true, both_correct: true },
            ScoredCase { similarity: 0.6, verdicts_agree: true, both_correct: true },
            ScoredCase { similarity: 0.9, verdicts_agree: true, both_correct: false },
        ];
        let table = sweep(&cases, &[0.5]).unwrap();
        assert_eq!(table.rows[0].consensus_count, 2);

        let constant = vec![ScoredCase { similarity: 1.0, verdicts_agree: true, both_correct: true }; 5];
        let table = sweep(&constant, &DEFAULT_THRESHOLD_GRID).unwrap();
        assert!(table.rows.iter().all(|r| r.consensus_count == 5));
    }

    #[test]
    fn sweep_validates_inputs() {
        assert!(matches!(sweep(&[], &[0.5]), Err(ConsensusError::EmptyCases)));
        let cases = vec![ScoredCase { similarity: 0.5, verdicts_agree: true, both_correct: true }];
        assert!(matches!(
            sweep(&cases, &[0.9, 0.5]),
            Err(ConsensusError::UnsortedThresholds)
        ));
    }

    #[test]
    fn raising_threshold_never_admits_new_cases() {
        // Seeded random distributions; counts must be non-increasing.
        for seed in 0..100u64 {
            let cases: Vec<ScoredCase> = (0..50)
                .map(|i| {
                    let u = crate::util::unit_draw(seed, &format!("c{i}"));
                    ScoredCase {
                        similarity: u,
                        verdicts_agree: u > 0.3,
                        both_correct: u > 0.6,
                    }
                })
                .collect();
            let table = sweep(&cases, &DEFAULT_THRESHOLD_GRID).unwrap();
            for w in table.rows.windows(2) {
                assert!(w[1].consensus_count <= w[0].consensus_count);
            }
        }
    }
}
