//! Synthetic five-part clinical notes generated from a label vector.
//!
//! Notes follow the Examination / Indication / Technique / Findings /
//! Impression structure. The Findings section carries exactly one phrase per
//! abnormality finding, positive or negated per the label, drawn from a
//! phrase bank with seeded lexical variation. Extraction inverts generation
//! losslessly: `extract_labels(generate_note(v, s)) == v` for every resolved,
//! consistent vector.

use std::io::Read;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{FindingLabel, LabelError, LabelState, LabelVector};
use crate::util::{chacha, pick_index, shuffle};

/// The phrase bank ships as data, not code: one record per phrase with its
/// finding and polarity. See `data/phrase_bank.csv` for the built-in bank.
pub const BANK_CSV_HEADER: &str = "finding,polarity,text";

static BUILTIN_BANK: OnceLock<PhraseBank> = OnceLock::new();

#[derive(Debug, Error)]
pub enum NotegenError {
    #[error("phrase bank i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("phrase bank csv is malformed: {0}")]
    Csv(#[from] csv::Error),
    #[error("phrase bank row {row}: {detail}")]
    BadRow { row: usize, detail: String },
    #[error("phrase bank has no {polarity} phrases for {finding}")]
    EmptyPool { finding: FindingLabel, polarity: &'static str },
    #[error("phrase bank is ambiguous: {detail}")]
    AmbiguousBank { detail: String },
    #[error("labels must be resolved before note generation: {0}")]
    Unresolved(#[from] LabelError),
    #[error("note is missing the {section} section")]
    MissingSection { section: &'static str },
    #[error("no phrase for {finding} found in the findings section")]
    NoMatch { finding: FindingLabel },
    #[error("phrases of both polarities for {finding} found in the findings section")]
    ConflictingMatch { finding: FindingLabel },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Per-finding positive and negative phrase pools.
#[derive(Debug, Clone)]
pub struct PhraseBank {
    positive: Vec<Vec<String>>,
    negative: Vec<Vec<String>>,
}

impl PhraseBank {
    /// The bank compiled into the crate from `data/phrase_bank.csv`.
    pub fn builtin() -> &'static PhraseBank {
        BUILTIN_BANK.get_or_init(|| {
            PhraseBank::from_reader(include_str!("../data/phrase_bank.csv").as_bytes())
                .expect("built-in phrase bank is valid")
        })
    }

    pub fn from_path(path: &Path) -> Result<PhraseBank, NotegenError> {
        let file = std::fs::File::open(path)?;
        PhraseBank::from_reader(file)
    }

    pub fn from_reader(reader: impl Read) -> Result<PhraseBank, NotegenError> {
        let mut positive = vec![Vec::new(); FindingLabel::ALL.len()];
        let mut negative = vec![Vec::new(); FindingLabel::ALL.len()];
        let mut csv_reader = csv::Reader::from_reader(reader);
        for (i, record) in csv_reader.records().enumerate() {
            let row = i + 2; // 1-based, after the header
            let record = record?;
            if record.len() != 3 {
                return Err(NotegenError::BadRow {
                    row,
                    detail: format!("expected 3 fields, got {}", record.len()),
                });
            }
            let finding = FindingLabel::from_display_name(record[0].trim()).ok_or_else(|| {
                NotegenError::BadRow { row, detail: format!("unknown finding: {}", &record[0]) }
            })?;
            let idx = FindingLabel::ALL.iter().position(|f| *f == finding).expect("known");
            let text = record[2].trim().to_string();
            if text.is_empty() {
                return Err(NotegenError::BadRow { row, detail: "empty phrase".into() });
            }
            match record[1].trim() {
                "positive" => positive[idx].push(text),
                "negative" => negative[idx].push(text),
                other => {
                    return Err(NotegenError::BadRow {
                        row,
                        detail: format!("polarity must be positive or negative, got {other}"),
                    })
                }
            }
        }
        let bank = PhraseBank { positive, negative };
        bank.validate()?;
        Ok(bank)
    }

    pub fn phrases(&self, finding: FindingLabel, polarity: Polarity) -> &[String] {
        let idx = FindingLabel::ALL.iter().position(|f| *f == finding).expect("known");
        match polarity {
            Polarity::Positive => &self.positive[idx],
            Polarity::Negative => &self.negative[idx],
        }
    }

    /// Checks pool totality and phrase unambiguity.
    ///
    /// Beyond requiring a non-empty pool per finding and polarity, no phrase
    /// may appear as a substring of any other phrase of a different polarity
    /// or finding (case-insensitive), which is what makes extraction by
    /// substring scan unambiguous.
    pub fn validate(&self) -> Result<(), NotegenError> {
        for finding in FindingLabel::ALL {
            if self.phrases(finding, Polarity::Positive).is_empty() {
                return Err(NotegenError::EmptyPool { finding, polarity: "positive" });
            }
            if self.phrases(finding, Polarity::Negative).is_empty() {
                return Err(NotegenError::EmptyPool { finding, polarity: "negative" });
            }
        }
        let mut all: Vec<(FindingLabel, Polarity, String)> = Vec::new();
        for finding in FindingLabel::ALL {
            for polarity in [Polarity::Positive, Polarity::Negative] {
                for phrase in self.phrases(finding, polarity) {
                    all.push((finding, polarity, phrase.to_lowercase()));
                }
            }
        }
        for (i, (fa, pa, a)) in all.iter().enumerate() {
            for (fb, pb, b) in all.iter().skip(i + 1) {
                if fa == fb && pa == pb {
                    continue;
                }
                if a.contains(b.as_str()) || b.contains(a.as_str()) {
                    return Err(NotegenError::AmbiguousBank {
                        detail: format!(
                            "phrase overlap between {fa}/{pa:?} and {fb}/{pb:?}: {a:?} vs {b:?}"
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A generated note with its five sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub examination: String,
    pub indication: String,
    pub technique: String,
    pub findings: String,
    pub impression: String,
    /// Seed the note was generated with (0 for hand-written notes).
    pub seed: u64,
}

const SECTION_HEADERS: [&str; 5] =
    ["EXAMINATION:", "INDICATION:", "TECHNIQUE:", "FINDINGS:", "IMPRESSION:"];

impl ClinicalNote {
    /// Renders the note as plain text with the five section headers in fixed
    /// order.
    pub fn render(&self) -> String {
        format!(
            "EXAMINATION: {}\n\nINDICATION: {}\n\nTECHNIQUE: {}\n\nFINDINGS: {}\n\nIMPRESSION: {}\n",
            self.examination, self.indication, self.technique, self.findings, self.impression
        )
    }

    /// Parses a rendered note back into sections.
    pub fn parse(text: &str) -> Result<ClinicalNote, NotegenError> {
        let mut sections = Vec::with_capacity(5);
        for (i, header) in SECTION_HEADERS.iter().enumerate() {
            let start = text.find(header).ok_or(NotegenError::MissingSection {
                section: header.trim_end_matches(':'),
            })?;
            let content_start = start + header.len();
            let end = SECTION_HEADERS
                .get(i + 1)
                .and_then(|next| text[content_start..].find(next).map(|p| content_start + p))
                .unwrap_or(text.len());
            sections.push(text[content_start..end].trim().to_string());
        }
        let mut iter = sections.into_iter();
        Ok(ClinicalNote {
            examination: iter.next().unwrap(),
            indication: iter.next().unwrap(),
            technique: iter.next().unwrap(),
            findings: iter.next().unwrap(),
            impression: iter.next().unwrap(),
            seed: 0,
        })
    }
}

const EXAMINATION_TEXT: &str = "Chest radiograph.";
const INDICATION_TEXT: &str = "Evaluation for acute cardiopulmonary process.";
const TECHNIQUE_TEXT: &str = "Frontal and lateral views of the chest were obtained.";

/// Generates a note from a resolved label vector.
///
/// Pure in `(labels, seed, bank)`: phrase choice and sentence order come from
/// a ChaCha20 stream seeded with `seed`. Only the Findings sentence order is
/// randomized; the other sections use fixed templates.
pub fn generate_note(
    labels: &LabelVector,
    seed: u64,
    bank: &PhraseBank,
) -> Result<ClinicalNote, NotegenError> {
    if let Some((finding, state)) = labels.first_unresolved() {
        return Err(NotegenError::Unresolved(LabelError::Unresolved { finding, state }));
    }

    let mut rng = chacha(seed);
    let mut sentences = Vec::with_capacity(FindingLabel::ABNORMALITIES.len());
    let mut positives = Vec::new();
    for finding in FindingLabel::ABNORMALITIES {
        let polarity = match labels.get(finding) {
            LabelState::Positive => {
                positives.push(finding);
                Polarity::Positive
            }
            LabelState::Negative => Polarity::Negative,
            _ => unreachable!("checked resolved above"),
        };
        let pool = bank.phrases(finding, polarity);
        sentences.push(pool[pick_index(&mut rng, pool.len())].clone());
    }
    shuffle(&mut rng, &mut sentences);
    let findings = sentences.join(" ");

    let impression = if positives.is_empty() {
        let pool = bank.phrases(FindingLabel::NoFinding, Polarity::Positive);
        pool[pick_index(&mut rng, pool.len())].clone()
    } else {
        let names: Vec<String> = positives.iter().map(|f| f.prose_name()).collect();
        let list = match names.len() {
            1 => names[0].clone(),
            2 => format!("{} and {}", names[0], names[1]),
            _ => format!(
                "{} and {}",
                names[..names.len() - 1].join(", "),
                names[names.len() - 1]
            ),
        };
        format!("Findings are concerning for {list}.")
    };

    Ok(ClinicalNote {
        examination: EXAMINATION_TEXT.to_string(),
        indication: INDICATION_TEXT.to_string(),
        technique: TECHNIQUE_TEXT.to_string(),
        findings,
        impression,
        seed,
    })
}

/// Recovers the label vector from a note's Findings section.
///
/// Each abnormality finding must match exactly one polarity's phrases;
/// `NoFinding` is set positive iff all 13 abnormalities extract negative.
pub fn extract_labels(note: &ClinicalNote, bank: &PhraseBank) -> Result<LabelVector, NotegenError> {
    let haystack = note.findings.to_lowercase();
    let mut out = LabelVector::uniform(LabelState::Negative);
    let mut any_positive = false;
    for finding in FindingLabel::ABNORMALITIES {
        let pos_hit = bank
            .phrases(finding, Polarity::Positive)
            .iter()
            .any(|p| haystack.contains(&p.to_lowercase()));
        let neg_hit = bank
            .phrases(finding, Polarity::Negative)
            .iter()
            .any(|p| haystack.contains(&p.to_lowercase()));
        let state = match (pos_hit, neg_hit) {
            (true, false) => {
                any_positive = true;
                LabelState::Positive
            }
            (false, true) => LabelState::Negative,
            (false, false) => return Err(NotegenError::NoMatch { finding }),
            (true, true) => return Err(NotegenError::ConflictingMatch { finding }),
        };
        out.set(finding, state);
    }
    out.set(
        FindingLabel::NoFinding,
        if any_positive { LabelState::Negative } else { LabelState::Positive },
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::UncertainPolicy;
    use crate::util::derive_seed;
    use std::collections::BTreeSet;

    /// Random resolved, consistent vector: 13 independent abnormality bits,
    /// NoFinding derived.
    pub(crate) fn random_vector(tag_seed: u64) -> LabelVector {
        let mut v = LabelVector::uniform(LabelState::Negative);
        let mut any = false;
        for (i, finding) in FindingLabel::ABNORMALITIES.into_iter().enumerate() {
            let bit = derive_seed(tag_seed, &format!("f{i}")) & 1 == 1;
            if bit {
                any = true;
                v.set(finding, LabelState::Positive);
            }
        }
        if !any {
            v.set(FindingLabel::NoFinding, LabelState::Positive);
        }
        v
    }

    #[test]
    fn builtin_bank_is_valid_with_two_phrases_per_pool() {
        let bank = PhraseBank::builtin();
        for finding in FindingLabel::ALL {
            assert!(bank.phrases(finding, Polarity::Positive).len() >= 2, "{finding}");
            assert!(bank.phrases(finding, Polarity::Negative).len() >= 2, "{finding}");
        }
    }

    #[test]
    fn all_negative_note_has_no_acute_impression() {
        let bank = PhraseBank::builtin();
        let v = LabelVector::all_negative();
        let note = generate_note(&v, 5, bank).unwrap();
        let no_acute = bank.phrases(FindingLabel::NoFinding, Polarity::Positive);
        assert!(no_acute.iter().any(|p| note.impression.contains(p.as_str())));
        // 13 negated findings, one sentence each.
        for finding in FindingLabel::ABNORMALITIES {
            let hit = bank
                .phrases(finding, Polarity::Negative)
                .iter()
                .any(|p| note.findings.contains(p.as_str()));
            assert!(hit, "missing negated phrase for {finding}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let bank = PhraseBank::builtin();
        let mut v = LabelVector::all_negative();
        v.set(FindingLabel::Cardiomegaly, LabelState::Positive);
        v.set(FindingLabel::NoFinding, LabelState::Negative);
        let a = generate_note(&v, 7, bank).unwrap();
        let b = generate_note(&v, 7, bank).unwrap();
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn different_seeds_vary_text_but_not_labels() {
        let bank = PhraseBank::builtin();
        let mut v = LabelVector::all_negative();
        v.set(FindingLabel::Cardiomegaly, LabelState::Positive);
        v.set(FindingLabel::NoFinding, LabelState::Negative);
        let a = generate_note(&v, 1, bank).unwrap();
        let b = generate_note(&v, 2, bank).unwrap();
        assert_eq!(extract_labels(&a, bank).unwrap(), v);
        assert_eq!(extract_labels(&b, bank).unwrap(), v);
    }

    #[test]
    fn lexical_variation_across_seeds() {
        let bank = PhraseBank::builtin();
        let mut v = LabelVector::all_negative();
        v.set(FindingLabel::Pneumonia, LabelState::Positive);
        v.set(FindingLabel::NoFinding, LabelState::Negative);
        let distinct: BTreeSet<String> =
            (0..100).map(|s| generate_note(&v, s, bank).unwrap().findings).collect();
        assert!(distinct.len() >= 2, "only {} distinct findings texts", distinct.len());
    }

    #[test]
    fn round_trip_over_seeded_random_vectors() {
        let bank = PhraseBank::builtin();
        for i in 0..200 {
            let v = random_vector(i);
            let note = generate_note(&v, derive_seed(99, &format!("seed{i}")), bank).unwrap();
            let back = extract_labels(&note, bank).unwrap();
            assert_eq!(back, v, "round trip failed for vector {i}");
        }
    }

    #[test]
    fn unresolved_labels_are_rejected() {
        let bank = PhraseBank::builtin();
        let mut v = LabelVector::all_negative();
        v.set(FindingLabel::Edema, LabelState::Uncertain);
        assert!(matches!(generate_note(&v, 0, bank), Err(NotegenError::Unresolved(_))));
        let resolved = v.resolve(UncertainPolicy::UncertainAsNegative).unwrap();
        assert!(generate_note(&resolved, 0, bank).is_ok());
    }

    #[test]
    fn emptied_findings_section_fails_extraction() {
        let bank = PhraseBank::builtin();
        let mut note = generate_note(&LabelVector::all_negative(), 3, bank).unwrap();
        note.findings = String::new();
        assert!(matches!(extract_labels(&note, bank), Err(NotegenError::NoMatch { .. })));
    }

    #[test]
    fn both_polarities_fail_extraction() {
        let bank = PhraseBank::builtin();
        let mut note = generate_note(&LabelVector::all_negative(), 3, bank).unwrap();
        let pos = &bank.phrases(FindingLabel::Edema, Polarity::Positive)[0];
        note.findings.push(' ');
        note.findings.push_str(pos);
        assert!(matches!(
            extract_labels(&note, bank),
            Err(NotegenError::ConflictingMatch { finding: FindingLabel::Edema })
        ));
    }

    #[test]
    fn render_parse_round_trip() {
        let bank = PhraseBank::builtin();
        let mut v = LabelVector::all_negative();
        v.set(FindingLabel::PleuralEffusion, LabelState::Positive);
        v.set(FindingLabel::Pneumonia, LabelState::Positive);
        v.set(FindingLabel::NoFinding, LabelState::Negative);
        let note = generate_note(&v, 11, bank).unwrap();
        let text = note.render();
        let parsed = ClinicalNote::parse(&text).unwrap();
        assert_eq!(parsed.findings, note.findings);
        assert_eq!(parsed.impression, note.impression);
        assert_eq!(extract_labels(&parsed, bank).unwrap(), v);
    }

    #[test]
    fn missing_section_is_reported() {
        let err = ClinicalNote::parse("EXAMINATION: x\n\nFINDINGS: y\n").unwrap_err();
        assert!(matches!(err, NotegenError::MissingSection { section: "INDICATION" }));
    }

    #[test]
    fn empty_pool_is_rejected() {
        let csv = "finding,polarity,text\nCardiomegaly,positive,The heart is enlarged.\n";
        let err = PhraseBank::from_reader(csv.as_bytes()).unwrap_err();
        assert!(matches!(err, NotegenError::EmptyPool { .. }));
    }

    #[test]
    fn substring_collision_is_rejected() {
        // Positive phrase embedded inside the negative phrase of the same
        // finding makes extraction ambiguous.
        let mut rows = String::from("finding,polarity,text\n");
        for finding in FindingLabel::ALL {
            let name = finding.display_name();
            rows.push_str(&format!("{name},positive,{name} marker alpha.\n"));
            rows.push_str(&format!("{name},negative,{name} marker beta.\n"));
        }
        rows.push_str("Edema,positive,edema extra.\n");
        rows.push_str("Edema,negative,no edema extra.\n");
        let err = PhraseBank::from_reader(rows.as_bytes()).unwrap_err();
        assert!(matches!(err, NotegenError::AmbiguousBank { .. }), "got {err:?}");
    }
}
