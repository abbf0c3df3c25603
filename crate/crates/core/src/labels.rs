//! Label vocabulary for the 14 CheXpert findings and the case-level verdict.
//!
//! A [`LabelVector`] is total over all 14 findings. Source data carries four
//! states (`1.0`, `0.0`, `-1.0`, blank); the uncertain and unmentioned states
//! exist only at ingestion time and are resolved to positive/negative by an
//! explicit [`UncertainPolicy`] before any evaluation.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// The 14 findings labeled per study. `NoFinding` is asserted when none of
/// the other 13 abnormalities is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FindingLabel {
    EnlargedCardiomediastinum,
    Cardiomegaly,
    LungOpacity,
    LungLesion,
    Edema,
    Consolidation,
    Pneumonia,
    Atelectasis,
    Pneumothorax,
    PleuralEffusion,
    PleuralOther,
    Fracture,
    SupportDevices,
    NoFinding,
}

impl FindingLabel {
    /// All 14 findings in canonical order.
    pub const ALL: [FindingLabel; 14] = [
        FindingLabel::EnlargedCardiomediastinum,
        FindingLabel::Cardiomegaly,
        FindingLabel::LungOpacity,
        FindingLabel::LungLesion,
        FindingLabel::Edema,
        FindingLabel::Consolidation,
        FindingLabel::Pneumonia,
        FindingLabel::Atelectasis,
        FindingLabel::Pneumothorax,
        FindingLabel::PleuralEffusion,
        FindingLabel::PleuralOther,
        FindingLabel::Fracture,
        FindingLabel::SupportDevices,
        FindingLabel::NoFinding,
    ];

    /// The 13 abnormality findings (everything except `NoFinding`).
    pub const ABNORMALITIES: [FindingLabel; 13] = [
        FindingLabel::EnlargedCardiomediastinum,
        FindingLabel::Cardiomegaly,
        FindingLabel::LungOpacity,
        FindingLabel::LungLesion,
        FindingLabel::Edema,
        FindingLabel::Consolidation,
        FindingLabel::Pneumonia,
        FindingLabel::Atelectasis,
        FindingLabel::Pneumothorax,
        FindingLabel::PleuralEffusion,
        FindingLabel::PleuralOther,
        FindingLabel::Fracture,
        FindingLabel::SupportDevices,
    ];

    pub fn is_abnormality(self) -> bool {
        self != FindingLabel::NoFinding
    }

    /// Display name, which is also the dataset column header.
    pub fn display_name(self) -> &'static str {
        match self {
            FindingLabel::EnlargedCardiomediastinum => "Enlarged Cardiomediastinum",
            FindingLabel::Cardiomegaly => "Cardiomegaly",
            FindingLabel::LungOpacity => "Lung Opacity",
            FindingLabel::LungLesion => "Lung Lesion",
            FindingLabel::Edema => "Edema",
            FindingLabel::Consolidation => "Consolidation",
            FindingLabel::Pneumonia => "Pneumonia",
            FindingLabel::Atelectasis => "Atelectasis",
            FindingLabel::Pneumothorax => "Pneumothorax",
            FindingLabel::PleuralEffusion => "Pleural Effusion",
            FindingLabel::PleuralOther => "Pleural Other",
            FindingLabel::Fracture => "Fracture",
            FindingLabel::SupportDevices => "Support Devices",
            FindingLabel::NoFinding => "No Finding",
        }
    }

    /// Lower-case name for use inside generated prose.
    pub fn prose_name(self) -> String {
        self.display_name().to_lowercase()
    }

    pub fn from_display_name(name: &str) -> Option<FindingLabel> {
        Self::ALL.into_iter().find(|f| f.display_name() == name)
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|f| *f == self).expect("finding in ALL")
    }
}

impl fmt::Display for FindingLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Per-finding label state. `Uncertain` maps the dataset's `-1.0` cells,
/// `Unmentioned` its blank cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelState {
    Positive,
    Negative,
    Uncertain,
    Unmentioned,
}

/// How uncertain (`-1.0`) source labels are resolved. Blank labels always
/// resolve to negative: a condition the report never mentions is treated as
/// absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertainPolicy {
    UncertainAsPositive,
    #[default]
    UncertainAsNegative,
    /// Drop the case from the dataset entirely.
    ExcludeCase,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("label vector is inconsistent: No Finding is positive but {finding} is positive")]
    Inconsistent { finding: FindingLabel },
    #[error("case contains uncertain labels and the policy is exclude_case")]
    ExcludedByPolicy,
    #[error("label vector is unresolved: {finding} is {state:?}")]
    Unresolved { finding: FindingLabel, state: LabelState },
}

/// Total mapping from the 14 findings to label states.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector {
    states: [LabelState; 14],
}

impl LabelVector {
    /// Vector with every finding set to the same state.
    pub fn uniform(state: LabelState) -> Self {
        LabelVector { states: [state; 14] }
    }

    /// Builds a vector by evaluating `f` once per finding.
    pub fn from_fn(mut f: impl FnMut(FindingLabel) -> LabelState) -> Self {
        let mut states = [LabelState::Negative; 14];
        for finding in FindingLabel::ALL {
            states[finding.index()] = f(finding);
        }
        LabelVector { states }
    }

    /// The normal study: all 13 abnormalities negative, `NoFinding` positive.
    pub fn all_negative() -> Self {
        Self::from_fn(|f| {
            if f == FindingLabel::NoFinding {
                LabelState::Positive
            } else {
                LabelState::Negative
            }
        })
    }

    pub fn get(&self, finding: FindingLabel) -> LabelState {
        self.states[finding.index()]
    }

    pub fn set(&mut self, finding: FindingLabel, state: LabelState) {
        self.states[finding.index()] = state;
    }

    pub fn iter(&self) -> impl Iterator<Item = (FindingLabel, LabelState)> + '_ {
        FindingLabel::ALL.into_iter().map(|f| (f, self.get(f)))
    }

    /// True when no finding is `Uncertain` or `Unmentioned`.
    pub fn is_resolved(&self) -> bool {
        self.states
            .iter()
            .all(|s| matches!(s, LabelState::Positive | LabelState::Negative))
    }

    /// Returns the first unresolved finding, if any.
    pub fn first_unresolved(&self) -> Option<(FindingLabel, LabelState)> {
        self.iter()
            .find(|(_, s)| matches!(s, LabelState::Uncertain | LabelState::Unmentioned))
    }

    /// Resolves uncertain and unmentioned states per the policy.
    ///
    /// Blank (`Unmentioned`) labels always become negative. Resolving an
    /// already-resolved vector is a no-op.
    pub fn resolve(&self, policy: UncertainPolicy) -> Result<LabelVector, LabelError> {
        let mut out = self.clone();
        for finding in FindingLabel::ALL {
            let state = out.get(finding);
            let resolved = match state {
                LabelState::Positive | LabelState::Negative => state,
                LabelState::Unmentioned => LabelState::Negative,
                LabelState::Uncertain => match policy {
                    UncertainPolicy::UncertainAsPositive => LabelState::Positive,
                    UncertainPolicy::UncertainAsNegative => LabelState::Negative,
                    UncertainPolicy::ExcludeCase => return Err(LabelError::ExcludedByPolicy),
                },
            };
            out.set(finding, resolved);
        }
        Ok(out)
    }

    /// Checks that a resolved vector does not assert `NoFinding` together
    /// with a positive abnormality.
    pub fn validate_consistent(&self) -> Result<(), LabelError> {
        if self.get(FindingLabel::NoFinding) == LabelState::Positive {
            for finding in FindingLabel::ABNORMALITIES {
                if self.get(finding) == LabelState::Positive {
                    return Err(LabelError::Inconsistent { finding });
                }
            }
        }
        Ok(())
    }

    /// Resolves the vector per `policy` and returns the case-level verdict:
    /// 1 if any of the 13 abnormality labels is positive, 0 otherwise.
    pub fn ground_truth_verdict(&self, policy: UncertainPolicy) -> Result<Verdict, LabelError> {
        let resolved = self.resolve(policy)?;
        resolved.validate_consistent()?;
        let abnormal = FindingLabel::ABNORMALITIES
            .into_iter()
            .any(|f| resolved.get(f) == LabelState::Positive);
        Ok(if abnormal { Verdict::Abnormal } else { Verdict::Normal })
    }

    /// Per-finding binary view of a resolved vector (the 14-bit extension of
    /// the case-level verdict). Errors if any finding is still unresolved.
    pub fn finding_bits(&self) -> Result<FindingBits, LabelError> {
        if let Some((finding, state)) = self.first_unresolved() {
            return Err(LabelError::Unresolved { finding, state });
        }
        let mut bits = [false; 14];
        for (i, finding) in FindingLabel::ALL.into_iter().enumerate() {
            bits[i] = self.get(finding) == LabelState::Positive;
        }
        Ok(FindingBits { bits })
    }
}

impl Serialize for LabelVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, LabelState> =
            self.iter().map(|(f, s)| (f.display_name(), s)).collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LabelVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, LabelState>::deserialize(deserializer)?;
        if map.len() != 14 {
            return Err(D::Error::custom(format!(
                "label vector must contain exactly 14 findings, got {}",
                map.len()
            )));
        }
        let mut out = LabelVector::uniform(LabelState::Negative);
        for (name, state) in map {
            let finding = FindingLabel::from_display_name(&name)
                .ok_or_else(|| D::Error::custom(format!("unknown finding: {name}")))?;
            out.set(finding, state);
        }
        Ok(out)
    }
}

/// Per-finding presence bits in canonical finding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FindingBits {
    bits: [bool; 14],
}

impl FindingBits {
    pub fn get(&self, finding: FindingLabel) -> bool {
        self.bits[FindingLabel::ALL.iter().position(|f| f == &finding).expect("known finding")]
    }

    pub fn from_verdicts(bits: [bool; 14]) -> Self {
        FindingBits { bits }
    }

    pub fn as_array(&self) -> [bool; 14] {
        self.bits
    }
}

/// Case-level binary verdict: 1 when at least one abnormality is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Verdict {
    Normal,
    Abnormal,
}

impl Verdict {
    pub fn as_digit(self) -> u8 {
        match self {
            Verdict::Normal => 0,
            Verdict::Abnormal => 1,
        }
    }

    pub fn from_digit(digit: u8) -> Option<Verdict> {
        match digit {
            0 => Some(Verdict::Normal),
            1 => Some(Verdict::Abnormal),
            _ => None,
        }
    }
}

impl From<Verdict> for u8 {
    fn from(v: Verdict) -> u8 {
        v.as_digit()
    }
}

impl TryFrom<u8> for Verdict {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Verdict::from_digit(value).ok_or_else(|| format!("verdict must be 0 or 1, got {value}"))
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_digit())
    }
}
