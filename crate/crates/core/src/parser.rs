//! Converts raw backend text into a structured verdict.
//!
//! Parsing is total: it never panics on any input string, and failures are
//! values, never exceptions. A failed parse flags the case downstream; it is
//! never silently dropped.

use serde::{Deserialize, Serialize};

use crate::labels::{FindingBits, Verdict};

/// Why a response failed to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    /// No `POSSIBLE DIAGNOSES` header and the response is not a bare digit.
    MissingHeader,
    /// A header was found but no binary digit follows it.
    NoDigit,
    /// A digit outside {0, 1}, or conflicting digits, immediately follow the
    /// header. Malformed outputs fail loud rather than being guessed at.
    AmbiguousDigits,
    EmptyResponse,
}

/// Outcome of [`parse_response`]: either a verdict with the character span
/// of the matched digit, or a failure reason. Exactly one of the two.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ParseResult {
    Parsed {
        verdict: Verdict,
        /// Character (not byte) offsets of the digit, half-open.
        matched_span: (usize, usize),
    },
    Failed { reason: ParseFailure },
}

impl ParseResult {
    pub fn verdict(&self) -> Option<Verdict> {
        match self {
            ParseResult::Parsed { verdict, .. } => Some(*verdict),
            ParseResult::Failed { .. } => None,
        }
    }

    pub fn failure_reason(&self) -> Option<ParseFailure> {
        match self {
            ParseResult::Parsed { .. } => None,
            ParseResult::Failed { reason } => Some(*reason),
        }
    }

    pub fn matched_span(&self) -> Option<(usize, usize)> {
        match self {
            ParseResult::Parsed { matched_span, .. } => Some(*matched_span),
            ParseResult::Failed { .. } => None,
        }
    }
}

const HEADER: &str = "POSSIBLE DIAGNOSES";

/// Parses a backend response into a binary verdict.
///
/// Locates the last case-insensitive occurrence of `POSSIBLE DIAGNOSES`
/// (models sometimes echo the instruction block; the final occurrence is the
/// answer), skips punctuation and whitespace, and reads the first digit in
/// {0, 1}. Prose after the digit is ignored. Without a header, a response
/// that strips to exactly `0` or `1` still parses.
pub fn parse_response(raw_text: &str) -> ParseResult {
    if raw_text.trim().is_empty() {
        return ParseResult::Failed { reason: ParseFailure::EmptyResponse };
    }

    let chars: Vec<char> = raw_text.chars().collect();
    match rfind_ascii_ci(&chars, HEADER) {
        Some(start) => scan_digit_after(&chars, start + HEADER.chars().count()),
        None => {
            let trimmed = raw_text.trim();
            if trimmed == "0" || trimmed == "1" {
                let pos = chars
                    .iter()
                    .position(|c| !c.is_whitespace())
                    .expect("non-empty after trim check");
                let verdict = Verdict::from_digit(trimmed.as_bytes()[0] - b'0')
                    .expect("digit is 0 or 1");
                ParseResult::Parsed { verdict, matched_span: (pos, pos + 1) }
            } else {
                ParseResult::Failed { reason: ParseFailure::MissingHeader }
            }
        }
    }
}

/// Last case-insensitive occurrence of an ASCII needle, as a char index.
fn rfind_ascii_ci(haystack: &[char], needle: &str) -> Option<usize> {
    let needle: Vec<char> = needle.chars().collect();
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    (0..=haystack.len() - needle.len()).rev().find(|&start| {
        haystack[start..start + needle.len()]
            .iter()
            .zip(&needle)
            .all(|(a, b)| a.eq_ignore_ascii_case(b))
    })
}

fn scan_digit_after(chars: &[char], from: usize) -> ParseResult {
    let skip = |c: char| !c.is_alphanumeric();
    let mut i = from;
    while i < chars.len() && skip(chars[i]) {
        i += 1;
    }
    if i >= chars.len() {
        return ParseResult::Failed { reason: ParseFailure::NoDigit };
    }
    let digit = chars[i];
    match digit {
        '0' | '1' => {
            // Any immediately-following conflicting digit (only punctuation
            // or whitespace in between) makes the answer ambiguous.
            let mut j = i + 1;
            loop {
                while j < chars.len() && skip(chars[j]) {
                    j += 1;
                }
                match chars.get(j) {
                    Some(c) if c.is_ascii_digit() => {
                        if *c != digit {
                            return ParseResult::Failed { reason: ParseFailure::AmbiguousDigits };
                        }
                        j += 1;
                    }
                    _ => break,
                }
            }
            let verdict = Verdict::from_digit(digit as u8 - b'0').expect("digit is 0 or 1");
            ParseResult::Parsed { verdict, matched_span: (i, i + 1) }
        }
        '2'..='9' => ParseResult::Failed { reason: ParseFailure::AmbiguousDigits },
        _ => ParseResult::Failed { reason: ParseFailure::NoDigit },
    }
}

/// Parses a per-finding response: 14 binary digits after the header, one per
/// finding in canonical order. This is the 14-bit extension mode; the
/// case-level [`parse_response`] is the canonical evaluation path.
pub fn parse_finding_vector(raw_text: &str) -> Result<FindingBits, ParseFailure> {
    if raw_text.trim().is_empty() {
        return Err(ParseFailure::EmptyResponse);
    }
    let chars: Vec<char> = raw_text.chars().collect();
    let start = rfind_ascii_ci(&chars, HEADER).ok_or(ParseFailure::MissingHeader)?;
    let mut bits = [false; 14];
    let mut found = 0usize;
    let mut i = start + HEADER.chars().count();
    while i < chars.len() && found < 14 {
        let c = chars[i];
        if c == '0' || c == '1' {
            bits[found] = c == '1';
            found += 1;
        } else if c.is_alphanumeric() {
            return Err(ParseFailure::AmbiguousDigits);
        }
        i += 1;
    }
    if found == 14 {
        Ok(FindingBits::from_verdicts(bits))
    } else {
        Err(ParseFailure::NoDigit)
    }
}
