//! Defensive answer calibration.
//!
//! A total, deterministic map from any raw model response to a valid label,
//! with a tiered recovery hierarchy and provenance of which tier fired:
//!
//! * tier 1 (`structured`) — the constrained prediction field: the last line
//!   matching `FINAL ANSWER: <L>` (keyword case-insensitive, label
//!   uppercase, optional parentheses and trailing punctuation);
//! * tier 2 (`recovered_mention`) — the most reliable isolated option
//!   mention, ranked: (1) parenthesized `(L)` or `option L` forms, (2) a
//!   standalone letter on its own line, then a standalone letter token
//!   elsewhere, (3) a unique verbatim match of one option's full text.
//!   Within a rank the last occurrence wins (recency tracks the model's
//!   final decision);
//! * tier 3 (`fallback`) — the configured fallback label.
//!
//! Calibration never re-queries the model and never alters semantics; it
//! only recovers the label the response already committed to.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::sample::{Label, OptionSet};

/// Which recovery tier produced the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Structured,
    RecoveredMention,
    Fallback,
}

/// A calibrated prediction with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub tier: Tier,
    /// Byte range of the decisive span in the raw response; absent iff the
    /// fallback tier fired.
    pub source_span: Option<(usize, usize)>,
    /// SHA-256 of the raw response.
    pub raw_digest: String,
}

impl Prediction {
    pub fn is_fallback(&self) -> bool {
        self.tier == Tier::Fallback
    }
}

/// Calibration knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrateOptions {
    /// Label emitted when nothing can be recovered.
    pub fallback_label: Label,
    /// When false, only the tier-1 structured field is consulted.
    pub mention_recovery: bool,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        CalibrateOptions {
            fallback_label: Label::A,
            mention_recovery: true,
        }
    }
}

static STRUCTURED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^[^\S\n]*(?i:final answer)[^\S\n]*:[^\S\n]*\(?([A-D])\)?[[:punct:]]?[^\S\n]*$")
        .expect("structured-field regex compiles")
});

static RANK1_MENTION: LazyLock<Regex> = LazyLock::new(|| {
    // Parenthesized letters and "option L" / "option (L)" forms.
    Regex::new(r"\(([A-D])\)|(?i:option)[^\S\n]*\(?([A-D])\)?(?:[^0-9A-Za-z]|$)")
        .expect("rank-1 mention regex compiles")
});

static RANK2_OWN_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^[^\S\n]*([A-D])[^\S\n]*[.)]?[^\S\n]*$").expect("own-line regex compiles")
});

/// Calibrate with the default options (fallback `A`, recovery enabled).
pub fn calibrate(raw: &str, options: &OptionSet) -> Prediction {
    calibrate_with(raw, options, &CalibrateOptions::default())
}

/// Total calibration: always returns a valid label, never faults.
pub fn calibrate_with(raw: &str, options: &OptionSet, opts: &CalibrateOptions) -> Prediction {
    let raw_digest = sha256_hex(raw.as_bytes());

    // Tier 1: last structured prediction field wins (models revise).
    if let Some((label, span)) = last_structured_field(raw) {
        return Prediction {
            label,
            tier: Tier::Structured,
            source_span: Some(span),
            raw_digest,
        };
    }

    // Tier 2: most reliable isolated option mention.
    if opts.mention_recovery {
        if let Some((label, span)) = best_mention(raw, options) {
            return Prediction {
                label,
                tier: Tier::RecoveredMention,
                source_span: Some(span),
                raw_digest,
            };
        }
    }

    Prediction {
        label: opts.fallback_label,
        tier: Tier::Fallback,
        source_span: None,
        raw_digest,
    }
}

/// Canonical rendering of a prediction; `calibrate` of the result recovers
/// the same label at the structured tier.
pub fn canonical_render(prediction: &Prediction) -> String {
    format!("FINAL ANSWER: {}", prediction.label)
}

fn last_structured_field(raw: &str) -> Option<(Label, (usize, usize))> {
    let mut found = None;
    for captures in STRUCTURED.captures_iter(raw) {
        let group = captures.get(1).expect("structured regex has one group");
        let label = Label::from_char(group.as_str().chars().next()?)?;
        found = Some((label, (group.start(), group.end())));
    }
    found
}

fn best_mention(raw: &str, options: &OptionSet) -> Option<(Label, (usize, usize))> {
    rank1_mentions(raw)
        .or_else(|| rank2_own_line(raw))
        .or_else(|| rank2_standalone_token(raw))
        .or_else(|| rank3_unique_option_text(raw, options))
}

/// Rank 1: parenthesized or "option L" forms; last occurrence wins.
fn rank1_mentions(raw: &str) -> Option<(Label, (usize, usize))> {
    let mut found = None;
    for captures in RANK1_MENTION.captures_iter(raw) {
        let group = captures.get(1).or_else(|| captures.get(2))?;
        if let Some(label) = Label::from_char(group.as_str().chars().next()?) {
            found = Some((label, (group.start(), group.end())));
        }
    }
    found
}

/// Rank 2a: a standalone letter on its own line; last occurrence wins.
fn rank2_own_line(raw: &str) -> Option<(Label, (usize, usize))> {
    let mut found = None;
    for captures in RANK2_OWN_LINE.captures_iter(raw) {
        let group = captures.get(1).expect("own-line regex has one group");
        if let Some(label) = Label::from_char(group.as_str().chars().next()?) {
            found = Some((label, (group.start(), group.end())));
        }
    }
    found
}

/// Rank 2b: a standalone uppercase letter token elsewhere in the text.
///
/// Guards against false positives: `A` followed by a word is treated as the
/// article, and `L. word` shapes are treated as echoed option listings.
fn rank2_standalone_token(raw: &str) -> Option<(Label, (usize, usize))> {
    let bytes = raw.as_bytes();
    let mut found = None;
    for (pos, &byte) in bytes.iter().enumerate() {
        let Some(label) = Label::from_char(byte as char) else {
            continue;
        };
        let left_ok = pos == 0 || !bytes[pos - 1].is_ascii_alphanumeric();
        let right_ok = pos + 1 == bytes.len() || !bytes[pos + 1].is_ascii_alphanumeric();
        if !left_ok || !right_ok {
            continue;
        }
        if label == Label::A && followed_by_word(bytes, pos + 1) {
            continue; // the article, not an answer
        }
        if option_listing_shape(bytes, pos + 1) {
            continue; // "B. some text" echoes the option list
        }
        found = Some((label, (pos, pos + 1)));
    }
    found
}

/// True when the next non-space characters begin a word (letter).
fn followed_by_word(bytes: &[u8], mut idx: usize) -> bool {
    while idx < bytes.len() && (bytes[idx] == b' ' || bytes[idx] == b'\t') {
        idx += 1;
    }
    idx < bytes.len() && bytes[idx].is_ascii_alphabetic()
}

/// True for `". word"` — the shape of an echoed option listing.
fn option_listing_shape(bytes: &[u8], idx: usize) -> bool {
    bytes.get(idx) == Some(&b'.') && followed_by_word(bytes, idx + 1)
}

/// Rank 3: exactly one option's full text occurs verbatim (case-insensitive).
fn rank3_unique_option_text(raw: &str, options: &OptionSet) -> Option<(Label, (usize, usize))> {
    let haystack = raw.to_lowercase();
    let mut matched: Option<(Label, (usize, usize))> = None;
    for (label, text) in options.iter() {
        let needle = text.to_lowercase();
        if needle.is_empty() {
            continue;
        }
        let last = haystack.rfind(&needle);
        if let Some(start) = last {
            if matched.is_some() {
                return None; // several options mentioned: ambiguous
            }
            matched = Some((label, (start, start + needle.len())));
        }
    }
    matched
}
