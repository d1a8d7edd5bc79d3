//! Canonical QA sample representation and line-delimited dataset ingestion.
//!
//! The on-disk dataset format is UTF-8, one JSON object per line:
//!
//! ```json
//! {"id":"s1","frames":[{"uri":"f0.jpg","index":0}],"question":"...",
//!  "options":["...","...","...","..."],"domain":"surgery","rate":1,
//!  "offset":0,"gold":"B"}
//! ```
//!
//! `options` holds exactly four non-empty strings for labels A-D in order.
//! `rate` accepts a positive integer, a decimal string, or an `"n/d"`
//! rational string. `offset` defaults to 0 and `gold` may be absent (blind
//! test splits). See `docs/dataset_format.md` for the full field contract.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::rat::Rat;

/// Answer label for four-way multiple choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    C,
    D,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::A, Label::B, Label::C, Label::D];

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::A => "A",
            Label::B => "B",
            Label::C => "C",
            Label::D => "D",
        }
    }

    pub fn as_char(&self) -> char {
        self.as_str().as_bytes()[0] as char
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn from_char(c: char) -> Option<Label> {
        match c {
            'A' => Some(Label::A),
            'B' => Some(Label::B),
            'C' => Some(Label::C),
            'D' => Some(Label::D),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::from_char(c).ok_or_else(|| format!("invalid label {s:?}")),
            _ => Err(format!("invalid label {s:?}")),
        }
    }
}

/// Declaration-order matches the report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Animal,
    Xsports,
    Industry,
    Surgery,
}

impl Domain {
    pub const ALL: [Domain; 4] = [
        Domain::Animal,
        Domain::Xsports,
        Domain::Industry,
        Domain::Surgery,
    ];

    /// Lowercase name used in dataset records and config files.
    pub fn wire_name(&self) -> &'static str {
        match self {
            Domain::Animal => "animal",
            Domain::Xsports => "xsports",
            Domain::Industry => "industry",
            Domain::Surgery => "surgery",
        }
    }

    /// Column heading used in rendered report tables.
    pub fn heading(&self) -> &'static str {
        match self {
            Domain::Animal => "Animal",
            Domain::Xsports => "XSports",
            Domain::Industry => "Industry",
            Domain::Surgery => "Surgery",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.heading())
    }
}

/// Reference to one pre-extracted frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    /// File path or URL of the frame image.
    pub uri: String,
    /// Frame index within its source sequence.
    pub index: u64,
    /// Declared pixel width; present iff `height` is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    /// Declared pixel height; present iff `width` is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

/// Exactly four option texts, positionally labeled A, B, C, D.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptionSet {
    texts: [String; 4],
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OptionSetError {
    #[error("option count != 4 (got {0})")]
    WrongCount(usize),
    #[error("option {0} text is empty")]
    EmptyText(Label),
}

impl OptionSet {
    pub fn new(texts: [String; 4]) -> Result<Self, OptionSetError> {
        for (label, text) in Label::ALL.iter().zip(texts.iter()) {
            if text.trim().is_empty() {
                return Err(OptionSetError::EmptyText(*label));
            }
        }
        Ok(OptionSet { texts })
    }

    pub fn from_vec(texts: Vec<String>) -> Result<Self, OptionSetError> {
        let n = texts.len();
        let arr: [String; 4] = texts
            .try_into()
            .map_err(|_| OptionSetError::WrongCount(n))?;
        Self::new(arr)
    }

    pub fn text(&self, label: Label) -> &str {
        &self.texts[label.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &str)> {
        Label::ALL
            .into_iter()
            .zip(self.texts.iter().map(String::as_str))
    }

    /// Deterministic options block used in every stage prompt.
    pub fn render_block(&self) -> String {
        let mut out = String::from("OPTIONS\n");
        for (label, text) in self.iter() {
            out.push_str(&format!("{label}. {text}\n"));
        }
        out.push_str("END OPTIONS");
        out
    }
}

impl Serialize for OptionSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.texts.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for OptionSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let texts = Vec::<String>::deserialize(deserializer)?;
        OptionSet::from_vec(texts).map_err(D::Error::custom)
    }
}

/// Domain, sampling rate and global offset for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub domain: Domain,
    /// Frames per second; must be positive.
    pub sampling_rate: Rat,
    /// Global index offset of the sample's first frame.
    pub sequence_offset: u64,
    pub sample_id: String,
}

/// One multiple-choice QA instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub frames: Vec<FrameRef>,
    pub question: String,
    pub options: OptionSet,
    pub metadata: SampleMetadata,
    /// Present for evaluation splits; absent samples still get predictions
    /// but are excluded from accuracy aggregation.
    pub gold_label: Option<Label>,
}

/// Wire-format record; field names are part of the dataset contract.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    frames: Vec<FrameRef>,
    question: String,
    options: OptionSet,
    domain: Domain,
    rate: Rat,
    #[serde(default)]
    offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<Label>,
}

impl Record {
    fn into_sample(self) -> Sample {
        Sample {
            metadata: SampleMetadata {
                domain: self.domain,
                sampling_rate: self.rate,
                sequence_offset: self.offset,
                sample_id: self.id.clone(),
            },
            id: self.id,
            frames: self.frames,
            question: self.question,
            options: self.options,
            gold_label: self.gold,
        }
    }

    fn from_sample(sample: &Sample) -> Record {
        Record {
            id: sample.id.clone(),
            frames: sample.frames.clone(),
            question: sample.question.clone(),
            options: sample.options.clone(),
            domain: sample.metadata.domain,
            rate: sample.metadata.sampling_rate,
            offset: sample.metadata.sequence_offset,
            gold: sample.gold_label,
        }
    }
}

/// One rejected input line with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedRecord {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for MalformedRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed record at {0}")]
    Malformed(MalformedRecord),
    #[error("dataset read failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Whether ingestion aborts on the first bad record or collects and skips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestMode {
    /// Skip bad lines, report them in [`ParsedDataset::rejected`].
    #[default]
    Lenient,
    /// Abort on the first bad line.
    Strict,
}

#[derive(Debug, Default)]
pub struct ParsedDataset {
    /// Accepted samples in input order.
    pub samples: Vec<Sample>,
    /// Rejected lines, in input order (always empty in strict mode).
    pub rejected: Vec<MalformedRecord>,
}

/// Parse line-delimited records, validating every sample invariant.
pub fn parse_dataset(
    reader: impl BufRead,
    mode: IngestMode,
) -> Result<ParsedDataset, DatasetError> {
    let mut out = ParsedDataset::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let parsed: Result<Sample, String> = serde_json::from_str::<Record>(&line)
            .map_err(|e| e.to_string())
            .map(Record::into_sample)
            .and_then(|s| match validate_sample(&s) {
                Ok(()) => Ok(s),
                Err(violations) => Err(violations.join("; ")),
            });
        match parsed {
            Ok(sample) => out.samples.push(sample),
            Err(reason) => {
                let bad = MalformedRecord {
                    line: lineno,
                    reason,
                };
                match mode {
                    IngestMode::Lenient => out.rejected.push(bad),
                    IngestMode::Strict => return Err(DatasetError::Malformed(bad)),
                }
            }
        }
    }
    Ok(out)
}

/// Serialize samples back to the line-delimited record format.
///
/// `parse_dataset` of the result reproduces the input samples exactly.
pub fn serialize_dataset(samples: &[Sample]) -> String {
    let mut out = String::new();
    for sample in samples {
        let record = Record::from_sample(sample);
        out.push_str(&serde_json::to_string(&record).expect("record serialization cannot fail"));
        out.push('\n');
    }
    out
}

/// Check every type invariant; violations are returned by name, not raised.
pub fn validate_sample(sample: &Sample) -> Result<(), Vec<String>> {
    let mut violations = Vec::new();
    if sample.frames.is_empty() {
        violations.push("frames non-empty".to_string());
    }
    if !sample.frames.windows(2).all(|w| w[0].index < w[1].index) {
        violations.push("frame indices strictly increasing".to_string());
    }
    for frame in &sample.frames {
        if frame.width.is_some() != frame.height.is_some() {
            violations.push("frame width/height both present or both absent".to_string());
            break;
        }
    }
    if sample.question.trim().is_empty() {
        violations.push("question non-empty".to_string());
    }
    if sample.metadata.sampling_rate.is_zero() {
        violations.push("sampling_rate > 0".to_string());
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
