//! Temporal evidence normalization.
//!
//! Converts a frame list into globally timestamped visual units, splits long
//! sequences into offset-aware segments, and renders the reliability
//! observation rule as instruction text. Timestamps are exact rationals:
//! frame `i` of a segment with global offset `i0` at sampling rate `r` gets
//! `t = (i + i0) / r`, so re-segmenting never changes any timestamp.
//!
//! Reliability is deliberately not a computed score. It is carried purely as
//! instruction text injected into the perception stage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rat::Rat;
use crate::sample::{FrameRef, SampleMetadata};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvidenceError {
    #[error("sampling rate must be positive")]
    InvalidRate,
    #[error("max_per_segment must be at least 1")]
    InvalidSegmentSize,
    #[error("reliability rule clause {0:?} is empty")]
    EmptyClause(&'static str),
}

/// A frame paired with its exact global timestamp in seconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampedFrame {
    pub frame: FrameRef,
    pub timestamp: Rat,
}

/// A contiguous run of timestamped frames sharing one global offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_offset: u64,
    pub frames: Vec<TimestampedFrame>,
}

/// Instruction text realizing the frame-reliability observation rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilityRule {
    relevance_clause: String,
    degradation_clause: String,
    transition_exception: String,
}

impl ReliabilityRule {
    pub fn new(
        relevance_clause: impl Into<String>,
        degradation_clause: impl Into<String>,
        transition_exception: impl Into<String>,
    ) -> Result<Self, EvidenceError> {
        let rule = ReliabilityRule {
            relevance_clause: relevance_clause.into(),
            degradation_clause: degradation_clause.into(),
            transition_exception: transition_exception.into(),
        };
        if rule.relevance_clause.trim().is_empty() {
            return Err(EvidenceError::EmptyClause("relevance_clause"));
        }
        if rule.degradation_clause.trim().is_empty() {
            return Err(EvidenceError::EmptyClause("degradation_clause"));
        }
        if rule.transition_exception.trim().is_empty() {
            return Err(EvidenceError::EmptyClause("transition_exception"));
        }
        Ok(rule)
    }

    pub fn relevance_clause(&self) -> &str {
        &self.relevance_clause
    }

    pub fn degradation_clause(&self) -> &str {
        &self.degradation_clause
    }

    pub fn transition_exception(&self) -> &str {
        &self.transition_exception
    }
}

impl Default for ReliabilityRule {
    fn default() -> Self {
        ReliabilityRule::new(
            "Rank frames whose content bears directly on the question and the candidate \
             options as stronger evidence than frames that do not.",
            "Treat frames degraded by blur, abrupt camera motion, or irrelevant clutter \
             as weaker evidence; stable frames provide primary support.",
            "Blurred frames are retained only when they mark transitions between states.",
        )
        .expect("default clauses are non-empty")
    }
}

/// Timestamped, segment-aware evidence for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub segments: Vec<Segment>,
    pub observation_rule: ReliabilityRule,
}

impl Evidence {
    /// All frames across segments, in order.
    pub fn frames(&self) -> impl Iterator<Item = &TimestampedFrame> {
        self.segments.iter().flat_map(|s| s.frames.iter())
    }

    pub fn frame_count(&self) -> usize {
        self.segments.iter().map(|s| s.frames.len()).sum()
    }
}

/// Timestamp each frame: the i-th gets `(i + offset) / rate` exactly.
pub fn timestamp_frames(
    frames: &[FrameRef],
    offset: u64,
    rate: Rat,
) -> Result<Vec<TimestampedFrame>, EvidenceError> {
    if rate.is_zero() {
        return Err(EvidenceError::InvalidRate);
    }
    Ok(frames
        .iter()
        .enumerate()
        .map(|(i, frame)| TimestampedFrame {
            frame: frame.clone(),
            timestamp: Rat::integer(i as u64 + offset) / rate,
        })
        .collect())
}

/// Partition frames into segments of at most `max_per_segment`, each segment
/// carrying the global offset of its first frame. The concatenated timestamps
/// are identical to the unsegmented [`timestamp_frames`] result.
pub fn segment_evidence(
    frames: &[FrameRef],
    metadata: &SampleMetadata,
    max_per_segment: usize,
    observation_rule: ReliabilityRule,
) -> Result<Evidence, EvidenceError> {
    if max_per_segment < 1 {
        return Err(EvidenceError::InvalidSegmentSize);
    }
    if metadata.sampling_rate.is_zero() {
        return Err(EvidenceError::InvalidRate);
    }
    let mut segments = Vec::new();
    for (chunk_idx, chunk) in frames.chunks(max_per_segment).enumerate() {
        let segment_offset = metadata.sequence_offset + (chunk_idx * max_per_segment) as u64;
        segments.push(Segment {
            segment_offset,
            frames: timestamp_frames(chunk, segment_offset, metadata.sampling_rate)?,
        });
    }
    Ok(Evidence {
        segments,
        observation_rule,
    })
}

/// Prompt-text timestamp format; bit-exact for cache keying.
pub fn render_timestamp(t: Rat) -> String {
    format!("t={} s", t.to_decimal_2dp())
}

/// Deterministic observation-rule block prepended to perception prompts.
pub fn render_observation_rule(rule: &ReliabilityRule) -> String {
    format!(
        "OBSERVATION RULE\nRelevance: {}\nDegradation: {}\nTransition exception: {}\nEND OBSERVATION RULE",
        rule.relevance_clause, rule.degradation_clause, rule.transition_exception
    )
}

/// Rendered evidence text plus the frames to attach as image parts.
///
/// Built either from normalized [`Evidence`] or, when normalization is
/// disabled, from a plain unlabeled frame list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceBlock {
    pub text: String,
    pub frames: Vec<FrameRef>,
    /// Observation-rule text; empty when normalization is disabled.
    pub observation_rule_text: String,
}

impl EvidenceBlock {
    pub fn from_evidence(evidence: &Evidence) -> Self {
        let mut text = String::from("EVIDENCE FRAMES\n");
        for (seg_idx, segment) in evidence.segments.iter().enumerate() {
            text.push_str(&format!(
                "SEGMENT {} (offset {})\n",
                seg_idx + 1,
                segment.segment_offset
            ));
            for tf in &segment.frames {
                text.push_str(&format!(
                    "[{}] frame {}: {}\n",
                    render_timestamp(tf.timestamp),
                    tf.frame.index,
                    tf.frame.uri
                ));
            }
        }
        text.push_str("END EVIDENCE");
        EvidenceBlock {
            text,
            frames: evidence.frames().map(|tf| tf.frame.clone()).collect(),
            observation_rule_text: render_observation_rule(&evidence.observation_rule),
        }
    }

    /// Unlabeled ordered frame list: no timestamps, no observation rule.
    pub fn plain(frames: &[FrameRef]) -> Self {
        let mut text = String::from("FRAMES\n");
        for frame in frames {
            text.push_str(&format!("frame {}: {}\n", frame.index, frame.uri));
        }
        text.push_str("END FRAMES");
        EvidenceBlock {
            text,
            frames: frames.to_vec(),
            observation_rule_text: String::new(),
        }
    }
}
