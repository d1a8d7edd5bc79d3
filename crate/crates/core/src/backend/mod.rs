//! Chat-completion backend abstraction.
//!
//! A [`Backend`] accepts a [`ChatRequest`] carrying interleaved text and
//! image parts and returns a [`ChatResponse`]. Implementations:
//!
//! * [`HttpBackend`] — wire client for chat-completion-compatible endpoints
//!   (see `docs/wire_protocol.md` for the exact field names);
//! * [`ScriptedBackend`] — deterministic canned responses for tests and
//!   replays;
//! * [`CachingBackend`] — digest-keyed response cache so re-running identical
//!   calls never re-bills.

mod budget;
mod cache;
mod http;
mod script;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::sample::FrameRef;

pub use budget::apply_visual_budget;
pub use cache::CachingBackend;
pub use http::{HttpBackend, HttpBackendConfig};
pub use script::{ScriptedBackend, ScriptedReply};

/// Generation-length default.
pub const DEFAULT_MAX_NEW_TOKENS: u32 = 2048;
/// Admissible repetition-penalty interval.
pub const REPETITION_PENALTY_RANGE: (f64, f64) = (1.05, 1.1);
/// Default visual budget in pixels per image.
pub const DEFAULT_MAX_PIXELS: u64 = 360_000;
/// Default higher budget for small-object mode.
pub const DEFAULT_HIGH_RES_PIXELS: u64 = 720_000;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited{}", .retry_after.map(|s| format!(" (retry after {s}s)")).unwrap_or_default())]
    RateLimited { retry_after: Option<u64> },
    #[error("malformed request: {0}")]
    MalformedRequest(String),
    #[error("response truncated at the generation-length limit")]
    Overflow,
    #[error("visual budget must be at least 1 pixel")]
    InvalidBudget,
    #[error("{0}")]
    InvalidParams(String),
}

impl BackendError {
    /// Transient failures worth retrying; malformed requests never self-heal.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport(_) | BackendError::RateLimited { .. }
        )
    }
}

/// Source of an image part: a locator or inline base64 data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    Uri(String),
    Base64 { media_type: String, data: String },
}

/// One part of a chat message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessagePart {
    Text {
        text: String,
    },
    Image {
        source: ImageSource,
        width: Option<u32>,
        height: Option<u32>,
    },
}

/// Pixel budgets for image evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualBudget {
    pub max_pixels: u64,
    /// Budget used in small-object (high-resolution) mode; must be at least
    /// `max_pixels`.
    pub high_res_pixels: u64,
}

impl VisualBudget {
    pub fn new(max_pixels: u64, high_res_pixels: u64) -> Result<Self, BackendError> {
        if max_pixels < 1 || high_res_pixels < max_pixels {
            return Err(BackendError::InvalidBudget);
        }
        Ok(VisualBudget {
            max_pixels,
            high_res_pixels,
        })
    }

    pub fn pixels(&self, high_res: bool) -> u64 {
        if high_res {
            self.high_res_pixels
        } else {
            self.max_pixels
        }
    }
}

impl Default for VisualBudget {
    fn default() -> Self {
        VisualBudget {
            max_pixels: DEFAULT_MAX_PIXELS,
            high_res_pixels: DEFAULT_HIGH_RES_PIXELS,
        }
    }
}

/// One chat-completion request. The digest covers every field that affects
/// the remote call and keys the response cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub message_parts: Vec<MessagePart>,
    pub max_new_tokens: u32,
    pub repetition_penalty: f64,
    pub temperature: f64,
    pub request_digest: String,
}

impl ChatRequest {
    pub fn new(
        model_id: impl Into<String>,
        message_parts: Vec<MessagePart>,
        max_new_tokens: u32,
        repetition_penalty: f64,
        temperature: f64,
    ) -> Self {
        let mut req = ChatRequest {
            model_id: model_id.into(),
            message_parts,
            max_new_tokens,
            repetition_penalty,
            temperature,
            request_digest: String::new(),
        };
        req.request_digest = req.compute_digest();
        req
    }

    fn compute_digest(&self) -> String {
        #[derive(Serialize)]
        struct DigestView<'a> {
            model_id: &'a str,
            message_parts: &'a [MessagePart],
            max_new_tokens: u32,
            repetition_penalty: f64,
            temperature: f64,
        }
        let view = DigestView {
            model_id: &self.model_id,
            message_parts: &self.message_parts,
            max_new_tokens: self.max_new_tokens,
            repetition_penalty: self.repetition_penalty,
            temperature: self.temperature,
        };
        sha256_hex(
            serde_json::to_string(&view)
                .expect("request digest view serializes")
                .as_bytes(),
        )
    }

    /// Concatenated text of all text parts (used by scripted responders).
    pub fn text(&self) -> String {
        let mut out = String::new();
        for part in &self.message_parts {
            if let MessagePart::Text { text } = part {
                out.push_str(text);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: TokenUsage,
    pub latency_ms: u64,
    /// Set by the caching wrapper on a cache hit.
    #[serde(default)]
    pub cached: bool,
}

/// A chat-completion capability. Implementations must be safe for concurrent
/// callers.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Generation parameters with their admissible overrides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: u32,
    /// Admissible repetition-penalty interval (inclusive).
    pub repetition_penalty_range: (f64, f64),
}

/// The default generation policy: 2048 new tokens, repetition penalty
/// admissible in [1.05, 1.1].
pub fn default_generation_params() -> GenerationParams {
    GenerationParams {
        max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        repetition_penalty_range: REPETITION_PENALTY_RANGE,
    }
}

impl GenerationParams {
    /// Validate a max-token override against the configured ceiling.
    pub fn override_max_new_tokens(
        &self,
        requested: u32,
        ceiling: u32,
    ) -> Result<u32, BackendError> {
        if requested == 0 || requested > ceiling {
            return Err(BackendError::InvalidParams(format!(
                "max_new_tokens {requested} outside (0, {ceiling}]"
            )));
        }
        Ok(requested)
    }

    /// Validate a repetition-penalty override; `force` admits out-of-range
    /// values (they are still recorded in the config snapshot).
    pub fn override_repetition_penalty(
        &self,
        requested: f64,
        force: bool,
    ) -> Result<f64, BackendError> {
        let (lo, hi) = self.repetition_penalty_range;
        if !force && !(lo..=hi).contains(&requested) {
            return Err(BackendError::InvalidParams(format!(
                "repetition_penalty {requested} outside [{lo}, {hi}] (use force to override)"
            )));
        }
        Ok(requested)
    }
}

/// Request-construction policy: model id, generation parameters, and the
/// visual budget applied to image parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestPolicy {
    pub model_id: String,
    pub max_new_tokens: u32,
    pub repetition_penalty: f64,
    pub temperature: f64,
    pub budget: VisualBudget,
    /// Per-domain repetition-penalty overrides (wire names as keys).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_domain_penalty: BTreeMap<String, f64>,
}

impl Default for RequestPolicy {
    fn default() -> Self {
        RequestPolicy {
            model_id: "scripted".to_string(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            repetition_penalty: REPETITION_PENALTY_RANGE.0,
            temperature: 0.0,
            budget: VisualBudget::default(),
            per_domain_penalty: BTreeMap::new(),
        }
    }
}

impl RequestPolicy {
    pub fn penalty_for_domain(&self, domain_wire_name: &str) -> f64 {
        self.per_domain_penalty
            .get(domain_wire_name)
            .copied()
            .unwrap_or(self.repetition_penalty)
    }

    /// Build a request from rendered prompt text plus evidence frames.
    ///
    /// Frames with declared dimensions get target dimensions from the visual
    /// budget; undeclared frames pass through unchanged.
    pub fn build_request(
        &self,
        prompt_text: &str,
        frames: &[FrameRef],
        high_res: bool,
        repetition_penalty: f64,
    ) -> Result<ChatRequest, BackendError> {
        let mut parts = Vec::with_capacity(frames.len() + 1);
        parts.push(MessagePart::Text {
            text: prompt_text.to_string(),
        });
        for frame in frames {
            let (width, height) = match (frame.width, frame.height) {
                (Some(w), Some(h)) => {
                    let (tw, th) = apply_visual_budget(w, h, &self.budget, high_res)?;
                    (Some(tw), Some(th))
                }
                _ => (None, None),
            };
            parts.push(MessagePart::Image {
                source: ImageSource::Uri(frame.uri.clone()),
                width,
                height,
            });
        }
        Ok(ChatRequest::new(
            self.model_id.clone(),
            parts,
            self.max_new_tokens,
            repetition_penalty,
            self.temperature,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(text: &str) -> ChatRequest {
        ChatRequest::new(
            "m",
            vec![MessagePart::Text { text: text.into() }],
            2048,
            1.05,
            0.0,
        )
    }

    #[test]
    fn default_params_match_policy() {
        let params = default_generation_params();
        assert_eq!(params.max_new_tokens, 2048);
        assert_eq!(params.repetition_penalty_range, (1.05, 1.1));
    }

    #[test]
    fn max_token_override_respects_ceiling() {
        let params = default_generation_params();
        assert_eq!(params.override_max_new_tokens(512, 2048).unwrap(), 512);
        assert!(params.override_max_new_tokens(4096, 2048).is_err());
        assert!(params.override_max_new_tokens(0, 2048).is_err());
    }

    #[test]
    fn penalty_override_outside_interval_needs_force() {
        let params = default_generation_params();
        assert_eq!(
            params.override_repetition_penalty(1.07, false).unwrap(),
            1.07
        );
        assert!(params.override_repetition_penalty(1.3, false).is_err());
        assert_eq!(params.override_repetition_penalty(1.3, true).unwrap(), 1.3);
    }

    #[test]
    fn digest_covers_every_request_field() {
        let base = request("hello");
        let mut variants = vec![
            ChatRequest::new("m2", base.message_parts.clone(), 2048, 1.05, 0.0),
            ChatRequest::new("m", base.message_parts.clone(), 1024, 1.05, 0.0),
            ChatRequest::new("m", base.message_parts.clone(), 2048, 1.1, 0.0),
            ChatRequest::new("m", base.message_parts.clone(), 2048, 1.05, 0.7),
            request("hello world"),
        ];
        variants.push(ChatRequest::new(
            "m",
            vec![
                MessagePart::Text {
                    text: "hello".into(),
                },
                MessagePart::Image {
                    source: ImageSource::Uri("f.jpg".into()),
                    width: None,
                    height: None,
                },
            ],
            2048,
            1.05,
            0.0,
        ));
        for variant in variants {
            assert_ne!(variant.request_digest, base.request_digest);
        }
        assert_eq!(request("hello").request_digest, base.request_digest);
    }

    #[test]
    fn budget_applies_to_declared_dimensions_only() {
        let policy = RequestPolicy::default();
        let frames = vec![
            FrameRef {
                uri: "big.jpg".into(),
                index: 0,
                width: Some(1920),
                height: Some(1080),
            },
            FrameRef {
                uri: "bare.jpg".into(),
                index: 1,
                width: None,
                height: None,
            },
        ];
        let req = policy.build_request("p", &frames, false, 1.05).unwrap();
        match &req.message_parts[1] {
            MessagePart::Image { width, height, .. } => {
                assert_eq!((*width, *height), (Some(800), Some(450)));
            }
            other => panic!("unexpected part {other:?}"),
        }
        match &req.message_parts[2] {
            MessagePart::Image { width, height, .. } => assert_eq!((*width, *height), (None, None)),
            other => panic!("unexpected part {other:?}"),
        }
    }

    #[test]
    fn per_domain_penalty_falls_back_to_default() {
        let mut policy = RequestPolicy::default();
        policy.per_domain_penalty.insert("industry".into(), 1.1);
        assert_eq!(policy.penalty_for_domain("industry"), 1.1);
        assert_eq!(policy.penalty_for_domain("surgery"), 1.05);
    }

    #[test]
    fn invalid_budget_construction_rejected() {
        assert!(VisualBudget::new(0, 0).is_err());
        assert!(VisualBudget::new(100, 50).is_err());
        assert!(VisualBudget::new(100, 100).is_ok());
    }
}
