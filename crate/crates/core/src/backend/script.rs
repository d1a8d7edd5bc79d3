//! Deterministic scripted backend for tests, replays, and offline runs.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatRequest, ChatResponse, FinishReason, TokenUsage};

/// One canned reply: either text or a scripted failure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedReply {
    Text(String),
    RateLimited { retry_after: Option<u64> },
    Transport(String),
    MalformedRequest(String),
}

impl ScriptedReply {
    fn into_result(self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        match self {
            ScriptedReply::Text(text) => Ok(ChatResponse {
                // Deterministic pseudo-usage so reports stay byte-identical
                // across runs.
                usage: TokenUsage {
                    prompt_tokens: (request.text().len() / 4) as u64,
                    completion_tokens: (text.len() / 4) as u64,
                },
                text,
                finish_reason: FinishReason::Stop,
                latency_ms: 0,
                cached: false,
            }),
            ScriptedReply::RateLimited { retry_after } => {
                Err(BackendError::RateLimited { retry_after })
            }
            ScriptedReply::Transport(detail) => Err(BackendError::Transport(detail)),
            ScriptedReply::MalformedRequest(detail) => Err(BackendError::MalformedRequest(detail)),
        }
    }
}

type Responder = dyn Fn(&ChatRequest) -> ScriptedReply + Send + Sync;

enum Mode {
    /// Replies consumed strictly in order (single consumer).
    Ordered(Mutex<std::vec::IntoIter<ScriptedReply>>),
    /// Replies keyed by request digest (safe for concurrent callers).
    Keyed(BTreeMap<String, ScriptedReply>),
    /// Reply computed from the request by a pure function.
    Responder(Box<Responder>),
}

/// Scripted player. Byte-deterministic given the same script and request
/// sequence.
pub struct ScriptedBackend {
    mode: Mode,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn ordered(replies: Vec<ScriptedReply>) -> Self {
        ScriptedBackend {
            mode: Mode::Ordered(Mutex::new(replies.into_iter())),
            calls: AtomicU64::new(0),
        }
    }

    /// Convenience: ordered plain-text replies.
    pub fn ordered_texts<S: Into<String>>(texts: Vec<S>) -> Self {
        Self::ordered(
            texts
                .into_iter()
                .map(|t| ScriptedReply::Text(t.into()))
                .collect(),
        )
    }

    pub fn keyed(replies: BTreeMap<String, ScriptedReply>) -> Self {
        ScriptedBackend {
            mode: Mode::Keyed(replies),
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_responder(
        f: impl Fn(&ChatRequest) -> ScriptedReply + Send + Sync + 'static,
    ) -> Self {
        ScriptedBackend {
            mode: Mode::Responder(Box::new(f)),
            calls: AtomicU64::new(0),
        }
    }

    /// Number of completed `complete` calls (including scripted failures).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let reply = match &self.mode {
            Mode::Ordered(iter) => iter
                .lock()
                .expect("script iterator lock")
                .next()
                .ok_or_else(|| BackendError::Transport("script exhausted".into()))?,
            Mode::Keyed(map) => map.get(&request.request_digest).cloned().ok_or_else(|| {
                BackendError::Transport(format!(
                    "no scripted reply for digest {}",
                    request.request_digest
                ))
            })?,
            Mode::Responder(f) => f(request),
        };
        reply.into_result(request)
    }
}
