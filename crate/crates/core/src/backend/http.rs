//! Wire client for chat-completion-compatible endpoints.
//!
//! One request per `complete` call: HTTP POST of a JSON body to the
//! configured chat-completions URL, bearer token from an environment
//! variable, user content as an array of typed parts. Local image paths are
//! inlined as base64 data URIs (downscaled to their budgeted dimensions when
//! the raster decodes). The exact field names are documented in
//! `docs/wire_protocol.md`.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::Deserialize;
use serde_json::json;

use super::{
    Backend, BackendError, ChatRequest, ChatResponse, FinishReason, ImageSource, MessagePart,
    TokenUsage,
};

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Full URL of the chat-completions endpoint, e.g.
    /// `http://localhost:8000/v1/chat/completions`.
    pub url: String,
    /// Environment variable holding the bearer token; unset means no
    /// Authorization header.
    pub token_env: String,
    pub timeout_secs: u64,
    /// Maximum concurrent in-flight requests.
    pub max_in_flight: usize,
    /// Treat `finish_reason == "length"` as an overflow error.
    pub length_is_error: bool,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            url: "http://localhost:8000/v1/chat/completions".to_string(),
            token_env: "EGOREASON_API_KEY".to_string(),
            timeout_secs: 120,
            max_in_flight: 4,
            length_is_error: false,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct InFlight {
    permits: Mutex<usize>,
    available: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        InFlight {
            permits: Mutex::new(limit.max(1)),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut permits = self.permits.lock().expect("in-flight lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("in-flight wait");
        }
        *permits -= 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("in-flight lock") += 1;
        self.0.available.notify_one();
    }
}

pub struct HttpBackend {
    agent: ureq::Agent,
    config: HttpBackendConfig,
    token: Option<String>,
    in_flight: InFlight,
    calls: AtomicU64,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .new_agent();
        let token = std::env::var(&config.token_env)
            .ok()
            .filter(|t| !t.is_empty());
        HttpBackend {
            agent,
            in_flight: InFlight::new(config.max_in_flight),
            token,
            config,
            calls: AtomicU64::new(0),
        }
    }

    /// Number of HTTP calls issued.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn wire_body(&self, request: &ChatRequest) -> Result<serde_json::Value, BackendError> {
        let mut content = Vec::with_capacity(request.message_parts.len());
        for part in &request.message_parts {
            match part {
                MessagePart::Text { text } => {
                    content.push(json!({"type": "text", "text": text}));
                }
                MessagePart::Image {
                    source,
                    width,
                    height,
                } => {
                    let url = image_url(source, *width, *height)?;
                    content.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
            }
        }
        Ok(json!({
            "model": request.model_id,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": request.max_new_tokens,
            "temperature": request.temperature,
            "repetition_penalty": request.repetition_penalty,
        }))
    }
}

/// Resolve an image part into a wire URL: remote URLs and data URIs pass
/// through; local paths are read and inlined as base64 data URIs, downscaled
/// to the declared target dimensions when the raster decodes.
fn image_url(
    source: &ImageSource,
    width: Option<u32>,
    height: Option<u32>,
) -> Result<String, BackendError> {
    match source {
        ImageSource::Base64 { media_type, data } => Ok(format!("data:{media_type};base64,{data}")),
        ImageSource::Uri(uri) => {
            if uri.contains("://") || uri.starts_with("data:") {
                return Ok(uri.clone());
            }
            let path = Path::new(uri);
            let bytes = std::fs::read(path)
                .map_err(|e| BackendError::MalformedRequest(format!("frame {uri}: {e}")))?;
            let media_type = match path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .as_deref()
            {
                Some("jpg") | Some("jpeg") => "image/jpeg",
                Some("png") => "image/png",
                _ => "application/octet-stream",
            };
            let bytes = match (width, height) {
                (Some(w), Some(h)) => downscale(&bytes, w, h, media_type).unwrap_or(bytes),
                _ => bytes,
            };
            let encoded = base64::engine::general_purpose::STANDARD.encode(&bytes);
            Ok(format!("data:{media_type};base64,{encoded}"))
        }
    }
}

/// Best-effort area-preserving downscale to the budgeted dimensions.
fn downscale(bytes: &[u8], width: u32, height: u32, media_type: &str) -> Option<Vec<u8>> {
    let decoded = image::load_from_memory(bytes).ok()?;
    if decoded.width() <= width && decoded.height() <= height {
        return None;
    }
    let resized = decoded.resize_exact(width, height, image::imageops::FilterType::Triangle);
    let format = match media_type {
        "image/png" => image::ImageFormat::Png,
        _ => image::ImageFormat::Jpeg,
    };
    let mut out = std::io::Cursor::new(Vec::new());
    resized.write_to(&mut out, format).ok()?;
    Some(out.into_inner())
}

fn parse_retry_after(value: Option<&str>) -> Option<u64> {
    value.and_then(|v| v.trim().parse().ok())
}

impl Backend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let _permit = self.in_flight.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = self.wire_body(request)?;

        let started = Instant::now();
        let mut builder = self
            .agent
            .post(&self.config.url)
            .header("content-type", "application/json");
        if let Some(token) = &self.token {
            builder = builder.header("authorization", format!("Bearer {token}"));
        }
        let mut response = builder
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let latency_ms = started.elapsed().as_millis() as u64;

        let status = response.status().as_u16();
        if status == 429 {
            let retry_after = parse_retry_after(
                response
                    .headers()
                    .get("retry-after")
                    .and_then(|v| v.to_str().ok()),
            );
            return Err(BackendError::RateLimited { retry_after });
        }
        if (400..500).contains(&status) {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::MalformedRequest(format!(
                "status {status}: {}",
                detail.chars().take(300).collect::<String>()
            )));
        }
        if status != 200 {
            return Err(BackendError::Transport(format!("status {status}")));
        }

        let wire: WireResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(format!("response decode: {e}")))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Transport("response had no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("stop") | None => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some(_) => FinishReason::Error,
        };
        if finish_reason == FinishReason::Length && self.config.length_is_error {
            return Err(BackendError::Overflow);
        }
        let text = choice.message.content.unwrap_or_default();
        // A truncated generation must still carry partial text.
        if finish_reason == FinishReason::Length && text.is_empty() {
            return Err(BackendError::Transport(
                "length finish with empty content".into(),
            ));
        }
        let usage = wire
            .usage
            .map(|u| TokenUsage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(ChatResponse {
            text,
            finish_reason,
            usage,
            latency_ms,
            cached: false,
        })
    }
}
