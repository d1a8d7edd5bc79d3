//! Role-decomposed reasoning execution.
//!
//! Executes a compiled protocol as a sequence of backend calls. The
//! decomposed path runs perception, dynamics, and verification stages,
//! threading each stage's raw output verbatim into later prompts under
//! labeled delimiters; the expert path is a single compact verification
//! call. Transcripts record the full rendered prompt, raw output, and
//! backend metadata for every stage.

use std::collections::BTreeSet;
use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, RequestPolicy};
use crate::digest::sha256_hex;
use crate::evidence::EvidenceBlock;
use crate::router::{PathHint, ReasoningProtocol};

/// Reasoning stage identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageId {
    Perception,
    Dynamics,
    Verification,
    Expert,
}

impl StageId {
    /// Delimiter label under which this stage's output is embedded into
    /// later prompts.
    pub fn notes_label(&self) -> &'static str {
        match self {
            StageId::Perception => "PERCEPTION NOTES",
            StageId::Dynamics => "DYNAMICS NOTES",
            StageId::Verification => "VERIFICATION NOTES",
            StageId::Expert => "EXPERT NOTES",
        }
    }

    /// The canonical priors for each stage: perception and expert see none,
    /// dynamics sees perception, verification sees perception and dynamics.
    fn canonical_priors(&self) -> Vec<StageId> {
        match self {
            StageId::Perception | StageId::Expert => vec![],
            StageId::Dynamics => vec![StageId::Perception],
            StageId::Verification => vec![StageId::Perception, StageId::Dynamics],
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            StageId::Perception => "perception",
            StageId::Dynamics => "dynamics",
            StageId::Verification => "verification",
            StageId::Expert => "expert",
        };
        f.write_str(name)
    }
}

/// Template plus prior wiring for one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage_id: StageId,
    /// Placeholder template; see `docs/prompt_schema.md` for the placeholder
    /// inventory.
    pub instruction_template: String,
    /// Stages whose raw outputs are embedded verbatim into this prompt.
    pub include_priors: Vec<StageId>,
}

impl StageSpec {
    pub fn new(stage_id: StageId, instruction_template: String) -> Self {
        StageSpec {
            stage_id,
            instruction_template,
            include_priors: stage_id.canonical_priors(),
        }
    }
}

/// The shipped stage instruction templates, overridable from a directory of
/// `<stage>.txt` files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub perception: String,
    pub dynamics: String,
    pub verification: String,
    pub expert: String,
    /// Single-call template used when role decomposition is disabled.
    pub direct: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            perception: include_str!("../assets/templates/perception.txt").to_string(),
            dynamics: include_str!("../assets/templates/dynamics.txt").to_string(),
            verification: include_str!("../assets/templates/verification.txt").to_string(),
            expert: include_str!("../assets/templates/expert.txt").to_string(),
            direct: include_str!("../assets/templates/direct.txt").to_string(),
        }
    }
}

impl TemplateSet {
    pub fn load_dir(dir: &std::path::Path) -> std::io::Result<Self> {
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        Ok(TemplateSet {
            perception: read("perception.txt")?,
            dynamics: read("dynamics.txt")?,
            verification: read("verification.txt")?,
            expert: read("expert.txt")?,
            direct: read("direct.txt")?,
        })
    }
}

/// Backend call metadata recorded per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendMeta {
    pub model_id: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub retries: u32,
    pub cache_hit: bool,
}

/// Full record of one executed stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTranscript {
    pub stage_id: StageId,
    pub rendered_prompt: String,
    pub raw_output: String,
    pub backend_meta: BackendMeta,
    /// SHA-256 of the rendered prompt, for cache keying and replay checks.
    pub prompt_digest: String,
}

/// Which path was actually taken for a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathTaken {
    Decomposed,
    Expert,
}

/// Ordered stage transcripts for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub path_taken: PathTaken,
    pub transcripts: Vec<StageTranscript>,
}

impl ReasoningTrace {
    /// The final (verification-oriented) stage output.
    pub fn final_output(&self) -> &str {
        self.transcripts
            .last()
            .map(|t| t.raw_output.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error("stage {stage} requires prior {missing} which is absent")]
    MissingPrior { stage: StageId, missing: StageId },
    #[error("stage {stage} failed after {attempts} attempt(s): {cause}")]
    StageFailure {
        stage: StageId,
        attempts: u32,
        cause: BackendError,
    },
    #[error("template error in stage {stage}: {detail}")]
    Template { stage: StageId, detail: String },
}

/// A stage failure carrying every transcript completed before it.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct PartialTraceError {
    pub error: ReasoningError,
    pub completed: Vec<StageTranscript>,
    pub path_taken: PathTaken,
}

/// Retry policy for transient backend failures.
///
/// Up to `max_retries` retries with exponential backoff on transport and
/// rate-limit errors; malformed requests are never retried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            base_backoff_ms: 250,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32, error: &BackendError) -> Duration {
        let base = self.base_backoff_ms.saturating_mul(1 << attempt.min(16));
        let ms = match error {
            BackendError::RateLimited {
                retry_after: Some(secs),
            } => base.max(secs * 1000),
            _ => base,
        };
        Duration::from_millis(ms)
    }
}

/// Expand `{{placeholder}}` occurrences; unknown placeholders are errors so
/// template typos fail loudly instead of leaking braces into prompts.
pub fn render_template(template: &str, vars: &[(&str, &str)]) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            return Err("unterminated {{ placeholder".to_string());
        };
        let name = &after[..end];
        match vars.iter().find(|(k, _)| *k == name) {
            Some((_, value)) => out.push_str(value),
            None => return Err(format!("unknown placeholder {{{{{name}}}}}")),
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Static prompt context for one sample: everything except priors.
#[derive(Debug, Clone)]
pub struct StageContext {
    pub evidence: EvidenceBlock,
    pub question: String,
    pub options_block: String,
    /// Wrapped basis-grammar section, or empty when routing is disabled.
    pub basis_section: String,
    /// Wrapped evidence-boundary section, or empty when routing is disabled.
    pub boundary_section: String,
    /// Verification or plain answer-format instruction for final stages.
    pub verification_instruction: String,
}

impl StageContext {
    fn render(&self, spec: &StageSpec, priors: &[&StageTranscript]) -> Result<String, String> {
        let priors_block = render_priors(priors);
        let vars = [
            (
                "observation_rule",
                self.evidence.observation_rule_text.as_str(),
            ),
            ("evidence", self.evidence.text.as_str()),
            ("question", self.question.as_str()),
            ("options", self.options_block.as_str()),
            ("basis", self.basis_section.as_str()),
            ("evidence_boundary", self.boundary_section.as_str()),
            (
                "verification_instruction",
                self.verification_instruction.as_str(),
            ),
            ("priors", priors_block.as_str()),
        ];
        render_template(&spec.instruction_template, &vars)
    }
}

/// Prior outputs embedded verbatim under labeled delimiters.
fn render_priors(priors: &[&StageTranscript]) -> String {
    let mut out = String::new();
    for (i, prior) in priors.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let label = prior.stage_id.notes_label();
        out.push_str(&format!("{label}:\n{}\nEND {label}", prior.raw_output));
    }
    out
}

/// Wrap a basis grammar into its prompt section.
pub fn basis_section(grammar: &str) -> String {
    format!("DOMAIN GUIDANCE\n{grammar}\nEND DOMAIN GUIDANCE")
}

/// Wrap an evidence boundary into its prompt section.
pub fn boundary_section(evidence_boundary: &str) -> String {
    format!("EVIDENCE BOUNDARY\n{evidence_boundary}\nEND EVIDENCE BOUNDARY")
}

/// Apply the compile-time path decision.
pub fn select_reasoning_path(protocol: &ReasoningProtocol) -> PathTaken {
    match protocol.path_hint {
        PathHint::Decomposed => PathTaken::Decomposed,
        PathHint::Expert => PathTaken::Expert,
    }
}

/// Per-run execution knobs shared by every stage of one sample.
#[derive(Debug, Clone, Copy)]
pub struct RunParams<'a> {
    pub policy: &'a RequestPolicy,
    pub retry: &'a RetryPolicy,
    /// Use the high-resolution visual budget.
    pub high_res: bool,
    pub repetition_penalty: f64,
}

/// Execute one stage: render the prompt (embedding declared priors), call
/// the backend with retries, and record the transcript.
pub fn run_stage(
    backend: &dyn Backend,
    context: &StageContext,
    priors: &[StageTranscript],
    spec: &StageSpec,
    params: RunParams<'_>,
) -> Result<StageTranscript, ReasoningError> {
    let mut selected = Vec::with_capacity(spec.include_priors.len());
    for wanted in &spec.include_priors {
        match priors.iter().find(|t| t.stage_id == *wanted) {
            Some(t) => selected.push(t),
            None => {
                return Err(ReasoningError::MissingPrior {
                    stage: spec.stage_id,
                    missing: *wanted,
                })
            }
        }
    }

    let rendered_prompt =
        context
            .render(spec, &selected)
            .map_err(|detail| ReasoningError::Template {
                stage: spec.stage_id,
                detail,
            })?;
    let request = params
        .policy
        .build_request(
            &rendered_prompt,
            &context.evidence.frames,
            params.high_res,
            params.repetition_penalty,
        )
        .map_err(|cause| ReasoningError::StageFailure {
            stage: spec.stage_id,
            attempts: 0,
            cause,
        })?;

    let mut attempt: u32 = 0;
    let response = loop {
        match backend.complete(&request) {
            Ok(response) => break response,
            Err(error) if error.is_retryable() && attempt < params.retry.max_retries => {
                let pause = params.retry.backoff(attempt, &error);
                if !pause.is_zero() {
                    thread::sleep(pause);
                }
                attempt += 1;
            }
            Err(cause) => {
                return Err(ReasoningError::StageFailure {
                    stage: spec.stage_id,
                    attempts: attempt + 1,
                    cause,
                })
            }
        }
    };

    Ok(StageTranscript {
        stage_id: spec.stage_id,
        prompt_digest: sha256_hex(rendered_prompt.as_bytes()),
        rendered_prompt,
        raw_output: response.text,
        backend_meta: BackendMeta {
            model_id: request.model_id,
            prompt_tokens: response.usage.prompt_tokens,
            completion_tokens: response.usage.completion_tokens,
            latency_ms: response.latency_ms,
            retries: attempt,
            cache_hit: response.cached,
        },
    })
}

/// Execute the protocol's stages strictly in order, threading outputs.
///
/// On a stage failure the error carries every completed transcript so the
/// partial trace can be persisted for debugging.
pub fn run_reasoning(
    backend: &dyn Backend,
    context: &StageContext,
    protocol: &ReasoningProtocol,
    params: RunParams<'_>,
) -> Result<ReasoningTrace, PartialTraceError> {
    let path_taken = select_reasoning_path(protocol);
    run_stages(backend, context, &protocol.stage_specs, path_taken, params)
}

/// Shared stage loop used by both the routed protocol and the harness's
/// ablation substitutes.
pub fn run_stages(
    backend: &dyn Backend,
    context: &StageContext,
    specs: &[StageSpec],
    path_taken: PathTaken,
    params: RunParams<'_>,
) -> Result<ReasoningTrace, PartialTraceError> {
    let mut transcripts: Vec<StageTranscript> = Vec::with_capacity(specs.len());
    for spec in specs {
        match run_stage(backend, context, &transcripts, spec, params) {
            Ok(t) => transcripts.push(t),
            Err(error) => {
                return Err(PartialTraceError {
                    error,
                    completed: transcripts,
                    path_taken,
                })
            }
        }
    }
    debug_assert!(
        transcripts
            .iter()
            .map(|t| t.stage_id)
            .collect::<BTreeSet<_>>()
            .len()
            == transcripts.len(),
        "stage ids must be unique within a trace"
    );
    Ok(ReasoningTrace {
        path_taken,
        transcripts,
    })
}
