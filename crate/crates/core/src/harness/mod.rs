//! Pipeline orchestration and batch evaluation.
//!
//! [`Pipeline`] runs the full composition per sample — evidence
//! normalization, capability routing, staged reasoning, option verification,
//! answer calibration — honoring ablation toggles that substitute each
//! module's documented identity behavior (never skipping the sample).
//! [`Pipeline::run_batch`] executes samples with bounded concurrency,
//! persists one result and one trace document per sample, and resumes from
//! persisted results keyed by `(sample id, config digest)`.

pub mod report;

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, RequestPolicy};
use crate::calibrate::{calibrate_with, CalibrateOptions, Prediction, Tier};
use crate::digest::sha256_hex;
use crate::evidence::{segment_evidence, EvidenceBlock, ReliabilityRule};
use crate::reasoning::{
    basis_section, boundary_section, run_stages, PathTaken, RetryPolicy, StageContext, StageId,
    StageSpec, TemplateSet,
};
use crate::router::{compile_protocol, route, Capability, PathMatrix, Routing, RoutingRuleTable};
use crate::sample::{Domain, Label, Sample};
use crate::verify::{
    build_verification_instruction, parse_verification, plain_answer_instruction, select_candidate,
    VerificationOutcome,
};

/// Module toggles. Disabling a module substitutes its documented identity
/// behavior; the sample is always attempted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Off: frames passed as an unlabeled ordered list, no timestamps, no
    /// observation rule.
    pub enable_ten: bool,
    /// Off: fixed generic protocol; no basis grammar, no capability operator.
    pub enable_cor: bool,
    /// Off: a single direct-QA call replaces the staged paths.
    pub enable_rdr: bool,
    /// Off: the last stage output goes straight to calibration.
    pub enable_bov: bool,
    /// Off: only tier-1 structured parsing; unparseable counts as fallback.
    pub enable_dac_recovery: bool,
    /// On: industry samples use the high-resolution visual budget.
    pub high_res_industry: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            enable_ten: true,
            enable_cor: true,
            enable_rdr: true,
            enable_bov: true,
            enable_dac_recovery: true,
            high_res_industry: true,
        }
    }
}

impl AblationConfig {
    /// The everything-off direct baseline.
    pub fn baseline() -> Self {
        AblationConfig {
            enable_ten: false,
            enable_cor: false,
            enable_rdr: false,
            enable_bov: false,
            enable_dac_recovery: false,
            high_res_industry: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("parallelism must be at least 1")]
    InvalidParallelism,
    #[error("results dir: {0}")]
    Io(#[from] std::io::Error),
    #[error("result file {path}: {detail}")]
    Persist { path: PathBuf, detail: String },
}

/// Fully configured pipeline.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub ablation: AblationConfig,
    pub policy: RequestPolicy,
    pub rules: RoutingRuleTable,
    pub matrix: PathMatrix,
    pub templates: TemplateSet,
    pub reliability: ReliabilityRule,
    pub retry: RetryPolicy,
    pub calibrate: CalibrateOptions,
    pub max_per_segment: usize,
}

impl Default for Pipeline {
    fn default() -> Self {
        Pipeline {
            ablation: AblationConfig::default(),
            policy: RequestPolicy::default(),
            rules: RoutingRuleTable::default(),
            matrix: PathMatrix::default(),
            templates: TemplateSet::default(),
            reliability: ReliabilityRule::default(),
            retry: RetryPolicy::default(),
            calibrate: CalibrateOptions::default(),
            max_per_segment: 32,
        }
    }
}

/// Everything that affects a sample's processing, for resume keying.
#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    ablation: &'a AblationConfig,
    policy: &'a RequestPolicy,
    rules_digest: String,
    matrix_digest: String,
    templates_digest: String,
    reliability: &'a ReliabilityRule,
    calibrate: &'a CalibrateOptions,
    max_per_segment: usize,
}

/// Result of one sample run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub domain: Domain,
    /// Routed capability; absent when routing was disabled.
    pub capability: Option<Capability>,
    /// Absent only when the sample failed.
    pub predicted: Option<Prediction>,
    pub gold: Option<Label>,
    /// Present iff `gold` is present; a failed sample with gold counts as
    /// incorrect.
    pub correct: Option<bool>,
    /// Relative locator of the persisted trace document.
    pub trace_path: Option<String>,
    /// Sum of backend-reported latencies (deterministic for scripted runs).
    pub elapsed_ms: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub error: Option<String>,
}

/// One persisted trace document per sample (`docs/trace_schema.md`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDoc {
    pub sample_id: String,
    pub config_digest: String,
    pub routing: Option<Routing>,
    pub path_taken: Option<PathTaken>,
    pub transcripts: Vec<crate::reasoning::StageTranscript>,
    pub verification: Option<VerificationOutcome>,
    pub prediction: Option<Prediction>,
    pub error: Option<String>,
}

impl Pipeline {
    /// Digest over every processing-relevant setting; keys resumable results.
    pub fn config_digest(&self) -> String {
        let snapshot = ConfigSnapshot {
            ablation: &self.ablation,
            policy: &self.policy,
            rules_digest: sha256_hex(
                serde_json::to_string(&self.rules)
                    .expect("rules serialize")
                    .as_bytes(),
            ),
            matrix_digest: sha256_hex(
                serde_json::to_string(&self.matrix)
                    .expect("matrix serialize")
                    .as_bytes(),
            ),
            templates_digest: sha256_hex(
                serde_json::to_string(&self.templates)
                    .expect("templates serialize")
                    .as_bytes(),
            ),
            reliability: &self.reliability,
            calibrate: &self.calibrate,
            max_per_segment: self.max_per_segment,
        };
        let full = sha256_hex(
            serde_json::to_string(&snapshot)
                .expect("snapshot serializes")
                .as_bytes(),
        );
        full[..16].to_string()
    }

    /// Config snapshot embedded into reports.
    pub fn config_json(&self) -> serde_json::Value {
        serde_json::json!({
            "ablation": self.ablation,
            "policy": self.policy,
            "max_per_segment": self.max_per_segment,
            "calibrate": self.calibrate,
            "config_digest": self.config_digest(),
        })
    }

    /// Execute the full composition for one sample, honoring toggles.
    pub fn run_sample(&self, sample: &Sample, backend: &dyn Backend) -> (SampleResult, TraceDoc) {
        let ab = &self.ablation;
        let config_digest = self.config_digest();

        // Evidence normalization, or its identity substitute.
        let evidence_block = if ab.enable_ten {
            match segment_evidence(
                &sample.frames,
                &sample.metadata,
                self.max_per_segment,
                self.reliability.clone(),
            ) {
                Ok(evidence) => EvidenceBlock::from_evidence(&evidence),
                Err(e) => {
                    return self.failed_result(
                        sample,
                        &config_digest,
                        None,
                        None,
                        vec![],
                        format!("evidence: {e}"),
                    )
                }
            }
        } else {
            EvidenceBlock::plain(&sample.frames)
        };

        // Capability routing, or the fixed generic protocol.
        let routing = ab.enable_cor.then(|| {
            route(
                &sample.question,
                &sample.options,
                &sample.metadata,
                &self.rules,
            )
        });
        let protocol = routing.as_ref().map(|r| {
            compile_protocol(
                r.capability,
                &r.basis,
                &sample.question,
                &sample.options,
                &self.matrix,
                &self.templates,
            )
        });

        // Stage plan: routed paths, collapsed to one direct call when role
        // decomposition is off.
        let (specs, path_taken): (Vec<StageSpec>, PathTaken) = match (&protocol, ab.enable_rdr) {
            (Some(p), true) => (
                p.stage_specs.clone(),
                match p.path_hint {
                    crate::router::PathHint::Decomposed => PathTaken::Decomposed,
                    crate::router::PathHint::Expert => PathTaken::Expert,
                },
            ),
            (Some(_), false) | (None, false) => (
                vec![StageSpec::new(
                    StageId::Expert,
                    self.templates.direct.clone(),
                )],
                PathTaken::Expert,
            ),
            (None, true) => (
                vec![
                    StageSpec::new(StageId::Perception, self.templates.perception.clone()),
                    StageSpec::new(StageId::Dynamics, self.templates.dynamics.clone()),
                    StageSpec::new(StageId::Verification, self.templates.verification.clone()),
                ],
                PathTaken::Decomposed,
            ),
        };

        let verification_instruction = if ab.enable_bov {
            match &protocol {
                Some(p) => build_verification_instruction(p, &sample.options),
                None => generic_verification_instruction(&sample.options),
            }
        } else {
            plain_answer_instruction()
        };

        let context = StageContext {
            evidence: evidence_block,
            question: sample.question.clone(),
            options_block: sample.options.render_block(),
            basis_section: protocol
                .as_ref()
                .map(|p| basis_section(&p.basis.grammar))
                .unwrap_or_default(),
            boundary_section: protocol
                .as_ref()
                .map(|p| boundary_section(&p.operator.evidence_boundary))
                .unwrap_or_default(),
            verification_instruction,
        };

        let high_res = ab.high_res_industry && sample.metadata.domain == Domain::Industry;
        let penalty = self
            .policy
            .penalty_for_domain(sample.metadata.domain.wire_name());

        let trace = match run_stages(
            backend,
            &context,
            &specs,
            path_taken,
            crate::reasoning::RunParams {
                policy: &self.policy,
                retry: &self.retry,
                high_res,
                repetition_penalty: penalty,
            },
        ) {
            Ok(trace) => trace,
            Err(partial) => {
                return self.failed_result(
                    sample,
                    &config_digest,
                    routing,
                    Some(partial.path_taken),
                    partial.completed,
                    partial.error.to_string(),
                )
            }
        };

        // Option verification, then calibration.
        let raw_final = trace.final_output().to_string();
        let calibrate_opts = CalibrateOptions {
            fallback_label: self.calibrate.fallback_label,
            mention_recovery: self.calibrate.mention_recovery && ab.enable_dac_recovery,
        };
        let (verification, prediction) = if ab.enable_bov {
            match parse_verification(&raw_final) {
                Ok(records) => {
                    let outcome = select_candidate(&records);
                    let prediction = prediction_from_verification(&outcome, &raw_final);
                    (Some(outcome), prediction)
                }
                // Incomplete verification output: calibrate the raw text.
                Err(_) => (
                    None,
                    calibrate_with(&raw_final, &sample.options, &calibrate_opts),
                ),
            }
        } else {
            (
                None,
                calibrate_with(&raw_final, &sample.options, &calibrate_opts),
            )
        };

        let correct = sample.gold_label.map(|gold| gold == prediction.label);
        let result = SampleResult {
            sample_id: sample.id.clone(),
            domain: sample.metadata.domain,
            capability: routing.as_ref().map(|r| r.capability),
            predicted: Some(prediction.clone()),
            gold: sample.gold_label,
            correct,
            trace_path: None,
            elapsed_ms: trace
                .transcripts
                .iter()
                .map(|t| t.backend_meta.latency_ms)
                .sum(),
            prompt_tokens: trace
                .transcripts
                .iter()
                .map(|t| t.backend_meta.prompt_tokens)
                .sum(),
            completion_tokens: trace
                .transcripts
                .iter()
                .map(|t| t.backend_meta.completion_tokens)
                .sum(),
            error: None,
        };
        let doc = TraceDoc {
            sample_id: sample.id.clone(),
            config_digest,
            routing,
            path_taken: Some(trace.path_taken),
            transcripts: trace.transcripts,
            verification,
            prediction: Some(prediction),
            error: None,
        };
        (result, doc)
    }

    fn failed_result(
        &self,
        sample: &Sample,
        config_digest: &str,
        routing: Option<Routing>,
        path_taken: Option<PathTaken>,
        completed: Vec<crate::reasoning::StageTranscript>,
        error: String,
    ) -> (SampleResult, TraceDoc) {
        let result = SampleResult {
            sample_id: sample.id.clone(),
            domain: sample.metadata.domain,
            capability: routing.as_ref().map(|r| r.capability),
            predicted: None,
            gold: sample.gold_label,
            correct: sample.gold_label.map(|_| false),
            trace_path: None,
            elapsed_ms: completed.iter().map(|t| t.backend_meta.latency_ms).sum(),
            prompt_tokens: completed.iter().map(|t| t.backend_meta.prompt_tokens).sum(),
            completion_tokens: completed
                .iter()
                .map(|t| t.backend_meta.completion_tokens)
                .sum(),
            error: Some(error.clone()),
        };
        let doc = TraceDoc {
            sample_id: sample.id.clone(),
            config_digest: config_digest.to_string(),
            routing,
            path_taken,
            transcripts: completed,
            verification: None,
            prediction: None,
            error: Some(error),
        };
        (result, doc)
    }

    /// Run all samples with at most `parallelism` in flight.
    ///
    /// Output order equals input order. With a results directory, completed
    /// samples are served from their persisted results and never re-executed.
    pub fn run_batch(
        &self,
        samples: &[Sample],
        backend: &dyn Backend,
        parallelism: usize,
        out_dir: Option<&Path>,
    ) -> Result<Vec<SampleResult>, HarnessError> {
        if parallelism < 1 {
            return Err(HarnessError::InvalidParallelism);
        }
        let store = out_dir.map(ResultStore::open).transpose()?;
        let config_digest = self.config_digest();

        let queue: Mutex<VecDeque<usize>> = Mutex::new((0..samples.len()).collect());
        let slots: Vec<Mutex<Option<SampleResult>>> =
            samples.iter().map(|_| Mutex::new(None)).collect();
        let failure: Mutex<Option<HarnessError>> = Mutex::new(None);

        let worker = || loop {
            let idx = match queue.lock().expect("queue lock").pop_front() {
                Some(idx) => idx,
                None => return,
            };
            let sample = &samples[idx];
            let result = match &store {
                Some(store) => match store.load(&sample.id, &config_digest) {
                    Some(cached) => cached,
                    None => {
                        let (mut result, doc) = self.run_sample(sample, backend);
                        match store.persist(&mut result, &doc, &config_digest) {
                            Ok(()) => result,
                            Err(e) => {
                                *failure.lock().expect("failure lock") = Some(e);
                                return;
                            }
                        }
                    }
                },
                None => self.run_sample(sample, backend).0,
            };
            *slots[idx].lock().expect("slot lock") = Some(result);
        };

        std::thread::scope(|scope| {
            for _ in 0..parallelism.min(samples.len().max(1)) {
                scope.spawn(worker);
            }
        });

        if let Some(error) = failure.into_inner().expect("failure lock") {
            return Err(error);
        }
        Ok(slots
            .into_iter()
            .map(|slot| {
                slot.into_inner()
                    .expect("slot lock")
                    .expect("every slot filled")
            })
            .collect())
    }
}

/// A BOV success realizes the chosen hypothesis as the prediction; the span
/// points at the chosen option's block header in the raw output.
fn prediction_from_verification(outcome: &VerificationOutcome, raw_final: &str) -> Prediction {
    let header = format!("OPTION {}", outcome.chosen.as_str());
    let span = raw_final
        .find(&header)
        .map(|start| (start, start + header.len()));
    Prediction {
        label: outcome.chosen,
        tier: Tier::Structured,
        source_span: span.or(Some((0, 0))),
        raw_digest: sha256_hex(raw_final.as_bytes()),
    }
}

/// Verification instruction for the generic (unrouted) protocol: the same
/// per-option block demand without a capability rule.
fn generic_verification_instruction(options: &crate::sample::OptionSet) -> String {
    let labels: Vec<&str> = options.iter().map(|(l, _)| l.as_str()).collect();
    format!(
        "OPTION VERIFICATION\n\
         Treat each option as a hypothesis and test it against the recorded evidence.\n\
         For every option check:\n\
         - SUPPORT: is the option directly supported by cited visual evidence?\n\
         - GRANULARITY: does the option match the semantic granularity the question asks for?\n\
         - TEMPORAL: is the option compatible with the timestamps of the observed events?\n\
         - CONTRADICTION: is the option contradicted by any observed evidence?\n\
         An option passes only if SUPPORT, GRANULARITY and TEMPORAL are yes and CONTRADICTION is no.\n\
         If several options pass, prefer the one with the strongest direct evidence (most cited \
         timestamps) and the fewest unsupported assumptions.\n\
         \n\
         VERIFICATION FORMAT ({version})\n\
         Emit exactly one block per option, for labels {labels}, in order:\n\
         OPTION <label>:\n\
         SUPPORT: yes|no\n\
         GRANULARITY: yes|no\n\
         TEMPORAL: yes|no\n\
         CONTRADICTION: yes|no\n\
         CITED_TIMESTAMPS: semicolon-separated timestamps like t=3.50 s, or none\n\
         ASSUMPTIONS: semicolon-separated unsupported assumptions, or none\n\
         RATIONALE: one line\n\
         After the four blocks, end your reply with a line: FINAL ANSWER: <label>",
        version = crate::verify::VERIFICATION_GRAMMAR_VERSION,
        labels = labels.join(", "),
    )
}

/// Per-sample result and trace persistence.
///
/// Layout: `<dir>/results/<key>.json` and `<dir>/traces/<key>.json` with
/// `key = <sanitized-id>-<id-digest8>.<config-digest16>`.
struct ResultStore {
    results: PathBuf,
    traces: PathBuf,
}

impl ResultStore {
    fn open(dir: &Path) -> Result<Self, HarnessError> {
        let results = dir.join("results");
        let traces = dir.join("traces");
        fs::create_dir_all(&results)?;
        fs::create_dir_all(&traces)?;
        Ok(ResultStore { results, traces })
    }

    fn key(sample_id: &str, config_digest: &str) -> String {
        let sanitized: String = sample_id
            .chars()
            .take(48)
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        let id_digest = &sha256_hex(sample_id.as_bytes())[..8];
        format!("{sanitized}-{id_digest}.{config_digest}")
    }

    fn load(&self, sample_id: &str, config_digest: &str) -> Option<SampleResult> {
        let path = self
            .results
            .join(format!("{}.json", Self::key(sample_id, config_digest)));
        let bytes = fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn persist(
        &self,
        result: &mut SampleResult,
        doc: &TraceDoc,
        config_digest: &str,
    ) -> Result<(), HarnessError> {
        let key = Self::key(&result.sample_id, config_digest);
        let trace_rel = format!("traces/{key}.json");
        result.trace_path = Some(trace_rel.clone());

        write_atomic(
            &self.traces.join(format!("{key}.json")),
            &serde_json::to_vec_pretty(doc).expect("trace doc serializes"),
        )?;
        write_atomic(
            &self.results.join(format!("{key}.json")),
            &serde_json::to_vec_pretty(result).expect("result serializes"),
        )?;
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let parent = path.parent().expect("persist path has a parent");
    let tmp = parent.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("entry")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ScriptedBackend, ScriptedReply};
    use crate::sample::{FrameRef, OptionSet};

    /// Routes to counting in industry: expert path, one backend call.
    fn expert_sample(gold: Option<Label>) -> Sample {
        Sample {
            id: "exp1".into(),
            frames: (0..3)
                .map(|i| FrameRef {
                    uri: format!("f{i}.jpg"),
                    index: i,
                    width: None,
                    height: None,
                })
                .collect(),
            question: "How many screws are on the tray?".into(),
            options: OptionSet::new(["two".into(), "three".into(), "four".into(), "five".into()])
                .unwrap(),
            metadata: crate::sample::SampleMetadata {
                domain: Domain::Industry,
                sampling_rate: crate::rat::Rat::integer(2),
                sequence_offset: 0,
                sample_id: "exp1".into(),
            },
            gold_label: gold,
        }
    }

    fn verification_reply(winner: Label) -> String {
        let mut out = String::new();
        for label in Label::ALL {
            let passes = label == winner;
            out.push_str(&format!(
                "OPTION {label}:\nSUPPORT: {0}\nGRANULARITY: yes\nTEMPORAL: {0}\nCONTRADICTION: {1}\n\
                 CITED_TIMESTAMPS: {2}\nASSUMPTIONS: none\nRATIONALE: scripted\n",
                if passes { "yes" } else { "no" },
                if passes { "no" } else { "yes" },
                if passes { "t=0.50 s" } else { "none" },
            ));
        }
        out.push_str(&format!("FINAL ANSWER: {winner}"));
        out
    }

    fn fast_pipeline(ablation: AblationConfig) -> Pipeline {
        Pipeline {
            ablation,
            retry: RetryPolicy {
                max_retries: 2,
                base_backoff_ms: 0,
            },
            ..Pipeline::default()
        }
    }

    #[test]
    fn verification_reply_drives_structured_prediction() {
        let pipeline = fast_pipeline(AblationConfig::default());
        let sample = expert_sample(Some(Label::B));
        let backend = ScriptedBackend::ordered_texts(vec![verification_reply(Label::B)]);
        let (result, doc) = pipeline.run_sample(&sample, &backend);
        let predicted = result.predicted.unwrap();
        assert_eq!(predicted.label, Label::B);
        assert_eq!(predicted.tier, Tier::Structured);
        assert_eq!(result.correct, Some(true));
        assert_eq!(result.capability, Some(Capability::Counting));
        let verification = doc.verification.unwrap();
        assert_eq!(verification.chosen, Label::B);
        assert_eq!(doc.transcripts.len(), 1, "expert path is a single call");
    }

    #[test]
    fn baseline_with_recovery_off_counts_fallback() {
        let pipeline = fast_pipeline(AblationConfig::baseline());
        let sample = expert_sample(Some(Label::C));
        let backend = ScriptedBackend::ordered_texts(vec!["I think (C)"]);
        let (result, _) = pipeline.run_sample(&sample, &backend);
        let predicted = result.predicted.unwrap();
        assert_eq!(predicted.tier, Tier::Fallback);
        assert_eq!(predicted.label, Label::A, "configured fallback label");
        assert_eq!(result.correct, Some(false));
        assert_eq!(backend.calls(), 1, "baseline is one direct call");
    }

    #[test]
    fn gold_match_sets_correct() {
        let pipeline = fast_pipeline(AblationConfig::default());
        let sample = expert_sample(Some(Label::B));
        let backend = ScriptedBackend::ordered_texts(vec![verification_reply(Label::B)]);
        let (result, _) = pipeline.run_sample(&sample, &backend);
        assert_eq!(result.correct, Some(true));

        let sample = expert_sample(None);
        let backend = ScriptedBackend::ordered_texts(vec![verification_reply(Label::B)]);
        let (result, _) = pipeline.run_sample(&sample, &backend);
        assert_eq!(result.correct, None, "no gold, no correctness");
        assert!(result.predicted.is_some(), "prediction still emitted");
    }

    #[test]
    fn incomplete_verification_falls_back_to_calibration() {
        let pipeline = fast_pipeline(AblationConfig::default());
        let sample = expert_sample(Some(Label::D));
        // Only two blocks, then a prose commitment.
        let reply = "OPTION A:\nSUPPORT: no\nGRANULARITY: no\nTEMPORAL: no\nCONTRADICTION: yes\n\
                     OPTION B:\nSUPPORT: no\nGRANULARITY: no\nTEMPORAL: no\nCONTRADICTION: yes\n\
                     overall the best choice is option (D).";
        let backend = ScriptedBackend::ordered_texts(vec![reply]);
        let (result, doc) = pipeline.run_sample(&sample, &backend);
        assert!(doc.verification.is_none());
        let predicted = result.predicted.unwrap();
        assert_eq!(predicted.label, Label::D);
        assert_eq!(predicted.tier, Tier::RecoveredMention);
    }

    #[test]
    fn stage_failure_records_error_and_partial_trace() {
        let pipeline = fast_pipeline(AblationConfig::default());
        let sample = expert_sample(Some(Label::A));
        let backend = ScriptedBackend::ordered(vec![
            ScriptedReply::Transport("boom".into()),
            ScriptedReply::Transport("boom".into()),
            ScriptedReply::Transport("boom".into()),
        ]);
        let (result, doc) = pipeline.run_sample(&sample, &backend);
        assert!(result.predicted.is_none());
        assert_eq!(
            result.correct,
            Some(false),
            "failed sample with gold counts as incorrect"
        );
        assert!(result.error.as_deref().unwrap_or("").contains("expert"));
        assert!(doc.transcripts.is_empty());
        assert_eq!(backend.calls(), 3, "initial try plus two retries");
    }

    #[test]
    fn batch_preserves_input_order_under_concurrency() {
        let pipeline = fast_pipeline(AblationConfig::default());
        let samples: Vec<Sample> = (0..6)
            .map(|i| {
                let mut s = expert_sample(Some(Label::B));
                s.id = format!("s{i}");
                s.metadata.sample_id = s.id.clone();
                s
            })
            .collect();
        let backend = ScriptedBackend::with_responder(|_| {
            ScriptedReply::Text(super::tests::verification_reply(Label::B))
        });
        let results = pipeline.run_batch(&samples, &backend, 2, None).unwrap();
        let ids: Vec<&str> = results.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, vec!["s0", "s1", "s2", "s3", "s4", "s5"]);
        assert!(results.iter().all(|r| r.correct == Some(true)));
    }

    #[test]
    fn zero_parallelism_is_rejected() {
        let pipeline = fast_pipeline(AblationConfig::default());
        let backend = ScriptedBackend::ordered_texts(Vec::<String>::new());
        let err = pipeline.run_batch(&[], &backend, 0, None).unwrap_err();
        assert!(matches!(err, HarnessError::InvalidParallelism));
    }

    #[test]
    fn config_digest_tracks_every_knob() {
        let base = fast_pipeline(AblationConfig::default());
        let mut toggled = base.clone();
        toggled.ablation.enable_bov = false;
        let mut resized = base.clone();
        resized.max_per_segment = 8;
        let mut remodeled = base.clone();
        remodeled.policy.model_id = "other-model".into();
        let digests = [
            base.config_digest(),
            toggled.config_digest(),
            resized.config_digest(),
            remodeled.config_digest(),
        ];
        for i in 0..digests.len() {
            for j in (i + 1)..digests.len() {
                assert_ne!(digests[i], digests[j]);
            }
        }
        assert_eq!(
            base.config_digest(),
            fast_pipeline(AblationConfig::default()).config_digest()
        );
    }

    #[test]
    fn ten_off_strips_timestamps_and_rule() {
        let ablation = AblationConfig {
            enable_ten: false,
            ..AblationConfig::default()
        };
        let pipeline = fast_pipeline(ablation);
        let sample = expert_sample(Some(Label::B));
        let backend = ScriptedBackend::ordered_texts(vec![verification_reply(Label::B)]);
        let (_, doc) = pipeline.run_sample(&sample, &backend);
        let prompt = &doc.transcripts[0].rendered_prompt;
        assert!(
            !prompt.contains("[t="),
            "no timestamped frame lines when normalization is off"
        );
        assert!(!prompt.contains("OBSERVATION RULE"));
        assert!(!prompt.contains("EVIDENCE FRAMES"));
        assert!(prompt.contains("FRAMES\nframe 0: f0.jpg"));
    }

    #[test]
    fn cor_off_strips_basis_and_operator() {
        let ablation = AblationConfig {
            enable_cor: false,
            ..AblationConfig::default()
        };
        let pipeline = fast_pipeline(ablation);
        let sample = expert_sample(Some(Label::B));
        // Routing is off, role decomposition is on: three-stage generic path.
        let backend = ScriptedBackend::ordered_texts(vec![
            "notes".to_string(),
            "dynamics".to_string(),
            verification_reply(Label::B),
        ]);
        let (result, doc) = pipeline.run_sample(&sample, &backend);
        assert_eq!(result.capability, None);
        assert_eq!(doc.transcripts.len(), 3);
        for t in &doc.transcripts {
            assert!(!t.rendered_prompt.contains("DOMAIN GUIDANCE"));
            assert!(!t.rendered_prompt.contains("EVIDENCE BOUNDARY"));
        }
        assert_eq!(result.predicted.unwrap().label, Label::B);
    }
}
