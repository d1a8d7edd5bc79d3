//! Capability-oriented routing.
//!
//! Grounds each sample into a capability (what skill the question tests) and
//! a domain semantic basis (which visual grammar interprets the evidence),
//! then compiles the reasoning protocol: the capability operator's evidence
//! boundary and verification rule, a reasoning-path hint, and the ordered
//! stage specs.
//!
//! Capability grounding is a first-match ordered keyword rule table, shipped
//! as an editable JSON config (see `assets/routing_rules.json` and
//! `docs/config_schema.md`). The reasoning-path choice per capability and
//! domain is likewise a shipped JSON matrix.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reasoning::{StageId, StageSpec, TemplateSet};
use crate::sample::{Domain, OptionSet, SampleMetadata};

/// The abstract skill a question tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Identification,
    Counting,
    SpatialLocalization,
    TemporalLocalization,
    Prediction,
    NotVisible,
}

impl Capability {
    pub const ALL: [Capability; 6] = [
        Capability::Identification,
        Capability::Counting,
        Capability::SpatialLocalization,
        Capability::TemporalLocalization,
        Capability::Prediction,
        Capability::NotVisible,
    ];

    pub fn wire_name(&self) -> &'static str {
        match self {
            Capability::Identification => "identification",
            Capability::Counting => "counting",
            Capability::SpatialLocalization => "spatial_localization",
            Capability::TemporalLocalization => "temporal_localization",
            Capability::Prediction => "prediction",
            Capability::NotVisible => "not_visible",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

/// Domain-specific visual grammar plugged into the shared protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticBasis {
    pub domain: Domain,
    pub grammar: String,
}

/// The shipped basis for a domain, keyed 1:1.
pub fn semantic_basis(domain: Domain) -> SemanticBasis {
    let grammar = match domain {
        Domain::Surgery => {
            "Tool-centric reasoning: identify instruments by their working tips, track \
             tool-tissue contact, and treat tool state changes as phase boundaries."
        }
        Domain::Industry => {
            "Object-centric procedural reasoning: identify parts and fixtures, respect \
             controlled grouping rules, and read hand-object interactions as procedure steps."
        }
        Domain::Xsports => {
            "Physics-centric embodied reasoning: read body orientation, horizon changes, \
             and trajectories; treat momentum and contact as the primary cues."
        }
        Domain::Animal => {
            "Self-other behavioral reasoning: distinguish the camera-wearing animal from \
             other agents and read interactions as behavior exchanged between self and other."
        }
    };
    SemanticBasis {
        domain,
        grammar: grammar.to_string(),
    }
}

/// Per-capability evidence boundary and verification rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityOperator {
    pub capability: Capability,
    /// What counts as decisive evidence for this capability.
    pub evidence_boundary: String,
    /// How options are checked against that evidence.
    pub verification_rule: String,
}

fn operator(capability: Capability, boundary: &str, rule: &str) -> CapabilityOperator {
    CapabilityOperator {
        capability,
        evidence_boundary: boundary.to_string(),
        verification_rule: rule.to_string(),
    }
}

/// The shipped operator table: exactly one entry per capability.
pub fn operator_table() -> BTreeMap<Capability, CapabilityOperator> {
    let entries = [
        operator(
            Capability::Identification,
            "Decisive evidence is the set of visible attributes of the candidate: shape, \
             color, markings, and how it is held or used.",
            "Eliminate mismatch: reject any option whose attributes conflict with the \
             observed target.",
        ),
        operator(
            Capability::Counting,
            "Decisive evidence is the set of stable instances: count only instances that \
             persist across stable frames.",
            "Obey granularity: count at exactly the granularity the question names, \
             neither merging nor splitting instances.",
        ),
        operator(
            Capability::SpatialLocalization,
            "Decisive evidence is the target-anchor pair: locate the target and the named \
             anchor together in the same frame.",
            "Match relation: accept an option only if the stated spatial relation holds \
             between the target-anchor pair.",
        ),
        operator(
            Capability::TemporalLocalization,
            "Decisive evidence is the state transition: the frames where the queried \
             state switches between inactive and active.",
            "Closest timestamp: accept the option whose time aligns with the \
             inactive-active boundary, preferring the closest timestamp to the observed \
             transition.",
        ),
        operator(
            Capability::Prediction,
            "Decisive evidence is the final trajectory: the last observed motion and its \
             direction of change.",
            "Next-state consistency: accept the option that agrees with the final \
             observed trajectory.",
        ),
        operator(
            Capability::NotVisible,
            "Decisive evidence is full-frame coverage: scan every frame in full, \
             including edges and partially occluded regions.",
            "Complete absence: accept a not-visible option only after confirming complete \
             absence of the target across the entire evidence set.",
        ),
    ];
    entries.into_iter().map(|op| (op.capability, op)).collect()
}

/// One first-match routing rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingRule {
    pub id: String,
    pub capability: Capability,
    /// Case-insensitive keyword and phrase matchers, word-boundary aware.
    pub keywords: Vec<String>,
    /// Also scan the four option texts, not just the question.
    #[serde(default)]
    pub match_options: bool,
    /// Restrict the rule to one domain; `None` applies everywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

/// Ordered rule table; evaluation is strict first-match with a total default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingRuleTable {
    pub default_capability: Capability,
    pub rules: Vec<RoutingRule>,
}

#[derive(Debug, Error)]
pub enum RouterConfigError {
    #[error("routing rule table failed to parse: {0}")]
    Rules(serde_json::Error),
    #[error("path matrix failed to parse: {0}")]
    Matrix(serde_json::Error),
    #[error("path matrix is missing the ({0}, {1}) cell")]
    MissingCell(Capability, Domain),
}

const DEFAULT_RULES_JSON: &str = include_str!("../assets/routing_rules.json");
const DEFAULT_MATRIX_JSON: &str = include_str!("../assets/path_matrix.json");

impl RoutingRuleTable {
    pub fn from_json(json: &str) -> Result<Self, RouterConfigError> {
        serde_json::from_str(json).map_err(RouterConfigError::Rules)
    }
}

impl Default for RoutingRuleTable {
    fn default() -> Self {
        Self::from_json(DEFAULT_RULES_JSON).expect("shipped rule table parses")
    }
}

/// Which reasoning path the protocol takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathHint {
    /// Three-stage perception, dynamics, verification decomposition.
    Decomposed,
    /// Single compact expert verification call.
    Expert,
}

/// Full capability x domain path assignment, shipped as editable config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PathMatrix {
    cells: BTreeMap<Capability, BTreeMap<Domain, PathHint>>,
}

impl PathMatrix {
    pub fn from_json(json: &str) -> Result<Self, RouterConfigError> {
        let matrix: PathMatrix = serde_json::from_str(json).map_err(RouterConfigError::Matrix)?;
        for capability in Capability::ALL {
            for domain in Domain::ALL {
                if matrix
                    .cells
                    .get(&capability)
                    .and_then(|row| row.get(&domain))
                    .is_none()
                {
                    return Err(RouterConfigError::MissingCell(capability, domain));
                }
            }
        }
        Ok(matrix)
    }

    pub fn path(&self, capability: Capability, domain: Domain) -> PathHint {
        self.cells[&capability][&domain]
    }
}

impl Default for PathMatrix {
    fn default() -> Self {
        Self::from_json(DEFAULT_MATRIX_JSON).expect("shipped path matrix parses")
    }
}

/// The routing decision for one sample, with the matched rule recorded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Routing {
    pub capability: Capability,
    pub basis: SemanticBasis,
    /// Id of the first-matching rule, or `"default"`.
    pub matched_rule: String,
}

/// True when `needle` occurs in `haystack` at word boundaries.
///
/// Both inputs must already be lowercase. Boundaries are non-alphanumeric
/// neighbors, so `"where"` does not match inside `"somewhere"`.
fn keyword_match(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let hay = haystack.as_bytes();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let left_ok = start == 0 || !hay[start - 1].is_ascii_alphanumeric();
        let right_ok = end == hay.len() || !hay[end].is_ascii_alphanumeric();
        if left_ok && right_ok {
            return true;
        }
        from = start + 1;
    }
    false
}

/// Ground a sample into (capability, semantic basis) by first-match rules.
///
/// Total and deterministic: the default capability guarantees a result for
/// every input, and the matched rule id is recorded for the trace.
pub fn route(
    question: &str,
    options: &OptionSet,
    metadata: &SampleMetadata,
    rules: &RoutingRuleTable,
) -> Routing {
    let question_lower = question.to_lowercase();
    let options_lower: Vec<String> = options.iter().map(|(_, t)| t.to_lowercase()).collect();

    for rule in &rules.rules {
        if let Some(required) = rule.domain {
            if required != metadata.domain {
                continue;
            }
        }
        let hit = rule.keywords.iter().any(|kw| {
            let kw = kw.to_lowercase();
            keyword_match(&question_lower, &kw)
                || (rule.match_options && options_lower.iter().any(|o| keyword_match(o, &kw)))
        });
        if hit {
            return Routing {
                capability: rule.capability,
                basis: semantic_basis(metadata.domain),
                matched_rule: rule.id.clone(),
            };
        }
    }
    Routing {
        capability: rules.default_capability,
        basis: semantic_basis(metadata.domain),
        matched_rule: "default".to_string(),
    }
}

/// Compiled prompt program for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningProtocol {
    pub capability: Capability,
    pub basis: SemanticBasis,
    pub operator: CapabilityOperator,
    pub path_hint: PathHint,
    /// Ordered stage specs; the last stage is always verification-oriented.
    pub stage_specs: Vec<StageSpec>,
}

/// Compile the reasoning protocol for a routed sample.
///
/// The protocol embeds the capability operator and basis grammar verbatim and
/// fixes the stage sequence from the path matrix. `question` and `options`
/// are part of the grounding interface; the shipped compiler specializes on
/// (capability, basis) only, leaving per-sample text to stage rendering.
pub fn compile_protocol(
    capability: Capability,
    basis: &SemanticBasis,
    _question: &str,
    _options: &OptionSet,
    matrix: &PathMatrix,
    templates: &TemplateSet,
) -> ReasoningProtocol {
    let operator = operator_table()
        .remove(&capability)
        .expect("operator table covers every capability");
    let path_hint = matrix.path(capability, basis.domain);
    let stage_specs = match path_hint {
        PathHint::Decomposed => vec![
            StageSpec::new(StageId::Perception, templates.perception.clone()),
            StageSpec::new(StageId::Dynamics, templates.dynamics.clone()),
            StageSpec::new(StageId::Verification, templates.verification.clone()),
        ],
        PathHint::Expert => vec![StageSpec::new(StageId::Expert, templates.expert.clone())],
    };
    ReasoningProtocol {
        capability,
        basis: basis.clone(),
        operator,
        path_hint,
        stage_specs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rat::Rat;
    use proptest::prelude::*;

    fn meta(domain: Domain) -> SampleMetadata {
        SampleMetadata {
            domain,
            sampling_rate: Rat::integer(1),
            sequence_offset: 0,
            sample_id: "t".into(),
        }
    }

    fn plain_options() -> OptionSet {
        OptionSet::new([
            "forceps".into(),
            "scissors".into(),
            "clamp".into(),
            "needle driver".into(),
        ])
        .unwrap()
    }

    #[test]
    fn identification_question_routes_to_default() {
        let routing = route(
            "Which instrument is the surgeon holding?",
            &plain_options(),
            &meta(Domain::Surgery),
            &RoutingRuleTable::default(),
        );
        assert_eq!(routing.capability, Capability::Identification);
        assert_eq!(routing.basis.domain, Domain::Surgery);
        assert_eq!(routing.matched_rule, "default");
    }

    #[test]
    fn how_many_routes_to_counting() {
        let routing = route(
            "How many screws are on the tray?",
            &plain_options(),
            &meta(Domain::Industry),
            &RoutingRuleTable::default(),
        );
        assert_eq!(routing.capability, Capability::Counting);
        assert_eq!(routing.basis.domain, Domain::Industry);
        assert_eq!(routing.matched_rule, "counting-keywords");
    }

    #[test]
    fn unmatched_question_falls_to_default() {
        let routing = route(
            "zzz qqq xxx",
            &plain_options(),
            &meta(Domain::Xsports),
            &RoutingRuleTable::default(),
        );
        assert_eq!(routing.capability, Capability::Identification);
        assert_eq!(routing.basis.domain, Domain::Xsports);
    }

    #[test]
    fn not_visible_matches_in_option_texts() {
        let options = OptionSet::new([
            "on the bench".into(),
            "in the gripper".into(),
            "not visible".into(),
            "on the conveyor".into(),
        ])
        .unwrap();
        let routing = route(
            "Which statement describes the wrench?",
            &options,
            &meta(Domain::Industry),
            &RoutingRuleTable::default(),
        );
        assert_eq!(routing.capability, Capability::NotVisible);
    }

    #[test]
    fn keyword_matching_respects_word_boundaries() {
        assert!(keyword_match("when does it start", "when"));
        assert!(!keyword_match("somewhere out there", "where"));
        assert!(keyword_match("the item next to the tray", "next to"));
        assert!(!keyword_match("answered", "red"));
    }

    #[test]
    fn operator_table_has_exactly_six_rows() {
        let table = operator_table();
        assert_eq!(table.len(), 6);
        let pinned = [
            (
                Capability::Identification,
                "attributes",
                "eliminate mismatch",
            ),
            (Capability::Counting, "stable instances", "obey granularity"),
            (
                Capability::SpatialLocalization,
                "target-anchor pair",
                "match relation",
            ),
            (
                Capability::TemporalLocalization,
                "state transition",
                "closest timestamp",
            ),
            (
                Capability::Prediction,
                "final trajectory",
                "next-state consistency",
            ),
            (
                Capability::NotVisible,
                "full-frame coverage",
                "complete absence",
            ),
        ];
        for (capability, boundary_phrase, rule_phrase) in pinned {
            let op = &table[&capability];
            assert!(
                op.evidence_boundary
                    .to_lowercase()
                    .contains(boundary_phrase),
                "{capability}: boundary missing {boundary_phrase:?}"
            );
            assert!(
                op.verification_rule.to_lowercase().contains(rule_phrase),
                "{capability}: rule missing {rule_phrase:?}"
            );
        }
    }

    #[test]
    fn temporal_xsports_protocol_is_decomposed_with_closest_timestamp() {
        let basis = semantic_basis(Domain::Xsports);
        let protocol = compile_protocol(
            Capability::TemporalLocalization,
            &basis,
            "When does the jump start?",
            &plain_options(),
            &PathMatrix::default(),
            &TemplateSet::default(),
        );
        assert_eq!(protocol.path_hint, PathHint::Decomposed);
        assert!(protocol
            .operator
            .verification_rule
            .to_lowercase()
            .contains("closest timestamp"));
        let ids: Vec<StageId> = protocol.stage_specs.iter().map(|s| s.stage_id).collect();
        assert_eq!(
            ids,
            vec![
                StageId::Perception,
                StageId::Dynamics,
                StageId::Verification
            ]
        );
    }

    #[test]
    fn counting_industry_protocol_is_expert_with_obey_granularity() {
        let basis = semantic_basis(Domain::Industry);
        let protocol = compile_protocol(
            Capability::Counting,
            &basis,
            "How many screws are on the tray?",
            &plain_options(),
            &PathMatrix::default(),
            &TemplateSet::default(),
        );
        assert_eq!(protocol.path_hint, PathHint::Expert);
        assert!(protocol
            .operator
            .verification_rule
            .to_lowercase()
            .contains("obey granularity"));
        assert_eq!(protocol.stage_specs.len(), 1);
        assert_eq!(protocol.stage_specs[0].stage_id, StageId::Expert);
    }

    #[test]
    fn compile_is_deterministic() {
        let basis = semantic_basis(Domain::Animal);
        let make = || {
            compile_protocol(
                Capability::Prediction,
                &basis,
                "What will the bird do next?",
                &plain_options(),
                &PathMatrix::default(),
                &TemplateSet::default(),
            )
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn decomposed_domains_never_get_expert_path() {
        let matrix = PathMatrix::default();
        for capability in Capability::ALL {
            for domain in [Domain::Animal, Domain::Xsports] {
                assert_eq!(matrix.path(capability, domain), PathHint::Decomposed);
            }
        }
        for capability in [Capability::TemporalLocalization, Capability::Prediction] {
            for domain in Domain::ALL {
                assert_eq!(matrix.path(capability, domain), PathHint::Decomposed);
            }
        }
    }

    proptest! {
        /// Totality and determinism over arbitrary question strings, and
        /// basis separation: the domain changes only basis and path, never
        /// the capability (the shipped table has no domain constraints).
        #[test]
        fn route_is_total_deterministic_and_basis_separated(question in ".{0,120}") {
            let rules = RoutingRuleTable::default();
            let options = plain_options();
            let mut capabilities = Vec::new();
            for domain in Domain::ALL {
                let a = route(&question, &options, &meta(domain), &rules);
                let b = route(&question, &options, &meta(domain), &rules);
                prop_assert_eq!(&a, &b);
                prop_assert_eq!(a.basis.domain, domain);
                capabilities.push((a.capability, a.matched_rule));
            }
            for pair in capabilities.windows(2) {
                prop_assert_eq!(&pair[0], &pair[1]);
            }
        }
    }
}
