//! Boundary-aware option verification.
//!
//! Each option is treated as a hypothesis and checked against four
//! conjuncts: visual support (S), semantic-granularity consistency (G),
//! temporal compatibility (T), and absence of a hard contradiction (K). An
//! option passes iff `S && G && T && !K`. The checks are elicited from the
//! model as explicit yes/no fields in a machine-parseable block per option
//! (grammar v1, documented in `docs/prompt_schema.md`), never inferred from
//! prose.
//!
//! Candidate selection: a unique passer wins; among several passers the most
//! cited evidence timestamps win, then the fewest unsupported assumptions,
//! then the lowest label; if nothing passes, the record violating the fewest
//! conjuncts wins with the same tie keys.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::router::ReasoningProtocol;
use crate::sample::{Label, OptionSet};

/// Version tag of the per-option block grammar shared between
/// [`build_verification_instruction`] and [`parse_verification`].
pub const VERIFICATION_GRAMMAR_VERSION: &str = "v1";

/// Parsed verification verdict for one option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub label: Label,
    /// S: direct visual support.
    pub support: bool,
    /// G: semantic-granularity consistency.
    pub granularity_ok: bool,
    /// T: temporal compatibility.
    pub temporal_ok: bool,
    /// K: hard contradiction.
    pub contradiction: bool,
    /// Distinct evidence timestamps cited for this option.
    pub support_count: u32,
    /// Unsupported assumptions listed for this option.
    pub assumption_count: u32,
    pub rationale: String,
}

impl VerificationRecord {
    /// The verification predicate: `S && G && T && !K`.
    pub fn verdict(&self) -> bool {
        self.support && self.granularity_ok && self.temporal_ok && !self.contradiction
    }

    /// Number of violated conjuncts (0..=4).
    pub fn violations(&self) -> u32 {
        u32::from(!self.support)
            + u32::from(!self.granularity_ok)
            + u32::from(!self.temporal_ok)
            + u32::from(self.contradiction)
    }
}

/// Why the chosen label was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionReason {
    /// Exactly one option passed the predicate.
    UniquePass,
    /// Several passed; the unique maximum of cited timestamps decided.
    TiebreakSupport,
    /// Several passed with tied support; fewest assumptions (and, if still
    /// tied, the lowest label) decided.
    TiebreakAssumptions,
    /// Nothing passed; the fewest violated conjuncts decided, with the same
    /// tie keys.
    LeastViolatingFallback,
}

/// The selection outcome over all four options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub records: Vec<VerificationRecord>,
    pub chosen: Label,
    pub reason: SelectionReason,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub struct IncompleteVerification {
    pub missing: Vec<Label>,
    pub duplicated: Vec<Label>,
}

impl fmt::Display for IncompleteVerification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "incomplete verification output")?;
        if !self.missing.is_empty() {
            let names: Vec<&str> = self.missing.iter().map(Label::as_str).collect();
            write!(f, "; missing labels {}", names.join(", "))?;
        }
        if !self.duplicated.is_empty() {
            let names: Vec<&str> = self.duplicated.iter().map(Label::as_str).collect();
            write!(f, "; duplicated labels {}", names.join(", "))?;
        }
        Ok(())
    }
}

/// Render the per-option hypothesis-checking instruction.
///
/// Embeds the protocol's capability verification rule verbatim and demands
/// one machine-parseable block per option (cited timestamps, assumptions),
/// closing with the constrained prediction line.
pub fn build_verification_instruction(protocol: &ReasoningProtocol, options: &OptionSet) -> String {
    let labels: Vec<&str> = options.iter().map(|(l, _)| l.as_str()).collect();
    format!(
        "OPTION VERIFICATION\n\
         Treat each option as a hypothesis and test it against the recorded evidence.\n\
         For every option check:\n\
         - SUPPORT: is the option directly supported by cited visual evidence?\n\
         - GRANULARITY: does the option match the semantic granularity the question asks for?\n\
         - TEMPORAL: is the option compatible with the timestamps of the observed events?\n\
         - CONTRADICTION: is the option contradicted by any observed evidence?\n\
         Capability rule: {rule}\n\
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
        rule = protocol.operator.verification_rule,
        version = VERIFICATION_GRAMMAR_VERSION,
        labels = labels.join(", "),
    )
}

/// The answer-format instruction used when option verification is disabled.
pub fn plain_answer_instruction() -> String {
    "ANSWER FORMAT\nReason briefly, then end your reply with a line: FINAL ANSWER: <label>"
        .to_string()
}

fn parse_yes_no(value: &str) -> Option<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "yes" | "y" | "true" => Some(true),
        "no" | "n" | "false" => Some(false),
        _ => None,
    }
}

/// Count semicolon/comma-separated items, ignoring empties and `none`.
/// Timestamp lists count distinct items only.
fn count_items(value: &str, distinct: bool) -> u32 {
    let mut items: Vec<String> = value
        .split([';', ','])
        .map(|s| s.trim().to_ascii_lowercase())
        .filter(|s| !s.is_empty() && s != "none" && s != "n/a" && s != "-")
        .collect();
    if distinct {
        items.sort();
        items.dedup();
    }
    items.len() as u32
}

#[derive(Default)]
struct BlockFields {
    support: Option<bool>,
    granularity: Option<bool>,
    temporal: Option<bool>,
    contradiction: Option<bool>,
    support_count: u32,
    assumption_count: u32,
    rationale: String,
}

impl BlockFields {
    fn into_record(self, label: Label) -> Option<VerificationRecord> {
        Some(VerificationRecord {
            label,
            support: self.support?,
            granularity_ok: self.granularity?,
            temporal_ok: self.temporal?,
            contradiction: self.contradiction?,
            support_count: self.support_count,
            assumption_count: self.assumption_count,
            rationale: self.rationale,
        })
    }
}

/// Header line of an option block: `OPTION <L>` with optional punctuation.
fn block_header(line: &str) -> Option<Label> {
    let trimmed = line.trim();
    let rest = trimmed
        .strip_prefix("OPTION ")
        .or_else(|| trimmed.strip_prefix("Option "))?;
    let rest = rest.trim_start_matches(['(', '[']);
    let label = Label::from_char(rest.chars().next()?)?;
    let tail = &rest[1..];
    tail.trim_end_matches([':', ')', ']', '.'])
        .trim()
        .is_empty()
        .then_some(label)
}

/// Extract one [`VerificationRecord`] per label from the structured blocks.
///
/// Prose outside blocks is ignored. A block missing any of the four yes/no
/// fields does not count for its label. Missing or duplicate labels are
/// reported; the caller then falls back to calibrating the raw text.
pub fn parse_verification(
    raw_output: &str,
) -> Result<[VerificationRecord; 4], IncompleteVerification> {
    let mut records: [Option<VerificationRecord>; 4] = [None, None, None, None];
    let mut duplicated = Vec::new();

    let mut current: Option<(Label, BlockFields)> = None;
    let close = |current: &mut Option<(Label, BlockFields)>,
                 records: &mut [Option<VerificationRecord>; 4],
                 duplicated: &mut Vec<Label>| {
        if let Some((label, fields)) = current.take() {
            if let Some(record) = fields.into_record(label) {
                if records[label.index()].is_some() {
                    duplicated.push(label);
                } else {
                    records[label.index()] = Some(record);
                }
            }
        }
    };

    for line in raw_output.lines() {
        if let Some(label) = block_header(line) {
            close(&mut current, &mut records, &mut duplicated);
            current = Some((label, BlockFields::default()));
            continue;
        }
        let Some((_, fields)) = current.as_mut() else {
            continue;
        };
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        match key.trim().to_ascii_uppercase().as_str() {
            "SUPPORT" | "S" => fields.support = parse_yes_no(value).or(fields.support),
            "GRANULARITY" | "G" => fields.granularity = parse_yes_no(value).or(fields.granularity),
            "TEMPORAL" | "T" => fields.temporal = parse_yes_no(value).or(fields.temporal),
            "CONTRADICTION" | "K" => {
                fields.contradiction = parse_yes_no(value).or(fields.contradiction)
            }
            "CITED_TIMESTAMPS" | "CITED TIMESTAMPS" | "TIMESTAMPS" => {
                fields.support_count = count_items(value, true)
            }
            "ASSUMPTIONS" => fields.assumption_count = count_items(value, false),
            "RATIONALE" => fields.rationale = value.trim().to_string(),
            _ => {}
        }
    }
    close(&mut current, &mut records, &mut duplicated);

    let missing: Vec<Label> = Label::ALL
        .into_iter()
        .filter(|l| records[l.index()].is_none())
        .collect();
    if !missing.is_empty() || !duplicated.is_empty() {
        return Err(IncompleteVerification {
            missing,
            duplicated,
        });
    }
    Ok(records.map(|r| r.expect("all labels present")))
}

/// Selection key: more cited support wins, then fewer assumptions, then the
/// lower label.
fn better(a: &VerificationRecord, b: &VerificationRecord) -> bool {
    (
        b.support_count,
        std::cmp::Reverse(b.assumption_count),
        std::cmp::Reverse(b.label),
    ) < (
        a.support_count,
        std::cmp::Reverse(a.assumption_count),
        std::cmp::Reverse(a.label),
    )
}

/// Deterministically select the surviving candidate.
pub fn select_candidate(records: &[VerificationRecord; 4]) -> VerificationOutcome {
    let passers: Vec<&VerificationRecord> = records.iter().filter(|r| r.verdict()).collect();

    let (chosen, reason) = if passers.len() == 1 {
        (passers[0], SelectionReason::UniquePass)
    } else if !passers.is_empty() {
        let mut best = passers[0];
        for candidate in &passers[1..] {
            if better(candidate, best) {
                best = candidate;
            }
        }
        let top_support = passers
            .iter()
            .filter(|r| r.support_count == best.support_count)
            .count();
        let reason = if top_support == 1 {
            SelectionReason::TiebreakSupport
        } else {
            SelectionReason::TiebreakAssumptions
        };
        (best, reason)
    } else {
        let min_violations = records
            .iter()
            .map(|r| r.violations())
            .min()
            .expect("four records");
        let mut best: Option<&VerificationRecord> = None;
        for record in records.iter().filter(|r| r.violations() == min_violations) {
            best = match best {
                None => Some(record),
                Some(current) if better(record, current) => Some(record),
                Some(current) => Some(current),
            };
        }
        (
            best.expect("at least one record"),
            SelectionReason::LeastViolatingFallback,
        )
    };

    VerificationOutcome {
        records: records.to_vec(),
        chosen: chosen.label,
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoning::TemplateSet;
    use crate::router::{compile_protocol, semantic_basis, Capability, PathMatrix};
    use crate::sample::Domain;
    use proptest::prelude::*;

    fn record(label: Label, bits: [bool; 4], support: u32, assumptions: u32) -> VerificationRecord {
        VerificationRecord {
            label,
            support: bits[0],
            granularity_ok: bits[1],
            temporal_ok: bits[2],
            contradiction: bits[3],
            support_count: support,
            assumption_count: assumptions,
            rationale: String::new(),
        }
    }

    fn pass(label: Label, support: u32, assumptions: u32) -> VerificationRecord {
        record(label, [true, true, true, false], support, assumptions)
    }

    fn options() -> OptionSet {
        OptionSet::new(["w".into(), "x".into(), "y".into(), "z".into()]).unwrap()
    }

    fn protocol(capability: Capability, domain: Domain) -> ReasoningProtocol {
        compile_protocol(
            capability,
            &semantic_basis(domain),
            "q",
            &options(),
            &PathMatrix::default(),
            &TemplateSet::default(),
        )
    }

    #[test]
    fn not_visible_instruction_requires_complete_absence() {
        let text = build_verification_instruction(
            &protocol(Capability::NotVisible, Domain::Surgery),
            &options(),
        );
        assert!(text.to_lowercase().contains("complete absence"));
        assert!(text.contains("OPTION <label>:"));
        assert!(text.contains("FINAL ANSWER: <label>"));
    }

    #[test]
    fn prediction_instruction_requires_trajectory_agreement() {
        let text = build_verification_instruction(
            &protocol(Capability::Prediction, Domain::Xsports),
            &options(),
        );
        assert!(text.to_lowercase().contains("final observed trajectory"));
        assert!(text.to_lowercase().contains("next-state consistency"));
    }

    #[test]
    fn instruction_is_deterministic() {
        let p = protocol(Capability::TemporalLocalization, Domain::Animal);
        assert_eq!(
            build_verification_instruction(&p, &options()),
            build_verification_instruction(&p, &options())
        );
    }

    fn block(
        label: char,
        s: &str,
        g: &str,
        t: &str,
        k: &str,
        cited: &str,
        assumptions: &str,
    ) -> String {
        format!(
            "OPTION {label}:\nSUPPORT: {s}\nGRANULARITY: {g}\nTEMPORAL: {t}\nCONTRADICTION: {k}\n\
             CITED_TIMESTAMPS: {cited}\nASSUMPTIONS: {assumptions}\nRATIONALE: because\n"
        )
    }

    fn full_output() -> String {
        let mut out = String::from("Some preamble the model wrote.\n");
        out.push_str(&block('A', "no", "yes", "yes", "no", "none", "one; two"));
        out.push_str(&block(
            'B',
            "yes",
            "yes",
            "yes",
            "no",
            "t=1.00 s; t=2.50 s",
            "none",
        ));
        out.push_str(&block('C', "yes", "yes", "yes", "yes", "t=1.00 s", "none"));
        out.push_str(&block('D', "no", "no", "yes", "no", "none", "none"));
        out.push_str("FINAL ANSWER: B\n");
        out
    }

    #[test]
    fn well_formed_output_parses_all_four_records() {
        let records = parse_verification(&full_output()).unwrap();
        let b = &records[Label::B.index()];
        assert!(b.support && b.granularity_ok && b.temporal_ok && !b.contradiction);
        assert!(b.verdict());
        assert_eq!(b.support_count, 2);
        assert_eq!(b.assumption_count, 0);
        assert_eq!(records[Label::A.index()].assumption_count, 2);
    }

    #[test]
    fn hard_contradiction_fails_the_verdict() {
        let records = parse_verification(&full_output()).unwrap();
        let c = &records[Label::C.index()];
        assert!(c.contradiction);
        assert!(!c.verdict());
    }

    #[test]
    fn missing_block_is_reported() {
        let mut out = String::new();
        out.push_str(&block('A', "yes", "yes", "yes", "no", "none", "none"));
        out.push_str(&block('B', "yes", "yes", "yes", "no", "none", "none"));
        out.push_str(&block('C', "yes", "yes", "yes", "no", "none", "none"));
        let err = parse_verification(&out).unwrap_err();
        assert_eq!(err.missing, vec![Label::D]);
        assert!(err.duplicated.is_empty());
    }

    #[test]
    fn duplicate_block_is_reported() {
        let mut out = full_output();
        out.push_str(&block('B', "no", "no", "no", "yes", "none", "none"));
        let err = parse_verification(&out).unwrap_err();
        assert_eq!(err.duplicated, vec![Label::B]);
    }

    #[test]
    fn block_missing_a_conjunct_counts_as_missing_label() {
        let mut out = String::new();
        out.push_str(&block('A', "yes", "yes", "yes", "no", "none", "none"));
        out.push_str("OPTION B:\nSUPPORT: yes\nGRANULARITY: yes\n"); // no TEMPORAL/CONTRADICTION
        out.push_str(&block('C', "yes", "yes", "yes", "no", "none", "none"));
        out.push_str(&block('D', "yes", "yes", "yes", "no", "none", "none"));
        let err = parse_verification(&out).unwrap_err();
        assert_eq!(err.missing, vec![Label::B]);
    }

    #[test]
    fn distinct_timestamps_deduplicate() {
        let out = format!(
            "{}{}{}{}",
            block(
                'A',
                "yes",
                "yes",
                "yes",
                "no",
                "t=1.00 s; t=1.00 s; t=2.00 s",
                "none"
            ),
            block('B', "no", "yes", "yes", "no", "none", "none"),
            block('C', "no", "yes", "yes", "no", "none", "none"),
            block('D', "no", "yes", "yes", "no", "none", "none"),
        );
        let records = parse_verification(&out).unwrap();
        assert_eq!(records[Label::A.index()].support_count, 2);
    }

    #[test]
    fn unique_pass_is_chosen() {
        let records = [
            pass(Label::B, 1, 0),
            record(Label::A, [false, true, true, false], 0, 0),
            record(Label::C, [true, false, true, false], 0, 0),
            record(Label::D, [true, true, false, false], 0, 0),
        ];
        // Order in the array is not label order; selection must not care.
        let records = [
            records[1].clone(),
            records[0].clone(),
            records[2].clone(),
            records[3].clone(),
        ];
        let outcome = select_candidate(&records);
        assert_eq!(outcome.chosen, Label::B);
        assert_eq!(outcome.reason, SelectionReason::UniquePass);
    }

    #[test]
    fn support_count_breaks_ties_between_passers() {
        let records = [
            pass(Label::A, 3, 5),
            pass(Label::C, 1, 0),
            record(Label::B, [false, true, true, false], 0, 0),
            record(Label::D, [false, true, true, false], 0, 0),
        ];
        let outcome = select_candidate(&records);
        assert_eq!(outcome.chosen, Label::A);
        assert_eq!(outcome.reason, SelectionReason::TiebreakSupport);
    }

    #[test]
    fn assumptions_break_support_ties() {
        let records = [
            pass(Label::B, 2, 3),
            pass(Label::D, 2, 1),
            record(Label::A, [false, true, true, false], 9, 0),
            record(Label::C, [true, true, true, true], 9, 0),
        ];
        let outcome = select_candidate(&records);
        assert_eq!(outcome.chosen, Label::D);
        assert_eq!(outcome.reason, SelectionReason::TiebreakAssumptions);
    }

    #[test]
    fn alphabetical_final_tie_goes_to_the_lowest_label() {
        let records = [
            pass(Label::D, 2, 1),
            pass(Label::B, 2, 1),
            record(Label::A, [false, true, true, false], 0, 0),
            record(Label::C, [false, true, true, false], 0, 0),
        ];
        let outcome = select_candidate(&records);
        assert_eq!(outcome.chosen, Label::B);
        assert_eq!(outcome.reason, SelectionReason::TiebreakAssumptions);
    }

    #[test]
    fn least_violating_fallback_when_none_pass() {
        let records = [
            record(Label::A, [false, false, true, false], 0, 0), // 2 violations
            record(Label::B, [false, true, false, false], 0, 0), // 2 violations
            record(Label::C, [true, false, false, true], 0, 0),  // 3 violations
            record(Label::D, [true, true, false, false], 0, 0),  // 1 violation
        ];
        let outcome = select_candidate(&records);
        assert_eq!(outcome.chosen, Label::D);
        assert_eq!(outcome.reason, SelectionReason::LeastViolatingFallback);
    }

    proptest! {
        /// Permuting record order never changes the outcome, and the verdict
        /// always equals the four-conjunct formula.
        #[test]
        fn selection_is_permutation_stable(
            bits in proptest::array::uniform4(proptest::array::uniform4(proptest::bool::ANY)),
            supports in proptest::array::uniform4(0u32..4),
            assumptions in proptest::array::uniform4(0u32..4),
            seed in 0u64..24,
        ) {
            let records: [VerificationRecord; 4] = std::array::from_fn(|i| {
                record(Label::ALL[i], bits[i], supports[i], assumptions[i])
            });
            for r in &records {
                prop_assert_eq!(
                    r.verdict(),
                    r.support && r.granularity_ok && r.temporal_ok && !r.contradiction
                );
            }
            let base = select_candidate(&records);
            // Walk a few permutations derived from the seed.
            let mut permuted = records.to_vec();
            let mut s = seed;
            for i in (1..4).rev() {
                permuted.swap(i, (s % (i as u64 + 1)) as usize);
                s /= 4;
            }
            let permuted: [VerificationRecord; 4] = permuted.try_into().unwrap();
            let shuffled = select_candidate(&permuted);
            prop_assert_eq!(base.chosen, shuffled.chosen);
            prop_assert_eq!(base.reason, shuffled.reason);
        }
    }
}
