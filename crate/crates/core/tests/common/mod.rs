//! Shared helpers for integration tests: a deterministic RNG, a synthetic
//! dataset whose gold option is marked in its text, and scripted responders
//! that answer from the prompt alone.

#![allow(dead_code)]

use egoreason::backend::{ChatRequest, ScriptedBackend, ScriptedReply};
use egoreason::rat::Rat;
use egoreason::sample::{Domain, FrameRef, Label, OptionSet, Sample, SampleMetadata};

/// Small deterministic xorshift generator.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    pub fn below(&mut self, bound: u64) -> u64 {
        self.next_u64() % bound.max(1)
    }
}

const QUESTIONS: [&str; 8] = [
    "Which tool is the person holding?",
    "How many clamps are on the tray?",
    "When does the contact start?",
    "What will the person do next?",
    "Where is the marker relative to the tray?",
    "Which statement about the wrench is true?",
    "Which instrument appears at the final moment?",
    "How many people pass by the camera?",
];

/// Build `n` synthetic samples. The gold option's text starts with
/// `"correct"`; every fifth sample includes a `"not visible"` distractor and
/// every other sample declares frame dimensions.
pub fn synth_samples(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let gold = Label::ALL[i % 4];
            let domain = Domain::ALL[(i / 4) % 4];
            let mut texts: [String; 4] = std::array::from_fn(|slot| {
                if Label::ALL[slot] == gold {
                    format!("correct target {i}")
                } else {
                    format!("wrong candidate {i}-{slot}")
                }
            });
            if i % 5 == 0 {
                let decoy = Label::ALL.iter().position(|l| *l != gold).unwrap();
                texts[decoy] = format!("wrong: not visible in sample {i}");
            }
            let frames: Vec<FrameRef> = (0..(2 + i % 4) as u64)
                .map(|j| FrameRef {
                    uri: format!("frames/s{i:03}/f{j}.jpg"),
                    index: j,
                    width: (i % 2 == 0).then_some(1920),
                    height: (i % 2 == 0).then_some(1080),
                })
                .collect();
            let rate = match i % 4 {
                0 => Rat::integer(1),
                1 => Rat::integer(2),
                2 => Rat::integer(5),
                _ => Rat::integer(30),
            };
            Sample {
                id: format!("s{i:03}"),
                frames,
                question: QUESTIONS[i % QUESTIONS.len()].to_string(),
                options: OptionSet::new(texts).unwrap(),
                metadata: SampleMetadata {
                    domain,
                    sampling_rate: rate,
                    sequence_offset: (i as u64 * 3) % 11,
                    sample_id: format!("s{i:03}"),
                },
                gold_label: Some(gold),
            }
        })
        .collect()
}

/// Find the gold label by scanning the prompt's OPTIONS block for the
/// `correct` marker.
pub fn gold_from_prompt(prompt: &str) -> Label {
    for line in prompt.lines() {
        let line = line.trim();
        for label in Label::ALL {
            if line.starts_with(&format!("{label}. correct")) {
                return label;
            }
        }
    }
    Label::A
}

fn verification_blocks(gold: Label) -> String {
    let mut out = String::new();
    for label in Label::ALL {
        let passes = label == gold;
        out.push_str(&format!(
            "OPTION {label}:\nSUPPORT: {s}\nGRANULARITY: yes\nTEMPORAL: {t}\nCONTRADICTION: {k}\n\
             CITED_TIMESTAMPS: {cites}\nASSUMPTIONS: {assumptions}\nRATIONALE: scripted verdict\n",
            s = if passes { "yes" } else { "no" },
            t = if passes { "yes" } else { "no" },
            k = if passes { "no" } else { "yes" },
            cites = if passes { "t=0.00 s; t=1.00 s" } else { "none" },
            assumptions = if passes { "none" } else { "unsupported leap" },
        ));
    }
    out
}

/// Responds per stage; final stages commit to the gold label through the
/// structured field (and well-formed verification blocks when asked for).
pub fn gold_responder() -> ScriptedBackend {
    ScriptedBackend::with_responder(|request: &ChatRequest| {
        let prompt = request.text();
        let gold = gold_from_prompt(&prompt);
        if prompt.contains("VERIFICATION FORMAT") {
            ScriptedReply::Text(format!("{}FINAL ANSWER: {gold}", verification_blocks(gold)))
        } else if prompt.contains("PERCEPTION NOTES only") {
            ScriptedReply::Text(
                "Observed the scene steadily. t=0.00 s shows the target clearly.".into(),
            )
        } else if prompt.contains("DYNAMICS NOTES only") {
            ScriptedReply::Text("Motion stays smooth; the state flips near t=1.00 s.".into())
        } else {
            ScriptedReply::Text(format!("FINAL ANSWER: {gold}"))
        }
    })
}

/// Responds with free prose only: no structured field, no parseable blocks.
/// The gold label appears solely as an `option (L)` mention.
pub fn prose_responder() -> ScriptedBackend {
    ScriptedBackend::with_responder(|request: &ChatRequest| {
        let prompt = request.text();
        let gold = gold_from_prompt(&prompt);
        if prompt.contains("PERCEPTION NOTES only") {
            ScriptedReply::Text("The frames show steady handheld footage of the workspace.".into())
        } else if prompt.contains("DYNAMICS NOTES only") {
            ScriptedReply::Text("The motion builds gradually and settles near the end.".into())
        } else {
            ScriptedReply::Text(format!(
                "After weighing the evidence carefully, the best choice is option ({gold})."
            ))
        }
    })
}
