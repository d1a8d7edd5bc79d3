//! Orchestration library for a routed test-time reasoning program over
//! multiple-choice egocentric video QA.
//!
//! The pipeline turns one QA sample (frames, question, four options, domain
//! metadata) into a calibrated answer label through five stages:
//!
//! 1. [`evidence`] — timestamps frames into segment-aware evidence units and
//!    renders the reliability observation rule.
//! 2. [`router`] — grounds the question into a capability and a domain
//!    semantic basis, then compiles the reasoning protocol.
//! 3. [`reasoning`] — executes the protocol as a sequence of backend calls
//!    (perception, dynamics, verification, or a single expert call),
//!    recording full transcripts.
//! 4. [`verify`] — checks each option as a hypothesis against the evidence
//!    boundary and selects the surviving candidate.
//! 5. [`calibrate`] — deterministically recovers a valid label from any raw
//!    model output.
//!
//! [`backend`] abstracts the chat-completion endpoint (remote client,
//! scripted player for tests, caching wrapper) and [`harness`] runs batches,
//! aggregates per-domain accuracy, and emits reports.

pub mod backend;
pub mod calibrate;
pub mod evidence;
pub mod harness;
pub mod rat;
pub mod reasoning;
pub mod router;
pub mod sample;
pub mod verify;

mod digest;

pub use rat::Rat;
pub use sample::{Domain, Label, Sample};
