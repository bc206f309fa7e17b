//! Explicit-state symbolic security model checker.
//!
//! Models describe principals as communicating state machines, a network
//! attacker that can eavesdrop, drop, fabricate and replay, and the
//! confidentiality and integrity invariants the protocol must keep. The
//! checker explores every interleaving, reports violating traces, and can
//! ablate trust preconditions to find the ones a design really needs.

pub mod ablation;
pub mod corpus;
pub mod engine;
pub mod format;
pub mod invariants;
pub mod model;
pub mod report;
pub mod term;

pub use ablation::{ablate, AblationMode, AblationReport, Necessity};
pub use engine::{benign_run, explore, fingerprint, Limits, Machine, SearchResult, Trace, VariantTag};
pub use format::{parse, serialize};
pub use invariants::{verify, Mechanism, Verdict, Violation, ViolationKind};
pub use model::{apply_preconditions, validate, ProtocolModel};
pub use term::{can_derive, closure, KnowledgeSet, Term};
