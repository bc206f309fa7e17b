//! Machine and human readable run reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{Limits, ResourceStatus};
use crate::invariants::{Discharge, Verdict, VerifyOutcome};

pub const REPORT_SCHEMA: &str = "report-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameters {
    pub max_states: usize,
    pub max_depth: usize,
    pub sessions: u32,
    pub fab_depth: usize,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub reachable: usize,
    pub transitions: usize,
    pub commit_states: usize,
    pub deadlocks: usize,
    pub max_depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedViolation {
    pub invariant: String,
    pub kind: String,
    pub slot: String,
    pub explanation: String,
    pub steps: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub model: String,
    pub verdict: Verdict,
    pub resource_status: ResourceStatus,
    pub states: StateCounts,
    pub wall_time_ms: f64,
    pub violations: Vec<RenderedViolation>,
    pub discharges: Vec<Discharge>,
    pub parameters: Parameters,
}

impl RunReport {
    pub fn new(model: &str, outcome: &VerifyOutcome, limits: &Limits, wall_time_ms: f64) -> RunReport {
        let s = &outcome.search;
        RunReport {
            schema: REPORT_SCHEMA.to_string(),
            model: model.to_string(),
            verdict: outcome.verdict.clone(),
            resource_status: s.resource_status,
            states: StateCounts {
                reachable: s.reachable_state_count,
                transitions: s.transitions,
                commit_states: s.commit_states,
                deadlocks: s.deadlocks,
                max_depth: s.max_depth,
            },
            wall_time_ms,
            violations: outcome
                .verdict
                .violations()
                .iter()
                .map(|v| RenderedViolation {
                    invariant: v.invariant.clone(),
                    kind: v.kind.to_string(),
                    slot: v.slot.to_string(),
                    explanation: v.explanation.clone(),
                    steps: v.trace.entries.iter().map(|e| e.step.to_string()).collect(),
                })
                .collect(),
            discharges: outcome.discharges.clone(),
            parameters: Parameters {
                max_states: limits.max_states,
                max_depth: limits.max_depth,
                sessions: outcome.sessions,
                fab_depth: limits.fab_depth,
                workers: limits.workers,
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, "model {}: {}", self.model, self.verdict.label().to_uppercase());
        if let Verdict::Inconclusive { reason } = &self.verdict {
            let _ = writeln!(w, "  {reason}");
        }
        let _ = writeln!(
            w,
            "  {} states, {} transitions, {} commit states, {} deadlocks, depth {}",
            self.states.reachable,
            self.states.transitions,
            self.states.commit_states,
            self.states.deadlocks,
            self.states.max_depth
        );
        let p = &self.parameters;
        let _ = writeln!(
            w,
            "  sessions {}, fab-depth {}, max-states {}, max-depth {}, {:.1} ms",
            p.sessions, p.fab_depth, p.max_states, p.max_depth, self.wall_time_ms
        );
        for v in &self.violations {
            let _ = writeln!(w, "violation of {} ({}) on {}: {}", v.invariant, v.kind, v.slot, v.explanation);
            for (i, s) in v.steps.iter().enumerate() {
                let _ = writeln!(w, "  {:>3}. {s}", i + 1);
            }
        }
        if !self.discharges.is_empty() {
            let _ = writeln!(w, "mechanisms:");
            for d in &self.discharges {
                let show =
                    |m: &Option<crate::invariants::Mechanism>| m.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    w,
                    "  {} {}: fabrication {}, replay {}",
                    d.invariant,
                    d.slot,
                    show(&d.fabrication),
                    show(&d.replay)
                );
            }
        }
        out
    }
}
