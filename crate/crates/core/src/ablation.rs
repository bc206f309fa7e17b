//! Precondition ablation: which trust assumptions does a passing model
//! actually need?

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Limits};
use crate::invariants::{verify, Verdict, Violation};
use crate::model::{apply_preconditions, ModelError, ProtocolModel};

/// Largest precondition set accepted by exhaustive ablation.
pub const MAX_EXHAUSTIVE: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    LeaveOneOut,
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Necessity {
    Necessary { witness: Violation },
    Removable,
    Inconclusive { reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreconditionResult {
    pub id: String,
    pub necessity: Necessity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRun {
    pub enabled: Vec<String>,
    pub verdict: Verdict,
    pub states: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationReport {
    pub model: String,
    pub mode: AblationMode,
    /// Verdict with every precondition enabled. Anything other than a pass
    /// stops the analysis.
    pub baseline: Verdict,
    pub preconditions: Vec<PreconditionResult>,
    /// Present in exhaustive mode.
    pub minimal_sets: Option<Vec<Vec<String>>>,
    pub runs: Vec<AblationRun>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AblationError {
    #[error("E_TOO_MANY_PRECONDITIONS: {count} preconditions, exhaustive mode allows at most {MAX_EXHAUSTIVE}")]
    TooManyPreconditions { count: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn run(m: &ProtocolModel, enabled: &BTreeSet<String>, limits: &Limits) -> Result<AblationRun, AblationError> {
    let derived = apply_preconditions(m, enabled)?;
    let out = verify(&derived, limits)?;
    Ok(AblationRun {
        enabled: enabled.iter().cloned().collect(),
        verdict: out.verdict,
        states: out.search.reachable_state_count,
    })
}

fn necessity(r: &AblationRun) -> Necessity {
    match &r.verdict {
        Verdict::Pass => Necessity::Removable,
        Verdict::Fail { violations } => match violations.first() {
            Some(w) => Necessity::Necessary { witness: w.clone() },
            None => Necessity::Inconclusive { reason: "failure without a witness".into() },
        },
        Verdict::Inconclusive { reason } => Necessity::Inconclusive { reason: reason.clone() },
    }
}

/// Runs `verify` with preconditions removed. Per-run parallelism comes from
/// rayon; each run itself explores single-threaded.
pub fn ablate(m: &ProtocolModel, mode: AblationMode, limits: &Limits) -> Result<AblationReport, AblationError> {
    let ids: Vec<String> = m.preconditions.iter().map(|p| p.id.clone()).collect();
    if mode == AblationMode::Exhaustive && ids.len() > MAX_EXHAUSTIVE {
        return Err(AblationError::TooManyPreconditions { count: ids.len() });
    }
    let limits = Limits { workers: 1, ..limits.clone() };
    let all: BTreeSet<String> = ids.iter().cloned().collect();
    let baseline = run(m, &all, &limits)?;
    let mut report = AblationReport {
        model: m.name.clone(),
        mode,
        baseline: baseline.verdict.clone(),
        preconditions: Vec::new(),
        minimal_sets: None,
        runs: vec![baseline.clone()],
    };
    if !baseline.verdict.is_pass() {
        return Ok(report);
    }
    let subsets: Vec<BTreeSet<String>> = match mode {
        AblationMode::LeaveOneOut => ids.iter().map(|p| all.iter().filter(|q| *q != p).cloned().collect()).collect(),
        AblationMode::Exhaustive => (0u32..(1u32 << ids.len()))
            .rev()
            .skip(1)
            .map(|mask| {
                ids.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, id)| id.clone()).collect()
            })
            .collect(),
    };
    let runs: Vec<AblationRun> = subsets.par_iter().map(|s| run(m, s, &limits)).collect::<Result<_, _>>()?;
    for id in &ids {
        let without: BTreeSet<String> = all.iter().filter(|q| *q != id).cloned().collect();
        if let Some(r) = runs.iter().find(|r| r.enabled.iter().cloned().collect::<BTreeSet<_>>() == without) {
            report.preconditions.push(PreconditionResult { id: id.clone(), necessity: necessity(r) });
        }
    }
    if mode == AblationMode::Exhaustive {
        let mut passing: Vec<BTreeSet<String>> = std::iter::once(&baseline)
            .chain(runs.iter())
            .filter(|r| r.verdict.is_pass())
            .map(|r| r.enabled.iter().cloned().collect())
            .collect();
        passing.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
        let mut minimal: Vec<BTreeSet<String>> = Vec::new();
        for s in passing {
            if !minimal.iter().any(|mset| mset.is_subset(&s)) {
                minimal.push(s);
            }
        }
        report.minimal_sets = Some(minimal.into_iter().map(|s| s.into_iter().collect()).collect());
    }
    report.runs.extend(runs);
    Ok(report)
}
