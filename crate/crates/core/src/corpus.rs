//! Bundled reference models.

use serde::Serialize;
use thiserror::Error;

use crate::format::parse_named;
use crate::model::{Diagnostic, ExpectedVerdict, Phase, ProtocolModel, Scope};

#[derive(Clone, Debug, Serialize)]
pub struct CorpusEntry {
    pub name: &'static str,
    pub path: &'static str,
    pub scope: Scope,
    pub phase: Phase,
    pub preconditions: Vec<String>,
    pub expected: ExpectedVerdict,
    /// Preconditions leave-one-out ablation must find necessary.
    pub expected_necessary: Vec<String>,
    pub notes: &'static str,
    #[serde(skip)]
    pub source: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("E_UNKNOWN_MODEL: no corpus model named {0}")]
    UnknownModel(String),
    #[error("corpus model {name} does not parse: {}", .diagnostics.first().map(|d| d.to_string()).unwrap_or_default())]
    Broken { name: String, diagnostics: Vec<Diagnostic> },
}

struct Raw {
    name: &'static str,
    path: &'static str,
    source: &'static str,
    necessary: &'static [&'static str],
    notes: &'static str,
}

macro_rules! entry {
    ($name:literal, $dir:literal, $necessary:expr, $notes:literal) => {
        Raw {
            name: $name,
            path: concat!("corpus/", $dir, "/", $name, ".svm"),
            source: include_str!(concat!("../corpus/", $dir, "/", $name, ".svm")),
            necessary: $necessary,
            notes: $notes,
        }
    };
}

fn raw() -> Vec<Raw> {
    vec![
        entry!("vm_startup", "hyperwall", &[], "customer launches a VM and checks the signed launch report"),
        entry!("vm_launch", "hyperwall", &[], "processor steps that fill the protection tables at launch"),
        entry!(
            "vm_secure_channel",
            "hyperwall",
            &[],
            "customer sets up a session key with a running VM; reconstructed"
        ),
        entry!(
            "vm_trust_evidence",
            "hyperwall",
            &[],
            "customer requests signed protection evidence over two sessions; reconstructed"
        ),
        entry!(
            "vm_suspend_resume_original",
            "hyperwall",
            &[],
            "suspend MAC covers only the launch nonce, so an old suspend image replays"
        ),
        entry!(
            "vm_suspend_resume_fixed",
            "hyperwall",
            &[],
            "suspend MAC covers a hardware-held suspend counter; counter placement reconstructed"
        ),
        entry!("vm_mem_update", "hyperwall", &[], "processor-mediated page assignment; reconstructed"),
        entry!("vm_terminate", "hyperwall", &[], "processor releases pages and clears the TEC entry; reconstructed"),
        entry!(
            "cloudmonatt_external",
            "cloudmonatt",
            &["C1", "C2", "C3"],
            "customer, controller, attestation server and cloud server over an attacker network"
        ),
        entry!("evidence_collection", "cloudmonatt", &["C1", "C2", "C3"], "measurement path inside the cloud server"),
        entry!(
            "property_interpretation",
            "cloudmonatt",
            &[],
            "attestation server turns a signed measurement into a property report; loosest reconstruction"
        ),
        entry!(
            "health_checking",
            "cloudmonatt",
            &[],
            "fresh signed platform health report over two sessions; loosest reconstruction"
        ),
    ]
}

/// Every bundled model, in a fixed order.
pub fn list_entries() -> Vec<CorpusEntry> {
    raw()
        .into_iter()
        .filter_map(|r| {
            let m = parse_named(r.source, r.path).ok()?;
            Some(CorpusEntry {
                name: r.name,
                path: r.path,
                scope: m.scope,
                phase: m.phase,
                preconditions: m.preconditions.iter().map(|p| p.id.clone()).collect(),
                expected: m.expected.clone().unwrap_or(ExpectedVerdict::Pass),
                expected_necessary: r.necessary.iter().map(|s| s.to_string()).collect(),
                notes: r.notes,
                source: r.source,
            })
        })
        .collect()
}

pub fn names() -> Vec<&'static str> {
    raw().iter().map(|r| r.name).collect()
}

pub fn source(name: &str) -> Option<&'static str> {
    raw().into_iter().find(|r| r.name == name).map(|r| r.source)
}

pub fn load(name: &str) -> Result<ProtocolModel, CorpusError> {
    let r = raw().into_iter().find(|r| r.name == name).ok_or_else(|| CorpusError::UnknownModel(name.to_string()))?;
    parse_named(r.source, r.path).map_err(|diagnostics| CorpusError::Broken { name: name.to_string(), diagnostics })
}
