//! Confidentiality and integrity invariants, and the overall verdict.
//!
//! Confidentiality is checked in every reachable state: the value of a CONF
//! slot for the running session must not be attacker-derivable. Integrity is
//! checked when the finisher commits. A protected slot holding a value other
//! than the honest one is a breach outright; a slot holding the honest value
//! but carrying a Fabricated or Replayed tag must be backed by a mechanism
//! the commit subject could have used to reject a tampered value.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{EngineError, GlobalState, Limits, Machine, ResourceStatus, SearchResult, Trace, VariantTag};
use crate::model::{InvariantDecl, InvariantKind, ProtocolModel, Slot};
use crate::term::{can_derive, KnowledgeSet, Term};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Fabrication,
    Replay,
    Disclosure,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::Fabrication => "fabrication",
            ViolationKind::Replay => "replay",
            ViolationKind::Disclosure => "disclosure",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ViolationKey {
    pub invariant: String,
    pub kind: ViolationKind,
    pub slot: Slot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    pub kind: ViolationKind,
    pub slot: Slot,
    pub explanation: String,
    pub trace: Trace,
}

impl Violation {
    pub fn key(&self) -> ViolationKey {
        ViolationKey { invariant: self.invariant.clone(), kind: self.kind, slot: self.slot.clone() }
    }
}

/// How a commit subject can reject a tampered value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Equal to a value the subject holds privately.
    KnownGood,
    /// A certificate whose issuer chains to a key the subject trusts.
    CertChain,
    /// Covered by a signature whose key chains to a trusted root.
    SignedWithChain,
    /// Such a signature also covers a nonce the subject made this session.
    FreshNonce,
    /// Recomputable from values the subject already trusts.
    SelfConsistent,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::KnownGood => "known-good",
            Mechanism::CertChain => "cert-chain",
            Mechanism::SignedWithChain => "signed-with-chain",
            Mechanism::FreshNonce => "fresh-nonce",
            Mechanism::SelfConsistent => "self-consistent",
        })
    }
}

/// Which mechanisms cover a protected slot at the honest commit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discharge {
    pub invariant: String,
    pub slot: Slot,
    pub fabrication: Option<Mechanism>,
    pub replay: Option<Mechanism>,
}

/// True when `value` is derivable in plaintext from `k`.
pub fn leaks(k: &KnowledgeSet, value: &Term) -> bool {
    can_derive(k, value)
}

pub fn check_confidentiality(
    m: &Machine<'_>,
    st: &GlobalState,
    decl: &InvariantDecl,
) -> Option<(ViolationKey, String)> {
    let InvariantKind::Confidentiality(slot) = &decl.kind else { return None };
    let value = m.benign().expected_value(st.session, slot).cloned().or_else(|| {
        let i = m.model.subject_index(&slot.subject)?;
        let b = st.locals[i].bindings.get(&slot.field)?;
        (b.tag == VariantTag::Pristine).then(|| b.term.clone())
    })?;
    if leaks(&st.knowledge, &value) {
        let key = ViolationKey { invariant: decl.id.clone(), kind: ViolationKind::Disclosure, slot: slot.clone() };
        Some((key, format!("attacker can derive {value}, the value of CONF slot {slot}")))
    } else {
        None
    }
}

/// Mechanism analysis for one subject in one state.
pub struct MechanismContext<'a> {
    subject: &'a str,
    session: u32,
    knowledge: &'a KnowledgeSet,
    private: BTreeSet<Term>,
    trusted_keys: BTreeSet<Term>,
    validated_sigs: Vec<Term>,
}

fn collect_sigs<'t>(t: &'t Term, out: &mut Vec<&'t Term>) {
    for s in t.subterms() {
        if matches!(s, Term::Sig(_, k) if matches!(**k, Term::PrivKey(_))) {
            out.push(s);
        }
    }
}

impl<'a> MechanismContext<'a> {
    pub fn new(m: &'a Machine<'_>, st: &'a GlobalState, subject: usize) -> Self {
        let subj = &m.model.subjects[subject];
        let local = &st.locals[subject];
        let private: BTreeSet<Term> = local
            .bindings
            .values()
            .filter(|b| b.trusted && b.tag == VariantTag::Pristine)
            .map(|b| b.term.clone())
            .collect();
        let mut sigs: Vec<&Term> = Vec::new();
        for b in local.bindings.values() {
            collect_sigs(&b.term, &mut sigs);
        }
        sigs.sort();
        sigs.dedup();
        let sound_key = |id: &str| !can_derive(&st.knowledge, &Term::PrivKey(id.to_string()));
        let mut trusted_keys: BTreeSet<Term> =
            private.iter().filter(|t| matches!(t, Term::PubKey(_))).cloned().collect();
        loop {
            let mut grew = false;
            for s in &sigs {
                if let Term::Sig(p, k) = s {
                    if let (Term::PubKey(_), Term::PrivKey(issuer)) = (&**p, &**k) {
                        if trusted_keys.contains(&Term::PubKey(issuer.clone()))
                            && sound_key(issuer)
                            && trusted_keys.insert((**p).clone())
                        {
                            grew = true;
                        }
                    }
                }
            }
            if !grew {
                break;
            }
        }
        let validated_sigs = sigs
            .into_iter()
            .filter(|s| match s {
                Term::Sig(_, k) => match &**k {
                    Term::PrivKey(id) => trusted_keys.contains(&Term::PubKey(id.clone())) && sound_key(id),
                    _ => false,
                },
                _ => false,
            })
            .cloned()
            .collect();
        MechanismContext {
            subject: &subj.id,
            session: st.session,
            knowledge: &st.knowledge,
            private,
            trusted_keys,
            validated_sigs,
        }
    }

    fn is_cert(&self, v: &Term) -> bool {
        matches!(v, Term::Sig(p, _) if matches!(**p, Term::PubKey(_))) && self.validated_sigs.contains(v)
    }

    fn signed(&self, v: &Term) -> Option<&Term> {
        self.validated_sigs.iter().find(|s| match s {
            Term::Sig(p, _) => *s == v || p.contains(v),
            _ => false,
        })
    }

    fn recomputable(&self, v: &Term) -> bool {
        if self.private.contains(v) {
            return true;
        }
        match v {
            Term::Hash(_) | Term::Func(..) | Term::Tuple(_) => v.children().iter().all(|c| self.recomputable(c)),
            _ => false,
        }
    }

    fn fresh(&self, sig: &Term) -> bool {
        let Term::Sig(p, _) = sig else { return false };
        p.subterms().iter().any(
            |t| matches!(t, Term::Nonce { owner, session, .. } if owner == self.subject && *session == self.session),
        )
    }

    pub fn against_fabrication(&self, v: &Term) -> Option<Mechanism> {
        if self.private.contains(v) {
            Some(Mechanism::KnownGood)
        } else if self.is_cert(v) {
            Some(Mechanism::CertChain)
        } else if self.signed(v).is_some() {
            Some(Mechanism::SignedWithChain)
        } else if self.recomputable(v) {
            Some(Mechanism::SelfConsistent)
        } else {
            None
        }
    }

    pub fn against_replay(&self, v: &Term) -> Option<Mechanism> {
        if self.private.contains(v) {
            return Some(Mechanism::KnownGood);
        }
        let fresh = self.validated_sigs.iter().any(|s| match s {
            Term::Sig(p, _) => (s == v || p.contains(v)) && self.fresh(s),
            _ => false,
        });
        if fresh {
            Some(Mechanism::FreshNonce)
        } else if self.is_cert(v) {
            Some(Mechanism::CertChain)
        } else {
            None
        }
    }

    pub fn trusted_keys(&self) -> &BTreeSet<Term> {
        &self.trusted_keys
    }

    pub fn attacker_knowledge(&self) -> &KnowledgeSet {
        self.knowledge
    }
}

pub fn check_integrity(m: &Machine<'_>, st: &GlobalState, decl: &InvariantDecl) -> Vec<(ViolationKey, String)> {
    let InvariantKind::Integrity { commit_subject, protected } = &decl.kind else { return Vec::new() };
    let Some(ci) = m.model.subject_index(commit_subject) else { return Vec::new() };
    let benign = m.benign();
    let mut out = Vec::new();
    let mut ctx: Option<MechanismContext<'_>> = None;
    for slot in protected {
        let Some(i) = m.model.subject_index(&slot.subject) else { continue };
        let Some(b) = st.locals[i].bindings.get(&slot.field) else { continue };
        let Some(expected) = benign.expected_value(st.session, slot) else { continue };
        let key = |kind| ViolationKey { invariant: decl.id.clone(), kind, slot: slot.clone() };
        if &b.term != expected {
            // A replayed message may carry a value fabricated earlier, so only
            // an honest value from an older session counts as stale.
            let stale = (0..st.session).any(|s| benign.expected_value(s, slot) == Some(&b.term));
            let kind = if stale { ViolationKind::Replay } else { ViolationKind::Fabrication };
            out.push((key(kind), format!("{commit_subject} commits with {slot} = {}, expected {expected}", b.term)));
            continue;
        }
        let ctx = ctx.get_or_insert_with(|| MechanismContext::new(m, st, ci));
        match b.tag {
            VariantTag::Pristine => {}
            VariantTag::Fabricated => {
                if ctx.against_fabrication(&b.term).is_none() {
                    out.push((
                        key(ViolationKind::Fabrication),
                        format!("{slot} was supplied by the attacker and nothing lets {commit_subject} check it"),
                    ));
                }
            }
            VariantTag::Replayed => {
                if ctx.against_replay(&b.term).is_none() {
                    out.push((
                        key(ViolationKind::Replay),
                        format!("{slot} was replayed and nothing lets {commit_subject} detect stale values"),
                    ));
                }
            }
        }
    }
    out
}

/// Mechanisms covering every protected slot in the honest commit state of
/// session 0.
pub fn discharges(m: &Machine<'_>) -> Vec<Discharge> {
    let mut out = Vec::new();
    let Some(st) = m.benign().commit_states.first() else { return out };
    for decl in &m.model.invariants {
        let InvariantKind::Integrity { commit_subject, protected } = &decl.kind else { continue };
        let Some(ci) = m.model.subject_index(commit_subject) else { continue };
        let ctx = MechanismContext::new(m, st, ci);
        for slot in protected {
            let Some(i) = m.model.subject_index(&slot.subject) else { continue };
            let Some(b) = st.locals[i].bindings.get(&slot.field) else { continue };
            out.push(Discharge {
                invariant: decl.id.clone(),
                slot: slot.clone(),
                fabrication: ctx.against_fabrication(&b.term),
                replay: ctx.against_replay(&b.term),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail { violations: Vec<Violation> },
    Inconclusive { reason: String },
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail { .. } => "fail",
            Verdict::Inconclusive { .. } => "inconclusive",
        }
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail { .. })
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            Verdict::Fail { violations } => violations,
            _ => &[],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub verdict: Verdict,
    pub search: SearchResult,
    pub discharges: Vec<Discharge>,
    pub sessions: u32,
}

/// Passes iff the honest run commits, the search completes, and no
/// invariant is breached anywhere.
pub fn verify(m: &ProtocolModel, limits: &Limits) -> Result<VerifyOutcome, EngineError> {
    let machine = Machine::new(m, limits)?;
    verify_machine(&machine)
}

pub fn verify_machine(machine: &Machine<'_>) -> Result<VerifyOutcome, EngineError> {
    let search = machine.explore()?;
    let verdict = if !search.violations.is_empty() {
        Verdict::Fail { violations: search.violations.clone() }
    } else if search.resource_status == ResourceStatus::BudgetExceeded {
        Verdict::Inconclusive {
            reason: format!(
                "search budget exhausted after {} states (max_states {}, max_depth {})",
                search.reachable_state_count, machine.limits.max_states, machine.limits.max_depth
            ),
        }
    } else {
        Verdict::Pass
    };
    Ok(VerifyOutcome { verdict, discharges: discharges(machine), search, sessions: machine.sessions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::ping_pong;
    use crate::term::closure;

    fn k(ts: &[Term]) -> KnowledgeSet {
        closure(&ts.iter().cloned().collect(), &BTreeSet::new(), 2).unwrap()
    }

    #[test]
    fn encrypted_secret_stays_secret_without_key() {
        let m = Term::atom("m");
        let kz = Term::sym("K_Z");
        assert!(!leaks(&k(&[Term::enc(m.clone(), kz.clone())]), &m));
        assert!(leaks(&k(&[Term::enc(m.clone(), kz.clone()), kz]), &m));
        assert!(!leaks(&k(&[]), &m));
    }

    #[test]
    fn ping_pong_passes() {
        let out = verify(&ping_pong(), &Limits::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Pass);
    }

    #[test]
    fn unchecked_reply_through_untrusted_relay() {
        let mut m = ping_pong();
        m.subjects[1].trusted = false;
        m.subjects[1].capabilities = crate::model::Capability::ALL.into_iter().collect();
        let out = verify(&m, &Limits::default()).unwrap();
        assert_eq!(out.verdict, Verdict::Pass, "alice checks the nonce she sent");
        m.subjects[0].states[1].transitions[0].guard.clear();
        let out = verify(&m, &Limits::default()).unwrap();
        let v = out.verdict.violations();
        assert!(v.iter().any(|v| v.kind == ViolationKind::Fabrication), "{:?}", out.verdict);
    }

    #[test]
    fn verdict_json_round_trips() {
        let out = verify(&ping_pong(), &Limits::default()).unwrap();
        let json = serde_json::to_string(&out.verdict).unwrap();
        let back: Verdict = serde_json::from_str(&json).unwrap();
        assert_eq!(back, out.verdict);
    }
}
