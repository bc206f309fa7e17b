//! In-memory verification model: subjects as state machines, channels,
//! value tags, trust preconditions and invariant declarations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::term::Term;

/// Largest term depth accepted in a model.
pub const MAX_TERM_DEPTH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Eavesdrop,
    Drop,
    Fabricate,
    Replay,
}

impl Capability {
    pub const ALL: [Capability; 4] =
        [Capability::Eavesdrop, Capability::Drop, Capability::Fabricate, Capability::Replay];

    pub fn keyword(self) -> &'static str {
        match self {
            Capability::Eavesdrop => "eavesdrop",
            Capability::Drop => "drop",
            Capability::Fabricate => "fabricate",
            Capability::Replay => "replay",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Capability> {
        Capability::ALL.into_iter().find(|c| c.keyword() == s)
    }
}

/// Execution phase of a secure architecture the model belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    SystemStartup,
    ProtectionInitialization,
    Runtime,
    ProtectionAttestation,
    ConfigurationUpdate,
    Migration,
    Termination,
    PowerDown,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::SystemStartup,
        Phase::ProtectionInitialization,
        Phase::Runtime,
        Phase::ProtectionAttestation,
        Phase::ConfigurationUpdate,
        Phase::Migration,
        Phase::Termination,
        Phase::PowerDown,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            Phase::SystemStartup => "system_startup",
            Phase::ProtectionInitialization => "protection_initialization",
            Phase::Runtime => "runtime",
            Phase::ProtectionAttestation => "protection_attestation",
            Phase::ConfigurationUpdate => "configuration_update",
            Phase::Migration => "migration",
            Phase::Termination => "termination",
            Phase::PowerDown => "power_down",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.keyword() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    External,
    Internal,
}

/// A term shape with binding variables, used both for receive patterns and
/// (without wildcards or aliases) for send templates and guards.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Lit(Term),
    Var(String),
    Wildcard,
    /// Binds the whole matched value to a variable and matches the inner
    /// pattern against it.
    Bind(String, Box<Pattern>),
    Enc(Box<Pattern>, Box<Pattern>),
    Sig(Box<Pattern>, Box<Pattern>),
    Hash(Box<Pattern>),
    Tuple(Vec<Pattern>),
    Func(String, Vec<Pattern>),
}

impl Pattern {
    pub fn var(name: impl Into<String>) -> Pattern {
        Pattern::Var(name.into())
    }

    pub fn lit(t: Term) -> Pattern {
        Pattern::Lit(t)
    }

    pub fn enc(p: Pattern, k: Pattern) -> Pattern {
        Pattern::Enc(Box::new(p), Box::new(k))
    }

    pub fn sig(p: Pattern, k: Pattern) -> Pattern {
        Pattern::Sig(Box::new(p), Box::new(k))
    }

    pub fn hash(p: Pattern) -> Pattern {
        Pattern::Hash(Box::new(p))
    }

    /// Variables in first-occurrence order.
    pub fn vars(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Pattern::Lit(_) | Pattern::Wildcard => {}
            Pattern::Var(v) => {
                if !out.contains(&v.as_str()) {
                    out.push(v)
                }
            }
            Pattern::Bind(v, inner) => {
                if !out.contains(&v.as_str()) {
                    out.push(v)
                }
                inner.collect_vars(out)
            }
            Pattern::Enc(a, b) | Pattern::Sig(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out)
            }
            Pattern::Hash(a) => a.collect_vars(out),
            Pattern::Tuple(items) | Pattern::Func(_, items) => items.iter().for_each(|i| i.collect_vars(out)),
        }
    }

    pub fn is_template(&self) -> bool {
        match self {
            Pattern::Wildcard | Pattern::Bind(..) => false,
            Pattern::Lit(_) | Pattern::Var(_) => true,
            Pattern::Enc(a, b) | Pattern::Sig(a, b) => a.is_template() && b.is_template(),
            Pattern::Hash(a) => a.is_template(),
            Pattern::Tuple(items) | Pattern::Func(_, items) => items.iter().all(|i| i.is_template()),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Pattern::Lit(t) => t.depth(),
            Pattern::Var(_) | Pattern::Wildcard => 1,
            Pattern::Bind(_, inner) => inner.depth(),
            Pattern::Enc(a, b) | Pattern::Sig(a, b) => 1 + a.depth().max(b.depth()),
            Pattern::Hash(a) => 1 + a.depth(),
            Pattern::Tuple(items) | Pattern::Func(_, items) => 1 + items.iter().map(|i| i.depth()).max().unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuardAtom {
    Eq(Pattern, Pattern),
    Ne(Pattern, Pattern),
    /// `sig` equals the signature of `payload` under the private half of
    /// `key`, which must evaluate to a public key.
    Verify {
        sig: Pattern,
        payload: Pattern,
        key: Pattern,
    },
}

impl GuardAtom {
    pub fn patterns(&self) -> Vec<&Pattern> {
        match self {
            GuardAtom::Eq(a, b) | GuardAtom::Ne(a, b) => vec![a, b],
            GuardAtom::Verify { sig, payload, key } => vec![sig, payload, key],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receive {
    pub channel: String,
    pub pattern: Pattern,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Send {
    pub channel: String,
    pub template: Pattern,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub to: String,
    pub trigger: Option<Receive>,
    pub emit: Option<Send>,
    /// Conjunction; empty means always true.
    pub guard: Vec<GuardAtom>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Start,
    Commit,
    Plain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateNode {
    pub id: String,
    pub kind: StateKind,
    /// Invariants evaluated whenever this state is entered.
    pub on_enter_checks: Vec<String>,
    pub transitions: Vec<Transition>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub name: String,
    pub term: Term,
    /// Known-good values are private; a demoted entry is readable by the
    /// attacker and no longer counts as a trusted reference.
    pub private: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub trusted: bool,
    pub capabilities: BTreeSet<Capability>,
    pub knowledge: Vec<KnowledgeEntry>,
    /// The first state is the initial state.
    pub states: Vec<StateNode>,
}

impl Subject {
    pub fn initial_state(&self) -> Option<&str> {
        self.states.first().map(|s| s.id.as_str())
    }

    pub fn state_index(&self, id: &str) -> Option<usize> {
        self.states.iter().position(|s| s.id == id)
    }

    pub fn knowledge_term(&self, name: &str) -> Option<&Term> {
        self.knowledge.iter().find(|k| k.name == name).map(|k| &k.term)
    }

    /// Every name a template or guard of this subject may refer to.
    pub fn bindable_fields(&self) -> BTreeSet<&str> {
        let mut out: BTreeSet<&str> = self.knowledge.iter().map(|k| k.name.as_str()).collect();
        for s in &self.states {
            for t in &s.transitions {
                if let Some(r) = &t.trigger {
                    out.extend(r.pattern.vars());
                }
            }
        }
        out
    }

    pub fn has_commit(&self) -> bool {
        self.states.iter().any(|s| s.kind == StateKind::Commit)
    }

    pub fn sends_on(&self, channel: &str) -> bool {
        self.states.iter().flat_map(|s| &s.transitions).any(|t| t.emit.as_ref().is_some_and(|e| e.channel == channel))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub id: String,
    /// FIFO and invisible to the attacker. Otherwise the channel is an
    /// attacker-owned unordered multiset.
    pub secure: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TagKind {
    #[serde(rename = "CONF")]
    Conf,
    #[serde(rename = "INTE")]
    Inte,
}

impl TagKind {
    pub fn keyword(self) -> &'static str {
        match self {
            TagKind::Conf => "CONF",
            TagKind::Inte => "INTE",
        }
    }
}

/// A named value held by a subject: a receive-pattern variable or a
/// knowledge entry.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub subject: String,
    pub field: String,
}

impl Slot {
    pub fn new(subject: impl Into<String>, field: impl Into<String>) -> Slot {
        Slot { subject: subject.into(), field: field.into() }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.subject, self.field)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueTag {
    pub slot: Slot,
    pub tag: TagKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreconditionEffect {
    TrustSubject(String),
    GrantPrivate(String, Term),
    SecureChannel(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precondition {
    pub id: String,
    pub effect: PreconditionEffect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InvariantKind {
    Confidentiality(Slot),
    Integrity { commit_subject: String, protected: Vec<Slot> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantDecl {
    pub id: String,
    pub kind: InvariantKind,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpectedVerdict {
    Pass,
    FailWith(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolModel {
    pub name: String,
    pub phase: Phase,
    pub scope: Scope,
    /// How many times the protocol runs back to back against one attacker.
    pub sessions: u32,
    /// Terms the attacker knows from the outset.
    pub public: Vec<Term>,
    pub subjects: Vec<Subject>,
    pub channels: Vec<Channel>,
    pub tags: Vec<ValueTag>,
    pub preconditions: Vec<Precondition>,
    pub invariants: Vec<InvariantDecl>,
    pub expected: Option<ExpectedVerdict>,
}

impl ProtocolModel {
    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    pub fn channel(&self, id: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.id == id)
    }

    pub fn channel_index(&self, id: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.id == id)
    }

    pub fn invariant(&self, id: &str) -> Option<&InvariantDecl> {
        self.invariants.iter().find(|i| i.id == id)
    }

    pub fn is_tagged(&self, slot: &Slot, tag: TagKind) -> bool {
        self.tags.iter().any(|t| t.tag == tag && &t.slot == slot)
    }

    /// The subject holding the start state, if exactly one does.
    pub fn initiator(&self) -> Option<&Subject> {
        let mut it = self.subjects.iter().filter(|s| s.states.iter().any(|st| st.kind == StateKind::Start));
        let first = it.next()?;
        it.next().is_none().then_some(first)
    }

    pub fn finisher(&self) -> Option<&Subject> {
        let mut it = self.subjects.iter().filter(|s| s.has_commit());
        let first = it.next()?;
        it.next().is_none().then_some(first)
    }
}

/// A structured validation or parse finding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: String,
    /// Logical path inside the model, e.g. `subject customer/state s_wait`.
    pub location: String,
    pub message: String,
    pub span: Option<crate::format::SourceSpan>,
}

impl Diagnostic {
    pub fn new(code: &str, location: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { code: code.to_string(), location: location.into(), message: message.into(), span: None }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.span {
            Some(span) => write!(f, "{span}: {} [{}] {}", self.code, self.location, self.message),
            None => write!(f, "{} [{}] {}", self.code, self.location, self.message),
        }
    }
}

/// Checks every structural invariant of the model. Never aborts; an empty
/// result means the model is well formed.
pub fn validate(m: &ProtocolModel) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |code: &str, loc: String, msg: String| out.push(Diagnostic::new(code, loc, msg));

    if m.sessions == 0 {
        push("E_ZERO_SESSIONS", "model".into(), "session count must be at least 1".into());
    }
    for t in &m.public {
        if t.depth() > MAX_TERM_DEPTH {
            push("E_TERM_DEPTH", "model/public".into(), format!("term {t} nests deeper than {MAX_TERM_DEPTH}"));
        }
    }

    let mut seen = BTreeSet::new();
    for c in &m.channels {
        if !seen.insert(c.id.as_str()) {
            push("E_DUP_CHANNEL", format!("channel {}", c.id), "channel declared twice".into());
        }
    }
    let mut seen = BTreeSet::new();
    let mut starts = Vec::new();
    let mut commits = Vec::new();
    for s in &m.subjects {
        let loc = format!("subject {}", s.id);
        if !seen.insert(s.id.as_str()) {
            push("E_DUP_SUBJECT", loc.clone(), "subject declared twice".into());
        }
        if s.trusted && !s.capabilities.is_empty() {
            push("E_TRUSTED_WITH_CAPS", loc.clone(), "trusted subjects cannot hold attacker capabilities".into());
        }
        if s.states.is_empty() {
            push("E_NO_STATES", loc.clone(), "subject has no states".into());
        }
        let mut names = BTreeSet::new();
        for k in &s.knowledge {
            if !names.insert(k.name.as_str()) {
                push("E_DUP_FIELD", format!("{loc}/knows {}", k.name), "knowledge name declared twice".into());
            }
            if k.term.depth() > MAX_TERM_DEPTH {
                push(
                    "E_TERM_DEPTH",
                    format!("{loc}/knows {}", k.name),
                    format!("term nests deeper than {MAX_TERM_DEPTH}"),
                );
            }
        }
        let fields = s.bindable_fields();
        let mut state_ids = BTreeSet::new();
        for st in &s.states {
            let sloc = format!("{loc}/state {}", st.id);
            if !state_ids.insert(st.id.as_str()) {
                push("E_DUP_STATE", sloc.clone(), "state declared twice".into());
            }
            match st.kind {
                StateKind::Start => starts.push(sloc.clone()),
                StateKind::Commit => commits.push(sloc.clone()),
                StateKind::Plain => {}
            }
            for inv in &st.on_enter_checks {
                if m.invariant(inv).is_none() {
                    push("E_UNKNOWN_INVARIANT", sloc.clone(), format!("check names unknown invariant {inv}"));
                }
            }
            for (i, t) in st.transitions.iter().enumerate() {
                let tloc = format!("{sloc}/transition {i}");
                if s.state_index(&t.to).is_none() {
                    push("E_UNKNOWN_STATE", tloc.clone(), format!("goto names unknown state {}", t.to));
                }
                if let Some(r) = &t.trigger {
                    if m.channel(&r.channel).is_none() {
                        push("E_UNKNOWN_CHANNEL", tloc.clone(), format!("unknown channel {}", r.channel));
                    }
                    if r.pattern.depth() > MAX_TERM_DEPTH {
                        push("E_TERM_DEPTH", tloc.clone(), format!("pattern nests deeper than {MAX_TERM_DEPTH}"));
                    }
                }
                let mut used: Vec<&Pattern> = Vec::new();
                if let Some(e) = &t.emit {
                    if m.channel(&e.channel).is_none() {
                        push("E_UNKNOWN_CHANNEL", tloc.clone(), format!("unknown channel {}", e.channel));
                    }
                    if !e.template.is_template() {
                        push(
                            "E_BAD_TEMPLATE",
                            tloc.clone(),
                            "send templates cannot contain wildcards or aliases".into(),
                        );
                    }
                    if e.template.depth() > MAX_TERM_DEPTH {
                        push("E_TERM_DEPTH", tloc.clone(), format!("template nests deeper than {MAX_TERM_DEPTH}"));
                    }
                    used.push(&e.template);
                }
                for g in &t.guard {
                    for p in g.patterns() {
                        if !p.is_template() {
                            push("E_BAD_TEMPLATE", tloc.clone(), "guards cannot contain wildcards or aliases".into());
                        }
                        used.push(p);
                    }
                }
                for p in used {
                    for v in p.vars() {
                        if !fields.contains(v) {
                            push("E_UNBOUND_VAR", tloc.clone(), format!("variable ?{v} is never bound"));
                        }
                    }
                }
            }
        }
    }
    if starts.is_empty() {
        push("E_NO_START", "model".into(), "no subject has a start state".into());
    } else if starts.len() > 1 {
        push("E_MULTI_START", "model".into(), format!("start states: {}", starts.join(", ")));
    }
    if commits.is_empty() {
        push("E_NO_COMMIT", "model".into(), "no subject has a commit state".into());
    } else if commits.len() > 1 {
        push("E_MULTI_COMMIT", "model".into(), format!("commit states: {}", commits.join(", ")));
    }

    let slot_exists =
        |slot: &Slot| m.subject(&slot.subject).is_some_and(|s| s.bindable_fields().contains(slot.field.as_str()));
    for (i, t) in m.tags.iter().enumerate() {
        if !slot_exists(&t.slot) {
            push("E_BAD_TAG_PATH", format!("tag {i}"), format!("{} {} does not name a field", t.tag.keyword(), t.slot));
        }
    }

    let mut seen = BTreeSet::new();
    for p in &m.preconditions {
        let loc = format!("precondition {}", p.id);
        if !seen.insert(p.id.as_str()) {
            push("E_DUP_PRECONDITION", loc.clone(), "precondition declared twice".into());
        }
        match &p.effect {
            PreconditionEffect::TrustSubject(s) => match m.subject(s) {
                None => push("E_BAD_PRECONDITION", loc, format!("unknown subject {s}")),
                Some(sub) if !sub.trusted => {
                    push("E_BAD_PRECONDITION", loc, format!("subject {s} must be declared trusted"))
                }
                _ => {}
            },
            PreconditionEffect::GrantPrivate(s, term) => match m.subject(s) {
                None => push("E_BAD_PRECONDITION", loc, format!("unknown subject {s}")),
                Some(sub) => {
                    if !sub.knowledge.iter().any(|k| &k.term == term && k.private) {
                        push("E_BAD_PRECONDITION", loc, format!("{s} holds no private {term}"));
                    }
                }
            },
            PreconditionEffect::SecureChannel(c) => match m.channel(c) {
                None => push("E_BAD_PRECONDITION", loc, format!("unknown channel {c}")),
                Some(ch) if !ch.secure => {
                    push("E_BAD_PRECONDITION", loc, format!("channel {c} must be declared secure"))
                }
                _ => {}
            },
        }
    }

    let mut seen = BTreeSet::new();
    let finisher = m.finisher().map(|s| s.id.clone());
    for inv in &m.invariants {
        let loc = format!("invariant {}", inv.id);
        if !seen.insert(inv.id.as_str()) {
            push("E_DUP_INVARIANT", loc.clone(), "invariant declared twice".into());
        }
        match &inv.kind {
            InvariantKind::Confidentiality(slot) => {
                if !slot_exists(slot) {
                    push("E_BAD_TAG_PATH", loc.clone(), format!("{slot} does not name a field"));
                } else if !m.is_tagged(slot, TagKind::Conf) {
                    push("E_UNTAGGED_SLOT", loc.clone(), format!("{slot} is not tagged CONF"));
                }
            }
            InvariantKind::Integrity { commit_subject, protected } => {
                if finisher.as_deref() != Some(commit_subject.as_str()) {
                    push("E_BAD_INVARIANT", loc.clone(), format!("{commit_subject} is not the finisher subject"));
                }
                if protected.is_empty() {
                    push("E_BAD_INVARIANT", loc.clone(), "integrity invariant protects no slots".into());
                }
                for slot in protected {
                    if !slot_exists(slot) {
                        push("E_BAD_TAG_PATH", loc.clone(), format!("{slot} does not name a field"));
                    } else if !m.is_tagged(slot, TagKind::Inte) {
                        push("E_UNTAGGED_SLOT", loc.clone(), format!("{slot} is not tagged INTE"));
                    }
                }
            }
        }
    }
    if let Some(ExpectedVerdict::FailWith(id)) = &m.expected {
        if m.invariant(id).is_none() {
            push("E_BAD_EXPECT", "model".into(), format!("expected failure names unknown invariant {id}"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown precondition {0}")]
    UnknownPrecondition(String),
    #[error("model {name} failed validation: {}", .diagnostics.first().map(|d| d.to_string()).unwrap_or_default())]
    Invalid { name: String, diagnostics: Vec<Diagnostic> },
}

/// Derives the model in which only `enabled` trust assumptions hold.
///
/// For every disabled precondition: a trusted subject turns adversarial with
/// all four capabilities (its knowledge becomes attacker knowledge when the
/// engine starts); a granted private value is demoted to attacker-readable
/// and stops serving as a known-good reference; a secure channel reverts to
/// the attacker. The result depends only on the enabled set.
pub fn apply_preconditions(m: &ProtocolModel, enabled: &BTreeSet<String>) -> Result<ProtocolModel, ModelError> {
    for id in enabled {
        if !m.preconditions.iter().any(|p| &p.id == id) {
            return Err(ModelError::UnknownPrecondition(id.clone()));
        }
    }
    let mut out = m.clone();
    let kept: Vec<&PreconditionEffect> =
        m.preconditions.iter().filter(|p| enabled.contains(&p.id)).map(|p| &p.effect).collect();
    // An assumption stays in force while any enabled precondition grants it.
    for p in m.preconditions.iter().filter(|p| !enabled.contains(&p.id) && !kept.contains(&&p.effect)) {
        match &p.effect {
            PreconditionEffect::TrustSubject(s) => {
                if let Some(sub) = out.subjects.iter_mut().find(|x| &x.id == s) {
                    sub.trusted = false;
                    sub.capabilities = Capability::ALL.into_iter().collect();
                }
            }
            PreconditionEffect::GrantPrivate(s, term) => {
                if let Some(sub) = out.subjects.iter_mut().find(|x| &x.id == s) {
                    for k in sub.knowledge.iter_mut().filter(|k| &k.term == term) {
                        k.private = false;
                    }
                }
            }
            PreconditionEffect::SecureChannel(c) => {
                if let Some(ch) = out.channels.iter_mut().find(|x| &x.id == c) {
                    ch.secure = false;
                }
            }
        }
    }
    out.preconditions.retain(|p| enabled.contains(&p.id));
    Ok(out)
}

pub fn precondition_ids(m: &ProtocolModel) -> BTreeSet<String> {
    m.preconditions.iter().map(|p| p.id.clone()).collect()
}

/// Per-subject map from field name to the INTE/CONF tags on it.
pub fn tag_index(m: &ProtocolModel) -> BTreeMap<Slot, BTreeSet<TagKind>> {
    let mut out: BTreeMap<Slot, BTreeSet<TagKind>> = BTreeMap::new();
    for t in &m.tags {
        out.entry(t.slot.clone()).or_default().insert(t.tag);
    }
    out
}


#[cfg(test)]
mod tests {
    use super::fixtures::ping_pong;
    use super::*;

    fn codes(m: &ProtocolModel) -> Vec<String> {
        validate(m).into_iter().map(|d| d.code).collect()
    }

    #[test]
    fn fixture_is_valid() {
        assert_eq!(validate(&ping_pong()), vec![]);
    }

    #[test]
    fn two_start_states_rejected() {
        let mut m = ping_pong();
        m.subjects[1].states[0].kind = StateKind::Start;
        assert!(codes(&m).contains(&"E_MULTI_START".to_string()));
    }

    #[test]
    fn dangling_tag_path_rejected() {
        let mut m = ping_pong();
        m.tags.push(ValueTag { slot: Slot::new("alice", "nope"), tag: TagKind::Conf });
        assert!(codes(&m).contains(&"E_BAD_TAG_PATH".to_string()));
    }

    #[test]
    fn unbound_template_variable_rejected() {
        let mut m = ping_pong();
        m.subjects[1].states[0].transitions[0].emit =
            Some(Send { channel: "ba".into(), template: Pattern::var("ghost") });
        assert!(codes(&m).contains(&"E_UNBOUND_VAR".to_string()));
    }

    #[test]
    fn trusted_subject_with_capabilities_rejected() {
        let mut m = ping_pong();
        m.subjects[0].capabilities.insert(Capability::Drop);
        assert!(codes(&m).contains(&"E_TRUSTED_WITH_CAPS".to_string()));
    }

    #[test]
    fn unknown_goto_rejected() {
        let mut m = ping_pong();
        m.subjects[0].states[0].transitions[0].to = "zz".into();
        assert!(codes(&m).contains(&"E_UNKNOWN_STATE".to_string()));
    }

    #[test]
    fn disabling_trust_grants_every_capability() {
        let mut m = ping_pong();
        m.preconditions.push(Precondition { id: "C1".into(), effect: PreconditionEffect::TrustSubject("bob".into()) });
        let full = apply_preconditions(&m, &precondition_ids(&m)).unwrap();
        assert_eq!(full, m);
        let dropped = apply_preconditions(&m, &BTreeSet::new()).unwrap();
        let bob = dropped.subject("bob").unwrap();
        assert!(!bob.trusted);
        assert_eq!(bob.capabilities.len(), 4);
    }

    #[test]
    fn unknown_precondition_is_an_error() {
        let m = ping_pong();
        let enabled: BTreeSet<String> = ["C9".to_string()].into_iter().collect();
        assert_eq!(apply_preconditions(&m, &enabled), Err(ModelError::UnknownPrecondition("C9".into())));
    }
}
