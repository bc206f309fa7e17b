//! Explicit-state exploration of the global transition system.
//!
//! A global state is the product of every subject's local state, the channel
//! contents, and what the attacker has seen. Honest subjects fire their
//! transitions; the attacker (the union of all untrusted subjects) injects
//! fabricated or replayed messages straight into waiting receivers and drops
//! messages in flight. Every binding carries a [`VariantTag`] so the
//! integrity checker can tell honest values from attacker-supplied ones.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::invariants::{self, Violation, ViolationKey};
use crate::model::{
    validate, Capability, Diagnostic, GuardAtom, InvariantKind, Pattern, ProtocolModel, Slot, StateKind,
};
use crate::term::{can_derive, closure_with_cap, ClosureError, KnowledgeSet, Term, DEFAULT_CLOSURE_CAP};

pub const DEFAULT_MAX_STATES: usize = 1_000_000;
pub const DEFAULT_MAX_DEPTH: usize = 200;
pub const DEFAULT_FAB_DEPTH: usize = 2;

/// Traces kept for commit states; the total is still counted.
const COMMIT_TRACE_KEEP: usize = 8;
/// Upper bound on fabricated candidates per receive.
const MAX_FAB_OPTIONS: usize = 4096;
const BENIGN_STEP_LIMIT: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantTag {
    Pristine,
    Replayed,
    Fabricated,
}

impl VariantTag {
    pub fn worst(self, other: VariantTag) -> VariantTag {
        self.max(other)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bound {
    pub term: Term,
    pub tag: VariantTag,
    /// Held privately or delivered by a trusted subject over a secure
    /// channel, so usable as a known-good reference.
    pub trusted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Local {
    pub state: usize,
    pub bindings: BTreeMap<String, Bound>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Message {
    pub term: Term,
    pub tag: VariantTag,
    pub sender: usize,
    pub trusted: bool,
}

#[derive(Clone, Debug)]
pub struct GlobalState {
    pub locals: Vec<Local>,
    /// Secure channels keep send order; attacker channels are kept sorted
    /// so that equal multisets compare equal.
    pub channels: Vec<Vec<Message>>,
    /// Every term the attacker has observed or started with.
    pub replay_store: Arc<BTreeSet<Term>>,
    /// Closure of `replay_store`; derived, so left out of equality.
    pub knowledge: Arc<KnowledgeSet>,
    pub session: u32,
}

impl PartialEq for GlobalState {
    fn eq(&self, other: &Self) -> bool {
        self.session == other.session
            && self.locals == other.locals
            && self.channels == other.channels
            && self.replay_store == other.replay_store
    }
}

impl Eq for GlobalState {}

impl Hash for GlobalState {
    fn hash<H: Hasher>(&self, h: &mut H) {
        self.session.hash(h);
        self.locals.hash(h);
        self.channels.hash(h);
        self.replay_store.hash(h);
    }
}

/// 128-bit state digest (truncated SHA-256).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fingerprint(pub u128);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        u128::from_str_radix(&s, 16).map(Fingerprint).map_err(serde::de::Error::custom)
    }
}

struct ShaHasher(Sha256);

impl Hasher for ShaHasher {
    fn finish(&self) -> u64 {
        let d = self.0.clone().finalize();
        u64::from_be_bytes(d[..8].try_into().unwrap_or([0; 8]))
    }

    fn write(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }
}

fn digest<T: Hash + ?Sized>(v: &T) -> Fingerprint {
    let mut h = ShaHasher(Sha256::new());
    v.hash(&mut h);
    let d = h.0.finalize();
    let mut b = [0u8; 16];
    b.copy_from_slice(&d[..16]);
    Fingerprint(u128::from_be_bytes(b))
}

pub fn fingerprint(s: &GlobalState) -> Fingerprint {
    digest(s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Step {
    Honest { subject: String, from: String, to: String, received: Option<Term>, sent: Option<(String, Term)> },
    Fabricate { subject: String, channel: String, term: Term },
    Replay { subject: String, channel: String, term: Term },
    Drop { channel: String, term: Term },
    Restart { session: u32 },
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Honest { subject, from, to, received, sent } => {
                write!(f, "{subject}: {from} -> {to}")?;
                if let Some(r) = received {
                    write!(f, ", receives {r}")?;
                }
                if let Some((c, t)) = sent {
                    write!(f, ", sends {t} on {c}")?;
                }
                Ok(())
            }
            Step::Fabricate { subject, channel, term } => {
                write!(f, "attacker fabricates {term} on {channel} for {subject}")
            }
            Step::Replay { subject, channel, term } => {
                write!(f, "attacker replays {term} on {channel} for {subject}")
            }
            Step::Drop { channel, term } => write!(f, "attacker drops {term} from {channel}"),
            Step::Restart { session } => write!(f, "protocol restarts, session {session}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: Step,
    pub fingerprint: Fingerprint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub initial: Fingerprint,
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn terminal(&self) -> Fingerprint {
        self.entries.last().map(|e| e.fingerprint).unwrap_or(self.initial)
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(f, "{:>3}. {}", i + 1, e.step)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceStatus {
    Completed,
    BudgetExceeded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_states: usize,
    pub max_depth: usize,
    /// Overrides the model's own session count.
    pub sessions: Option<u32>,
    pub fab_depth: usize,
    pub workers: usize,
    pub dedup: bool,
    pub closure_cap: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_states: DEFAULT_MAX_STATES,
            max_depth: DEFAULT_MAX_DEPTH,
            sessions: None,
            fab_depth: DEFAULT_FAB_DEPTH,
            workers: 1,
            dedup: true,
            closure_cap: DEFAULT_CLOSURE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("model {name} is invalid: {}", .diagnostics.first().map(|d| d.to_string()).unwrap_or_default())]
    InvalidModel { name: String, diagnostics: Vec<Diagnostic> },
    #[error("E_NO_BENIGN_COMMIT: honest run of {model} stops in {stuck_at} without reaching commit")]
    NoBenignCommit { model: String, stuck_at: String },
    #[error("{0}")]
    Closure(#[from] ClosureError),
    #[error("trace does not replay: step {index} ({step}) is not enabled")]
    TraceMismatch { index: usize, step: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub commit_paths: Vec<Trace>,
    pub commit_states: usize,
    pub reachable_state_count: usize,
    pub transitions: usize,
    pub deadlocks: usize,
    pub max_depth: usize,
    pub violations: Vec<Violation>,
    pub resource_status: ResourceStatus,
}

/// The honest run: expected values and messages for every session.
#[derive(Clone, Debug)]
pub struct BenignRun {
    pub trace: Trace,
    /// Bindings of every subject when the finisher commits, per session.
    pub expected: Vec<BTreeMap<Slot, Term>>,
    /// Message delivered at (session, subject, state, transition).
    pub messages: BTreeMap<(u32, usize, usize, usize), Term>,
    /// The global state at each session's commit.
    pub commit_states: Vec<GlobalState>,
}

impl BenignRun {
    pub fn expected_value(&self, session: u32, slot: &Slot) -> Option<&Term> {
        self.expected.get(session as usize).and_then(|m| m.get(slot))
    }
}

struct Succ {
    step: Step,
    state: GlobalState,
    /// Honest delivery: (subject, state, transition, message).
    receipt: Option<(usize, usize, usize, Term)>,
    honest: bool,
}

/// A validated model compiled for exploration.
pub struct Machine<'m> {
    pub model: &'m ProtocolModel,
    pub sessions: u32,
    pub limits: Limits,
    pub finisher: usize,
    caps: BTreeSet<Capability>,
    untrusted: Vec<bool>,
    injectable: Vec<bool>,
    owners: BTreeSet<String>,
    universe: BTreeSet<Term>,
    kcache: Mutex<HashMap<Fingerprint, Arc<KnowledgeSet>>>,
    benign: Option<BenignRun>,
}

/// Re-stamps every nonce owned by a model subject with `session`.
fn stamp(t: &Term, owners: &BTreeSet<String>, session: u32) -> Term {
    match t {
        Term::Nonce { id, owner, .. } if owners.contains(owner) => {
            Term::Nonce { id: id.clone(), owner: owner.clone(), session }
        }
        Term::Enc(p, k) => Term::enc(stamp(p, owners, session), stamp(k, owners, session)),
        Term::Sig(p, k) => Term::sig(stamp(p, owners, session), stamp(k, owners, session)),
        Term::Hash(p) => Term::hash(stamp(p, owners, session)),
        Term::Tuple(items) => Term::Tuple(items.iter().map(|i| stamp(i, owners, session)).collect()),
        Term::Func(n, items) => Term::Func(n.clone(), items.iter().map(|i| stamp(i, owners, session)).collect()),
        other => other.clone(),
    }
}

fn pattern_literals(p: &Pattern, out: &mut BTreeSet<Term>) {
    match p {
        Pattern::Lit(t) => {
            out.insert(t.clone());
        }
        Pattern::Var(_) | Pattern::Wildcard => {}
        Pattern::Bind(_, inner) | Pattern::Hash(inner) => pattern_literals(inner, out),
        Pattern::Enc(a, b) | Pattern::Sig(a, b) => {
            pattern_literals(a, out);
            pattern_literals(b, out);
        }
        Pattern::Tuple(items) | Pattern::Func(_, items) => items.iter().for_each(|i| pattern_literals(i, out)),
    }
}

/// Matches `term` against `p`. Variables already in `env` must agree.
/// Returns the new bindings only.
pub fn match_pattern(p: &Pattern, term: &Term, env: &BTreeMap<String, Bound>) -> Option<BTreeMap<String, Term>> {
    let mut new = BTreeMap::new();
    if match_into(p, term, env, &mut new) {
        Some(new)
    } else {
        None
    }
}

fn match_into(p: &Pattern, term: &Term, env: &BTreeMap<String, Bound>, new: &mut BTreeMap<String, Term>) -> bool {
    match p {
        Pattern::Lit(t) => t == term,
        Pattern::Wildcard => true,
        Pattern::Var(v) => bind_var(v, term, env, new),
        Pattern::Bind(v, inner) => bind_var(v, term, env, new) && match_into(inner, term, env, new),
        Pattern::Enc(pp, pk) => match term {
            Term::Enc(p2, k2) => match_into(pk, k2, env, new) && match_into(pp, p2, env, new),
            _ => false,
        },
        Pattern::Sig(pp, pk) => match term {
            Term::Sig(p2, k2) => match_into(pk, k2, env, new) && match_into(pp, p2, env, new),
            _ => false,
        },
        Pattern::Hash(pp) => match term {
            Term::Hash(p2) => match_into(pp, p2, env, new),
            _ => false,
        },
        Pattern::Tuple(ps) => match term {
            Term::Tuple(ts) if ts.len() == ps.len() => ps.iter().zip(ts).all(|(p, t)| match_into(p, t, env, new)),
            _ => false,
        },
        Pattern::Func(name, ps) => match term {
            Term::Func(n2, ts) if n2 == name && ts.len() == ps.len() => {
                ps.iter().zip(ts).all(|(p, t)| match_into(p, t, env, new))
            }
            _ => false,
        },
    }
}

fn bind_var(v: &str, term: &Term, env: &BTreeMap<String, Bound>, new: &mut BTreeMap<String, Term>) -> bool {
    if let Some(b) = env.get(v) {
        return &b.term == term;
    }
    match new.get(v) {
        Some(t) => t == term,
        None => {
            new.insert(v.to_string(), term.clone());
            true
        }
    }
}

/// Instantiates a template; `None` if a variable is unbound.
pub fn eval_template(p: &Pattern, env: &BTreeMap<String, Bound>) -> Option<Term> {
    Some(match p {
        Pattern::Lit(t) => t.clone(),
        Pattern::Var(v) => env.get(v)?.term.clone(),
        Pattern::Wildcard | Pattern::Bind(..) => return None,
        Pattern::Enc(a, b) => Term::enc(eval_template(a, env)?, eval_template(b, env)?),
        Pattern::Sig(a, b) => Term::sig(eval_template(a, env)?, eval_template(b, env)?),
        Pattern::Hash(a) => Term::hash(eval_template(a, env)?),
        Pattern::Tuple(items) => Term::Tuple(items.iter().map(|i| eval_template(i, env)).collect::<Option<_>>()?),
        Pattern::Func(n, items) => {
            Term::Func(n.clone(), items.iter().map(|i| eval_template(i, env)).collect::<Option<_>>()?)
        }
    })
}

fn template_tag(p: &Pattern, env: &BTreeMap<String, Bound>) -> VariantTag {
    p.vars().iter().filter_map(|v| env.get(*v)).fold(VariantTag::Pristine, |acc, b| acc.worst(b.tag))
}

pub fn guard_holds(guard: &[GuardAtom], env: &BTreeMap<String, Bound>) -> bool {
    guard.iter().all(|g| match g {
        GuardAtom::Eq(a, b) => matches!((eval_template(a, env), eval_template(b, env)), (Some(x), Some(y)) if x == y),
        GuardAtom::Ne(a, b) => matches!((eval_template(a, env), eval_template(b, env)), (Some(x), Some(y)) if x != y),
        GuardAtom::Verify { sig, payload, key } => {
            match (eval_template(sig, env), eval_template(payload, env), eval_template(key, env)) {
                (Some(s), Some(p), Some(Term::PubKey(id))) => s == Term::sig(p, Term::PrivKey(id)),
                _ => false,
            }
        }
    })
}

fn insert_sorted(v: &mut Vec<Message>, m: Message) {
    let pos = v.binary_search(&m).unwrap_or_else(|p| p);
    v.insert(pos, m);
}

/// One fabricated candidate for a receive pattern.
#[derive(Clone)]
struct FabOpt {
    term: Term,
    binds: BTreeMap<String, Term>,
    /// Variables the attacker chose to deviate. A variable repeated in the
    /// pattern counts once.
    chosen: BTreeSet<String>,
    /// All values differing from the honest base.
    total: usize,
}

struct FabGen<'a> {
    k: &'a KnowledgeSet,
    fab_depth: usize,
    receiver: &'a str,
    /// Values the slot held in other sessions.
    other_sessions: BTreeMap<&'a str, Vec<Term>>,
    keys: Vec<&'a Term>,
    env: &'a BTreeMap<String, Bound>,
}

fn skeleton(t: &Term, leaf: &Term) -> Term {
    match t {
        Term::Enc(p, k) => Term::enc(skeleton(p, leaf), skeleton(k, leaf)),
        Term::Sig(p, k) => Term::sig(skeleton(p, leaf), skeleton(k, leaf)),
        Term::Hash(p) => Term::hash(skeleton(p, leaf)),
        Term::Tuple(items) => Term::Tuple(items.iter().map(|i| skeleton(i, leaf)).collect()),
        Term::Func(n, items) => Term::Func(n.clone(), items.iter().map(|i| skeleton(i, leaf)).collect()),
        _ => leaf.clone(),
    }
}

fn is_key(t: &Term) -> bool {
    matches!(t, Term::SymKey(_) | Term::PubKey(_) | Term::PrivKey(_))
}

impl<'a> FabGen<'a> {
    fn derivable(&self, t: &Term) -> bool {
        can_derive(self.k, t)
    }

    fn leaf_options(&self, var: Option<&str>, base: Option<&Term>) -> Vec<FabOpt> {
        let mut out: Vec<FabOpt> = Vec::new();
        let mut push = |t: Term, chose: bool, base: Option<&Term>| {
            if out.iter().any(|o| o.term == t) {
                return;
            }
            let total = usize::from(base != Some(&t));
            let mut binds = BTreeMap::new();
            let mut chosen = BTreeSet::new();
            if let Some(v) = var {
                binds.insert(v.to_string(), t.clone());
                if chose {
                    chosen.insert(v.to_string());
                }
            }
            out.push(FabOpt { term: t, binds, chosen, total });
        };
        let label = format!("{}.{}", self.receiver, var.unwrap_or("_"));
        let atom = Term::attacker_atom(&label);
        let base_ok = base.filter(|b| self.derivable(b));
        if let Some(b) = base_ok {
            push(b.clone(), false, base);
        } else if base.is_some_and(is_key) {
            for k in self.keys.iter().filter(|k| Some(k.sort()) == base.map(|b| b.sort())) {
                push((*k).clone(), false, base);
            }
        } else {
            push(atom.clone(), false, base);
        }
        if var.is_some() {
            push(atom, true, base);
            if let Some(v) = var {
                for t in self.other_sessions.get(v).into_iter().flatten() {
                    if self.derivable(t) {
                        push(t.clone(), true, base);
                    }
                }
            }
            if let Some(b) = base {
                if b.is_composite() && b.depth() <= self.fab_depth {
                    push(skeleton(b, &Term::attacker_atom(&label)), true, base);
                }
                if is_key(b) {
                    for k in self.keys.iter().filter(|k| k.sort() == b.sort()) {
                        push((*k).clone(), true, base);
                    }
                }
            }
        }
        out
    }

    fn gen(&self, p: &Pattern, base: Option<&Term>) -> Vec<FabOpt> {
        let mut out = match p {
            Pattern::Lit(t) => {
                if self.derivable(t) {
                    vec![FabOpt { term: t.clone(), binds: BTreeMap::new(), chosen: BTreeSet::new(), total: 0 }]
                } else {
                    Vec::new()
                }
            }
            Pattern::Var(v) => match self.env.get(v) {
                Some(b) if self.derivable(&b.term) => {
                    vec![FabOpt { term: b.term.clone(), binds: BTreeMap::new(), chosen: BTreeSet::new(), total: 0 }]
                }
                Some(_) => Vec::new(),
                None => self.leaf_options(Some(v), base),
            },
            Pattern::Wildcard => self.leaf_options(None, base),
            Pattern::Bind(v, inner) => {
                if let Some(b) = self.env.get(v) {
                    match match_pattern(inner, &b.term, self.env) {
                        Some(binds) if self.derivable(&b.term) => {
                            vec![FabOpt { term: b.term.clone(), binds, chosen: BTreeSet::new(), total: 0 }]
                        }
                        _ => Vec::new(),
                    }
                } else {
                    let mut opts = self.gen(inner, base);
                    for o in opts.iter_mut() {
                        o.binds.insert(v.clone(), o.term.clone());
                    }
                    // Old values are reused whole, even when their parts are
                    // opaque to the attacker.
                    for t in self.other_sessions.get(v.as_str()).into_iter().flatten() {
                        if opts.iter().any(|o| &o.term == t) || !self.derivable(t) {
                            continue;
                        }
                        if let Some(mut binds) = match_pattern(inner, t, self.env) {
                            binds.insert(v.clone(), t.clone());
                            let total = usize::from(base != Some(t));
                            opts.push(FabOpt { term: t.clone(), binds, chosen: BTreeSet::from([v.clone()]), total });
                        }
                    }
                    opts
                }
            }
            _ => self.composite(p, base),
        };
        out.truncate(MAX_FAB_OPTIONS);
        out
    }

    fn composite(&self, p: &Pattern, base: Option<&Term>) -> Vec<FabOpt> {
        let mut out = Vec::new();
        // Forward a derivable base message untouched.
        if let Some(b) = base {
            if self.derivable(b) {
                if let Some(new) = match_pattern(p, b, self.env) {
                    out.push(FabOpt { term: b.clone(), binds: new, chosen: BTreeSet::new(), total: 0 });
                }
            }
        }
        let (children, base_children): (Vec<&Pattern>, Vec<Option<&Term>>) = match (p, base) {
            (Pattern::Enc(a, b), Some(Term::Enc(x, y))) | (Pattern::Sig(a, b), Some(Term::Sig(x, y))) => {
                (vec![&**a, &**b], vec![Some(&**x), Some(&**y)])
            }
            (Pattern::Enc(a, b), _) | (Pattern::Sig(a, b), _) => (vec![&**a, &**b], vec![None, None]),
            (Pattern::Hash(a), Some(Term::Hash(x))) => (vec![&**a], vec![Some(&**x)]),
            (Pattern::Hash(a), _) => (vec![&**a], vec![None]),
            (Pattern::Tuple(ps), Some(Term::Tuple(ts))) if ps.len() == ts.len() => {
                (ps.iter().collect(), ts.iter().map(Some).collect())
            }
            (Pattern::Func(n, ps), Some(Term::Func(m, ts))) if n == m && ps.len() == ts.len() => {
                (ps.iter().collect(), ts.iter().map(Some).collect())
            }
            (Pattern::Tuple(ps), _) | (Pattern::Func(_, ps), _) => (ps.iter().collect(), vec![None; ps.len()]),
            _ => return out,
        };
        // Signing needs a derivable key; skip the product early otherwise.
        if let (Pattern::Sig(..), Some(Term::Sig(_, k))) = (p, base) {
            if !self.derivable(k) && self.keys.iter().all(|key| !matches!(key, Term::PrivKey(_))) {
                return out;
            }
        }
        type Partial = (Vec<Term>, BTreeMap<String, Term>, BTreeSet<String>, usize);
        let mut acc: Vec<Partial> = vec![(Vec::new(), BTreeMap::new(), BTreeSet::new(), 0)];
        for (cp, cb) in children.iter().zip(base_children) {
            let opts = self.gen(cp, cb);
            let mut next = Vec::new();
            for (terms, binds, chosen, total) in &acc {
                for o in &opts {
                    let chose: BTreeSet<String> = chosen.union(&o.chosen).cloned().collect();
                    if chose.len() > 1 {
                        continue;
                    }
                    let mut merged = binds.clone();
                    let mut ok = true;
                    for (v, t) in &o.binds {
                        match merged.get(v) {
                            Some(prev) if prev != t => {
                                ok = false;
                                break;
                            }
                            _ => {
                                merged.insert(v.clone(), t.clone());
                            }
                        }
                    }
                    if !ok {
                        continue;
                    }
                    let mut ts = terms.clone();
                    ts.push(o.term.clone());
                    next.push((ts, merged, chose, total + o.total));
                    if next.len() >= MAX_FAB_OPTIONS {
                        break;
                    }
                }
            }
            acc = next;
        }
        for (mut ts, binds, chosen, total) in acc {
            let term = match p {
                Pattern::Enc(..) => {
                    let k = ts.pop().unwrap_or_else(|| Term::atom("_"));
                    Term::enc(ts.pop().unwrap_or_else(|| Term::atom("_")), k)
                }
                Pattern::Sig(..) => {
                    let k = ts.pop().unwrap_or_else(|| Term::atom("_"));
                    Term::sig(ts.pop().unwrap_or_else(|| Term::atom("_")), k)
                }
                Pattern::Hash(_) => Term::hash(ts.pop().unwrap_or_else(|| Term::atom("_"))),
                Pattern::Tuple(_) => Term::Tuple(ts),
                Pattern::Func(n, _) => Term::Func(n.clone(), ts),
                _ => continue,
            };
            if out.iter().any(|o: &FabOpt| o.term == term && o.binds == binds) {
                continue;
            }
            if self.derivable(&term) {
                out.push(FabOpt { term, binds, chosen, total });
            }
        }
        out
    }
}

impl<'m> Machine<'m> {
    pub fn new(model: &'m ProtocolModel, limits: &Limits) -> Result<Machine<'m>, EngineError> {
        let diagnostics = validate(model);
        if !diagnostics.is_empty() {
            return Err(EngineError::InvalidModel { name: model.name.clone(), diagnostics });
        }
        let finisher = model
            .subjects
            .iter()
            .position(|s| s.has_commit())
            .ok_or_else(|| EngineError::NoBenignCommit { model: model.name.clone(), stuck_at: "model".into() })?;
        let untrusted: Vec<bool> = model.subjects.iter().map(|s| !s.trusted).collect();
        let caps: BTreeSet<Capability> =
            model.subjects.iter().filter(|s| !s.trusted).flat_map(|s| s.capabilities.iter().copied()).collect();
        let injectable = model
            .channels
            .iter()
            .map(|c| !c.secure || model.subjects.iter().any(|s| !s.trusted && s.sends_on(&c.id)))
            .collect();
        let owners = model.subjects.iter().map(|s| s.id.clone()).collect();
        let mut universe = BTreeSet::new();
        universe.extend(model.public.iter().cloned());
        for s in &model.subjects {
            universe.extend(s.knowledge.iter().map(|k| k.term.clone()));
            for st in &s.states {
                for t in &st.transitions {
                    if let Some(r) = &t.trigger {
                        pattern_literals(&r.pattern, &mut universe);
                    }
                    if let Some(e) = &t.emit {
                        pattern_literals(&e.template, &mut universe);
                    }
                }
            }
        }
        let mut m = Machine {
            model,
            sessions: limits.sessions.unwrap_or(model.sessions).max(1),
            limits: limits.clone(),
            finisher,
            caps,
            untrusted,
            injectable,
            owners,
            universe,
            kcache: Mutex::new(HashMap::new()),
            benign: None,
        };
        let benign = m.compute_benign()?;
        for msg in benign.messages.values() {
            m.universe.insert(msg.clone());
        }
        for e in &benign.expected {
            m.universe.extend(e.values().cloned());
        }
        m.kcache = Mutex::new(HashMap::new());
        m.benign = Some(benign);
        Ok(m)
    }

    pub fn benign(&self) -> &BenignRun {
        self.benign.as_ref().expect("benign run is computed in Machine::new")
    }

    pub fn attacker_capabilities(&self) -> &BTreeSet<Capability> {
        &self.caps
    }

    pub fn is_finisher_committed(&self, s: &GlobalState) -> bool {
        let subj = &self.model.subjects[self.finisher];
        subj.states[s.locals[self.finisher].state].kind == StateKind::Commit
    }

    fn knowledge_for(&self, store: &Arc<BTreeSet<Term>>) -> Result<Arc<KnowledgeSet>, ClosureError> {
        let key = digest(&**store);
        if let Ok(cache) = self.kcache.lock() {
            if let Some(k) = cache.get(&key) {
                return Ok(k.clone());
            }
        }
        let k = Arc::new(closure_with_cap(store, &self.universe, self.limits.fab_depth, self.limits.closure_cap)?);
        if let Ok(mut cache) = self.kcache.lock() {
            cache.insert(key, k.clone());
        }
        Ok(k)
    }

    fn attacker_base(&self, session: u32) -> BTreeSet<Term> {
        let mut base: BTreeSet<Term> = self.model.public.iter().cloned().collect();
        for s in &self.model.subjects {
            for k in &s.knowledge {
                if !s.trusted || !k.private {
                    base.insert(stamp(&k.term, &self.owners, session));
                }
            }
        }
        base
    }

    fn fresh_locals(&self, session: u32) -> Vec<Local> {
        self.model
            .subjects
            .iter()
            .map(|s| Local {
                state: 0,
                bindings: s
                    .knowledge
                    .iter()
                    .map(|k| {
                        let term = stamp(&k.term, &self.owners, session);
                        let trusted = s.trusted && k.private;
                        (k.name.clone(), Bound { term, tag: VariantTag::Pristine, trusted })
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn initial_state(&self) -> Result<GlobalState, EngineError> {
        let store = Arc::new(self.attacker_base(0));
        let knowledge = self.knowledge_for(&store)?;
        Ok(GlobalState {
            locals: self.fresh_locals(0),
            channels: vec![Vec::new(); self.model.channels.len()],
            replay_store: store,
            knowledge,
            session: 0,
        })
    }

    fn absorb(&self, st: &mut GlobalState, terms: &[Term]) -> Result<(), ClosureError> {
        let fresh: Vec<&Term> = terms.iter().filter(|t| !st.replay_store.contains(*t)).collect();
        if fresh.is_empty() {
            return Ok(());
        }
        let mut store = (*st.replay_store).clone();
        store.extend(fresh.into_iter().cloned());
        st.replay_store = Arc::new(store);
        st.knowledge = self.knowledge_for(&st.replay_store)?;
        Ok(())
    }

    /// Moves subject `i` along transition `ti` with the extra bindings
    /// already merged into `env`, then emits.
    fn fire(
        &self,
        st: &GlobalState,
        i: usize,
        ti: usize,
        env: BTreeMap<String, Bound>,
        observed: &mut Vec<Term>,
    ) -> Option<(GlobalState, Option<(String, Term)>)> {
        let subj = &self.model.subjects[i];
        let tr = &subj.states[st.locals[i].state].transitions[ti];
        if !guard_holds(&tr.guard, &env) {
            return None;
        }
        let mut next = st.clone();
        let mut sent = None;
        if let Some(e) = &tr.emit {
            let term = eval_template(&e.template, &env)?;
            let tag = template_tag(&e.template, &env);
            let ci = self.model.channel_index(&e.channel)?;
            let trusted = !self.untrusted[i]
                && tag == VariantTag::Pristine
                && e.template.vars().iter().all(|v| env.get(*v).is_some_and(|b| b.trusted));
            let msg = Message { term: term.clone(), tag, sender: i, trusted };
            if self.model.channels[ci].secure {
                next.channels[ci].push(msg);
            } else {
                insert_sorted(&mut next.channels[ci], msg);
            }
            let visible = !self.model.channels[ci].secure && self.caps.contains(&Capability::Eavesdrop);
            if visible || self.untrusted[i] {
                observed.push(term.clone());
            }
            sent = Some((e.channel.clone(), term));
        }
        next.locals[i] = Local { state: subj.state_index(&tr.to)?, bindings: env };
        Some((next, sent))
    }

    fn successors(&self, st: &GlobalState, honest_only: bool) -> Result<Vec<Succ>, EngineError> {
        let mut out = Vec::new();
        let model = self.model;
        for (i, subj) in model.subjects.iter().enumerate() {
            let local = &st.locals[i];
            let node = &subj.states[local.state];
            for (ti, tr) in node.transitions.iter().enumerate() {
                let Some(r) = &tr.trigger else {
                    let mut observed = Vec::new();
                    if let Some((mut next, sent)) = self.fire(st, i, ti, local.bindings.clone(), &mut observed) {
                        self.absorb(&mut next, &observed)?;
                        out.push(Succ {
                            step: Step::Honest {
                                subject: subj.id.clone(),
                                from: node.id.clone(),
                                to: tr.to.clone(),
                                received: None,
                                sent,
                            },
                            state: next,
                            receipt: None,
                            honest: true,
                        });
                    }
                    continue;
                };
                let Some(ci) = model.channel_index(&r.channel) else { continue };
                let queue = &st.channels[ci];
                let picks: Vec<usize> = if model.channels[ci].secure {
                    (0..queue.len().min(1)).collect()
                } else {
                    (0..queue.len()).filter(|&k| k == 0 || queue[k] != queue[k - 1]).collect()
                };
                for k in picks {
                    let msg = &queue[k];
                    let Some(new) = match_pattern(&r.pattern, &msg.term, &local.bindings) else { continue };
                    let mut env = local.bindings.clone();
                    for (v, t) in new {
                        let trusted = msg.trusted && model.channels[ci].secure;
                        env.insert(v, Bound { term: t, tag: msg.tag, trusted });
                    }
                    let mut observed = Vec::new();
                    if self.untrusted[i] {
                        observed.push(msg.term.clone());
                    }
                    let mut base = st.clone();
                    base.channels[ci].remove(k);
                    if let Some((mut next, sent)) = self.fire(&base, i, ti, env, &mut observed) {
                        self.absorb(&mut next, &observed)?;
                        out.push(Succ {
                            step: Step::Honest {
                                subject: subj.id.clone(),
                                from: node.id.clone(),
                                to: tr.to.clone(),
                                received: Some(msg.term.clone()),
                                sent,
                            },
                            state: next,
                            receipt: Some((i, local.state, ti, msg.term.clone())),
                            honest: true,
                        });
                    }
                }
            }
        }
        if !honest_only {
            self.attacker_successors(st, &mut out)?;
        }
        if self.is_finisher_committed(st) && st.session + 1 < self.sessions {
            let session = st.session + 1;
            let mut next = GlobalState {
                locals: self.fresh_locals(session),
                channels: vec![Vec::new(); model.channels.len()],
                replay_store: st.replay_store.clone(),
                knowledge: st.knowledge.clone(),
                session,
            };
            let base: Vec<Term> = self.attacker_base(session).into_iter().collect();
            self.absorb(&mut next, &base)?;
            out.push(Succ { step: Step::Restart { session }, state: next, receipt: None, honest: true });
        }
        Ok(out)
    }

    fn attacker_successors(&self, st: &GlobalState, out: &mut Vec<Succ>) -> Result<(), EngineError> {
        let model = self.model;
        if self.caps.is_empty() {
            return Ok(());
        }
        let fabricate = self.caps.contains(&Capability::Fabricate);
        let replay = self.caps.contains(&Capability::Replay);
        // A compromised finisher may act on any input, on any channel, and
        // its commit is still checked. Other untrusted receivers are skipped:
        // whatever they would emit the attacker can inject directly.
        for (i, subj) in model.subjects.iter().enumerate() {
            let compromised_finisher = self.untrusted[i] && i == self.finisher;
            if self.untrusted[i] && !compromised_finisher {
                continue;
            }
            let local = &st.locals[i];
            let node = &subj.states[local.state];
            for (ti, tr) in node.transitions.iter().enumerate() {
                let Some(r) = &tr.trigger else { continue };
                let Some(ci) = model.channel_index(&r.channel) else { continue };
                if !self.injectable[ci] && !compromised_finisher {
                    continue;
                }
                let in_flight = |t: &Term| st.channels[ci].iter().any(|m| &m.term == t);
                if fabricate {
                    for term_env in self.fabrications(st, i, local.state, ti) {
                        let (term, binds) = term_env;
                        if st.replay_store.contains(&term) || in_flight(&term) {
                            continue;
                        }
                        let mut env = local.bindings.clone();
                        for (v, t) in binds {
                            env.insert(v, Bound { term: t, tag: VariantTag::Fabricated, trusted: false });
                        }
                        let mut observed = Vec::new();
                        if let Some((mut next, _)) = self.fire(st, i, ti, env, &mut observed) {
                            self.absorb(&mut next, &observed)?;
                            out.push(Succ {
                                step: Step::Fabricate { subject: subj.id.clone(), channel: r.channel.clone(), term },
                                state: next,
                                receipt: None,
                                honest: false,
                            });
                        }
                    }
                }
                if replay {
                    for term in st.replay_store.iter() {
                        if in_flight(term) {
                            continue;
                        }
                        let Some(new) = match_pattern(&r.pattern, term, &local.bindings) else { continue };
                        let mut env = local.bindings.clone();
                        for (v, t) in new {
                            env.insert(v, Bound { term: t, tag: VariantTag::Replayed, trusted: false });
                        }
                        let mut observed = Vec::new();
                        if let Some((mut next, _)) = self.fire(st, i, ti, env, &mut observed) {
                            self.absorb(&mut next, &observed)?;
                            out.push(Succ {
                                step: Step::Replay {
                                    subject: subj.id.clone(),
                                    channel: r.channel.clone(),
                                    term: term.clone(),
                                },
                                state: next,
                                receipt: None,
                                honest: false,
                            });
                        }
                    }
                }
            }
        }
        if self.caps.contains(&Capability::Drop) {
            for (ci, queue) in st.channels.iter().enumerate() {
                if model.channels[ci].secure {
                    continue;
                }
                for k in 0..queue.len() {
                    if k > 0 && queue[k] == queue[k - 1] {
                        continue;
                    }
                    let mut next = st.clone();
                    let msg = next.channels[ci].remove(k);
                    out.push(Succ {
                        step: Step::Drop { channel: model.channels[ci].id.clone(), term: msg.term },
                        state: next,
                        receipt: None,
                        honest: false,
                    });
                }
            }
        }
        Ok(())
    }

    /// Derivable messages matching a receive pattern, built from the honest
    /// message by changing at most one INTE-tagged value.
    fn fabrications(&self, st: &GlobalState, i: usize, state: usize, ti: usize) -> Vec<(Term, BTreeMap<String, Term>)> {
        let subj = &self.model.subjects[i];
        let Some(r) = &subj.states[state].transitions[ti].trigger else { return Vec::new() };
        let benign = self.benign();
        let mut bases: Vec<Option<&Term>> = Vec::new();
        for s in (0..=st.session).rev() {
            if let Some(t) = benign.messages.get(&(s, i, state, ti)) {
                if !bases.contains(&Some(t)) {
                    bases.push(Some(t));
                }
            }
        }
        if bases.is_empty() {
            bases.push(None);
        }
        let mut other_sessions: BTreeMap<&str, Vec<Term>> = BTreeMap::new();
        for f in r.pattern.vars() {
            let slot = Slot::new(subj.id.clone(), f);
            let vals: Vec<Term> = (0..=st.session)
                .filter(|s| *s != st.session)
                .filter_map(|s| benign.expected_value(s, &slot).cloned())
                .collect();
            other_sessions.insert(f, vals);
        }
        let keys: Vec<&Term> = st.knowledge.terms().iter().filter(|t| is_key(t)).collect();
        let g = FabGen {
            k: &st.knowledge,
            fab_depth: self.limits.fab_depth,
            receiver: &subj.id,
            other_sessions,
            keys,
            env: &st.locals[i].bindings,
        };
        let mut out: Vec<(Term, BTreeMap<String, Term>)> = Vec::new();
        for base in bases {
            for o in g.gen(&r.pattern, base) {
                if o.total == 0 {
                    continue;
                }
                if !out.iter().any(|(t, b)| *t == o.term && *b == o.binds) {
                    out.push((o.term, o.binds));
                }
            }
        }
        out
    }

    fn compute_benign(&self) -> Result<BenignRun, EngineError> {
        let mut st = self.initial_state()?;
        let mut entries = Vec::new();
        let initial = fingerprint(&st);
        let mut expected = Vec::new();
        let mut messages = BTreeMap::new();
        let mut commit_states = Vec::new();
        for _ in 0..BENIGN_STEP_LIMIT {
            if self.is_finisher_committed(&st) && expected.len() == st.session as usize {
                let mut vals = BTreeMap::new();
                for (subj, local) in self.model.subjects.iter().zip(&st.locals) {
                    for (f, b) in &local.bindings {
                        vals.insert(Slot::new(subj.id.clone(), f.clone()), b.term.clone());
                    }
                }
                expected.push(vals);
                commit_states.push(st.clone());
                if st.session + 1 >= self.sessions {
                    return Ok(BenignRun { trace: Trace { initial, entries }, expected, messages, commit_states });
                }
            }
            let succs = self.successors(&st, true)?;
            let committed = self.is_finisher_committed(&st);
            // Once committed, restart before anything else.
            let pick = if committed {
                succs.into_iter().find(|s| matches!(s.step, Step::Restart { .. }))
            } else {
                succs.into_iter().find(|s| s.honest && !matches!(s.step, Step::Restart { .. }))
            };
            let Some(next) = pick else { break };
            if let Some((i, state, ti, term)) = next.receipt {
                messages.insert((st.session, i, state, ti), term);
            }
            let fp = fingerprint(&next.state);
            entries.push(TraceEntry { step: next.step, fingerprint: fp });
            st = next.state;
        }
        let stuck_at = self
            .model
            .subjects
            .iter()
            .zip(&st.locals)
            .map(|(s, l)| format!("{}.{}", s.id, s.states[l.state].id))
            .collect::<Vec<_>>()
            .join(", ");
        Err(EngineError::NoBenignCommit { model: self.model.name.clone(), stuck_at })
    }

    /// Re-executes a trace from the initial state, returning its terminal
    /// state. Every step must be enabled and land on the recorded
    /// fingerprint.
    pub fn replay_trace(&self, trace: &Trace) -> Result<GlobalState, EngineError> {
        let mut st = self.initial_state()?;
        if fingerprint(&st) != trace.initial {
            return Err(EngineError::TraceMismatch { index: 0, step: "initial state".into() });
        }
        for (index, e) in trace.entries.iter().enumerate() {
            let next = self
                .successors(&st, false)?
                .into_iter()
                .find(|s| s.step == e.step && fingerprint(&s.state) == e.fingerprint);
            match next {
                Some(s) => st = s.state,
                None => return Err(EngineError::TraceMismatch { index, step: e.step.to_string() }),
            }
        }
        Ok(st)
    }

    /// Every enabled step from `st`, honest and attacker, in exploration order.
    pub fn next_states(&self, st: &GlobalState) -> Result<Vec<(Step, GlobalState)>, EngineError> {
        Ok(self.successors(st, false)?.into_iter().map(|s| (s.step, s.state)).collect())
    }

    /// Invariant checks that apply to a single state.
    pub fn check_state(&self, st: &GlobalState) -> Vec<(ViolationKey, String)> {
        let mut out = Vec::new();
        for decl in &self.model.invariants {
            match &decl.kind {
                InvariantKind::Confidentiality(_) => {
                    if let Some(v) = invariants::check_confidentiality(self, st, decl) {
                        out.push(v);
                    }
                }
                InvariantKind::Integrity { .. } => {
                    let entered_check = self.model.subjects[self.finisher].states[st.locals[self.finisher].state]
                        .on_enter_checks
                        .contains(&decl.id);
                    if self.is_finisher_committed(st) || entered_check {
                        out.extend(invariants::check_integrity(self, st, decl));
                    }
                }
            }
        }
        out
    }

    pub fn explore(&self) -> Result<SearchResult, EngineError> {
        type Expanded = (Step, GlobalState, Fingerprint, Vec<(ViolationKey, String)>);
        struct Node {
            state: GlobalState,
            parent: Option<usize>,
            step: Option<Step>,
            fp: Fingerprint,
            depth: usize,
        }
        let init = self.initial_state()?;
        let fp0 = fingerprint(&init);
        let mut nodes = vec![Node { state: init, parent: None, step: None, fp: fp0, depth: 0 }];
        let mut visited: HashSet<Fingerprint> = HashSet::new();
        visited.insert(fp0);

        let trace_of = |nodes: &Vec<Node>, mut id: usize| {
            let mut entries = Vec::new();
            while let (Some(p), Some(step)) = (nodes[id].parent, nodes[id].step.clone()) {
                entries.push(TraceEntry { step, fingerprint: nodes[id].fp });
                id = p;
            }
            entries.reverse();
            Trace { initial: fp0, entries }
        };

        let mut found: BTreeMap<ViolationKey, (usize, String)> = BTreeMap::new();
        let mut found_order: Vec<ViolationKey> = Vec::new();
        let mut record =
            |found: &mut BTreeMap<ViolationKey, (usize, String)>, id: usize, vs: Vec<(ViolationKey, String)>| {
                for (key, text) in vs {
                    if let std::collections::btree_map::Entry::Vacant(e) = found.entry(key) {
                        found_order.push(e.key().clone());
                        e.insert((id, text));
                    }
                }
            };
        record(&mut found, 0, self.check_state(&nodes[0].state));

        let mut commit_ids = Vec::new();
        let mut commit_states = 0usize;
        if self.is_finisher_committed(&nodes[0].state) {
            commit_ids.push(0);
            commit_states += 1;
        }
        let mut status = ResourceStatus::Completed;
        let mut deadlocks = 0usize;
        let mut transitions = 0usize;
        let mut max_depth = 0usize;
        let mut frontier = vec![0usize];
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.limits.workers.max(1)).build().ok();

        'outer: while !frontier.is_empty() {
            let expand = |id: &usize| -> Result<Vec<Expanded>, EngineError> {
                let succs = self.successors(&nodes[*id].state, false)?;
                Ok(succs
                    .into_iter()
                    .map(|s| {
                        let fp = fingerprint(&s.state);
                        let v = self.check_state(&s.state);
                        (s.step, s.state, fp, v)
                    })
                    .collect())
            };
            let expanded: Vec<Result<_, EngineError>> = match (&pool, self.limits.workers > 1) {
                (Some(pool), true) => pool.install(|| frontier.par_iter().map(expand).collect()),
                _ => frontier.iter().map(expand).collect(),
            };
            let mut next_frontier = Vec::new();
            for (&parent, succs) in frontier.iter().zip(expanded) {
                let succs = match succs {
                    Ok(s) => s,
                    Err(EngineError::Closure(_)) => {
                        status = ResourceStatus::BudgetExceeded;
                        break 'outer;
                    }
                    Err(e) => return Err(e),
                };
                let depth = nodes[parent].depth + 1;
                if succs.is_empty() && !self.is_finisher_committed(&nodes[parent].state) {
                    deadlocks += 1;
                }
                if !succs.is_empty() && depth > self.limits.max_depth {
                    status = ResourceStatus::BudgetExceeded;
                    continue;
                }
                for (step, state, fp, vs) in succs {
                    transitions += 1;
                    if self.limits.dedup && !visited.insert(fp) {
                        continue;
                    }
                    if nodes.len() >= self.limits.max_states {
                        status = ResourceStatus::BudgetExceeded;
                        break 'outer;
                    }
                    let id = nodes.len();
                    let committed = self.is_finisher_committed(&state);
                    nodes.push(Node { state, parent: Some(parent), step: Some(step), fp, depth });
                    max_depth = max_depth.max(depth);
                    record(&mut found, id, vs);
                    if committed {
                        commit_states += 1;
                        if commit_ids.len() < COMMIT_TRACE_KEEP {
                            commit_ids.push(id);
                        }
                    }
                    next_frontier.push(id);
                }
            }
            frontier = next_frontier;
        }

        let violations = found_order
            .iter()
            .filter_map(|key| {
                let (id, text) = found.get(key)?;
                Some(Violation {
                    invariant: key.invariant.clone(),
                    kind: key.kind,
                    slot: key.slot.clone(),
                    explanation: text.clone(),
                    trace: trace_of(&nodes, *id),
                })
            })
            .collect();
        Ok(SearchResult {
            commit_paths: commit_ids.iter().map(|&id| trace_of(&nodes, id)).collect(),
            commit_states,
            reachable_state_count: nodes.len(),
            transitions,
            deadlocks,
            max_depth,
            violations,
            resource_status: status,
        })
    }
}

/// Explores `m` under `limits`.
pub fn explore(m: &ProtocolModel, limits: &Limits) -> Result<SearchResult, EngineError> {
    Machine::new(m, limits)?.explore()
}

/// The honest run with every attacker capability idle.
pub fn benign_run(m: &ProtocolModel, limits: &Limits) -> Result<BenignRun, EngineError> {
    let machine = Machine::new(m, limits)?;
    Ok(machine.benign().clone())
}
