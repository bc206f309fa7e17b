//! Shared generators and reference implementations for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet, VecDeque};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;

use svmcheck::engine::{GlobalState, Machine};
use svmcheck::format::canonical;
use svmcheck::invariants::ViolationKey;
use svmcheck::model::*;
use svmcheck::term::Term;

// ---------------------------------------------------------------------------
// Knowledge closure oracle

/// Textbook fixpoint: apply every analysis rule and every synthesis rule over
/// the candidate pool until nothing changes. Quadratic and proud of it.
pub fn oracle_closure(base: &BTreeSet<Term>, universe: &BTreeSet<Term>) -> BTreeSet<Term> {
    let mut pool: BTreeSet<Term> = BTreeSet::new();
    for t in universe.iter().chain(base.iter()) {
        for s in t.subterms() {
            if s.is_composite() {
                pool.insert(s.clone());
            }
        }
    }
    let mut known = base.clone();
    loop {
        let mut add: BTreeSet<Term> = BTreeSet::new();
        for t in &known {
            match t {
                Term::Tuple(items) => add.extend(items.iter().cloned()),
                Term::Sig(p, _) => {
                    add.insert((**p).clone());
                }
                Term::Enc(p, k) if known.contains(&Term::decryption_key(k)) => {
                    add.insert((**p).clone());
                }
                _ => {}
            }
        }
        for c in &pool {
            if c.children().iter().all(|ch| known.contains(*ch)) {
                add.insert(c.clone());
            }
        }
        let before = known.len();
        known.extend(add);
        if known.len() == before {
            return known;
        }
    }
}

// ---------------------------------------------------------------------------
// Random terms

const ATOMS: &[&str] = &["A", "B", "M", "VID", "PROP"];
const KEY_IDS: &[&str] = &["K1", "K2", "K3"];
const OWNERS: &[&str] = &["alice", "bob"];
const FUNCS: &[&str] = &["report", "mix"];

pub fn random_leaf(rng: &mut StdRng) -> Term {
    match rng.gen_range(0..5) {
        0 => Term::atom(*ATOMS.choose(rng).unwrap()),
        1 => Term::Nonce {
            id: format!("N{}", rng.gen_range(0..3)),
            owner: OWNERS.choose(rng).unwrap().to_string(),
            session: rng.gen_range(0..2),
        },
        2 => Term::SymKey(KEY_IDS.choose(rng).unwrap().to_string()),
        3 => Term::PubKey(KEY_IDS.choose(rng).unwrap().to_string()),
        _ => Term::PrivKey(KEY_IDS.choose(rng).unwrap().to_string()),
    }
}

/// A term of depth at most `depth` (leaves have depth 1).
pub fn random_term(rng: &mut StdRng, depth: usize) -> Term {
    if depth <= 1 || rng.gen_bool(0.35) {
        return random_leaf(rng);
    }
    let d = depth - 1;
    match rng.gen_range(0..5) {
        0 => Term::enc(random_term(rng, d), random_key_or_term(rng, d)),
        1 => Term::sig(random_term(rng, d), Term::PrivKey(KEY_IDS.choose(rng).unwrap().to_string())),
        2 => Term::hash(random_term(rng, d)),
        3 => Term::tuple((0..rng.gen_range(1..=3)).map(|_| random_term(rng, d)).collect()),
        _ => Term::func(*FUNCS.choose(rng).unwrap(), (0..rng.gen_range(1..=2)).map(|_| random_term(rng, d)).collect()),
    }
}

fn random_key_or_term(rng: &mut StdRng, depth: usize) -> Term {
    if rng.gen_bool(0.8) {
        match rng.gen_range(0..3) {
            0 => Term::SymKey(KEY_IDS.choose(rng).unwrap().to_string()),
            1 => Term::PubKey(KEY_IDS.choose(rng).unwrap().to_string()),
            _ => Term::atom(*ATOMS.choose(rng).unwrap()),
        }
    } else {
        random_term(rng, depth)
    }
}

/// Up to `max` base terms of depth at most 3, plus a universe of extra
/// target terms built partly from the same material.
pub fn random_knowledge(rng: &mut StdRng, max: usize) -> (BTreeSet<Term>, BTreeSet<Term>) {
    let n = rng.gen_range(0..=max);
    let base: BTreeSet<Term> = (0..n).map(|_| random_term(rng, 3)).collect();
    let pieces: Vec<Term> = base.iter().flat_map(|t| t.subterms().into_iter().cloned()).collect();
    let mut universe = BTreeSet::new();
    for _ in 0..rng.gen_range(0..4) {
        let t = if !pieces.is_empty() && rng.gen_bool(0.6) {
            let a = pieces.choose(rng).unwrap().clone();
            let b = pieces.choose(rng).unwrap().clone();
            match rng.gen_range(0..4) {
                0 => Term::tuple(vec![a, b]),
                1 => Term::hash(a),
                2 => Term::enc(a, b),
                _ => Term::sig(a, b),
            }
        } else {
            random_term(rng, 3)
        };
        universe.insert(t);
    }
    (base, universe)
}

// ---------------------------------------------------------------------------
// Random models

struct Names {
    prefix: String,
    used: Vec<String>,
}

impl Names {
    fn fresh(&mut self) -> String {
        let v = format!("{}{}", self.prefix, self.used.len());
        self.used.push(v.clone());
        v
    }
}

/// Arbitrary receive pattern. Rarely matches anything.
fn wild_pattern(rng: &mut StdRng, depth: usize, names: &mut Names) -> Pattern {
    if depth <= 1 || rng.gen_bool(0.3) {
        return match rng.gen_range(0..6) {
            0 => Pattern::Wildcard,
            1 => Pattern::Lit(random_leaf(rng)),
            2 if !names.used.is_empty() => Pattern::Var(names.used.choose(rng).unwrap().clone()),
            _ => Pattern::Var(names.fresh()),
        };
    }
    let d = depth - 1;
    match rng.gen_range(0..6) {
        0 => {
            let v = names.fresh();
            Pattern::Bind(v, Box::new(wild_pattern(rng, d, names)))
        }
        1 => Pattern::enc(wild_pattern(rng, d, names), wild_pattern(rng, d, names)),
        2 => Pattern::sig(wild_pattern(rng, d, names), wild_pattern(rng, d, names)),
        3 => Pattern::hash(wild_pattern(rng, d, names)),
        4 => Pattern::Tuple((0..rng.gen_range(1..=3)).map(|_| wild_pattern(rng, d, names)).collect()),
        _ => Pattern::Func(
            FUNCS.choose(rng).unwrap().to_string(),
            (0..rng.gen_range(1..=2)).map(|_| wild_pattern(rng, d, names)).collect(),
        ),
    }
}

/// A receive pattern that matches whatever `tpl` evaluates to.
fn abstract_pattern(rng: &mut StdRng, tpl: &Pattern, names: &mut Names) -> Pattern {
    match rng.gen_range(0..10) {
        0 => return Pattern::Wildcard,
        1 => return Pattern::Var(names.fresh()),
        _ => {}
    }
    let inner = match tpl {
        Pattern::Lit(t) => Pattern::Lit(t.clone()),
        Pattern::Var(_) | Pattern::Wildcard | Pattern::Bind(..) => Pattern::Var(names.fresh()),
        Pattern::Enc(a, b) => Pattern::enc(abstract_pattern(rng, a, names), abstract_pattern(rng, b, names)),
        Pattern::Sig(a, b) => Pattern::sig(abstract_pattern(rng, a, names), abstract_pattern(rng, b, names)),
        Pattern::Hash(a) => Pattern::hash(abstract_pattern(rng, a, names)),
        Pattern::Tuple(xs) => Pattern::Tuple(xs.iter().map(|x| abstract_pattern(rng, x, names)).collect()),
        Pattern::Func(f, xs) => Pattern::Func(f.clone(), xs.iter().map(|x| abstract_pattern(rng, x, names)).collect()),
    };
    if tpl.is_template() && !matches!(inner, Pattern::Var(_)) && rng.gen_bool(0.15) {
        Pattern::Bind(names.fresh(), Box::new(inner))
    } else {
        inner
    }
}

fn random_template(rng: &mut StdRng, depth: usize, bound: &[String]) -> Pattern {
    if depth <= 1 || rng.gen_bool(0.35) {
        return if !bound.is_empty() && rng.gen_bool(0.7) {
            Pattern::Var(bound.choose(rng).unwrap().clone())
        } else {
            Pattern::Lit(random_leaf(rng))
        };
    }
    let d = depth - 1;
    match rng.gen_range(0..5) {
        0 => Pattern::enc(random_template(rng, d, bound), random_template(rng, d, bound)),
        1 => Pattern::sig(random_template(rng, d, bound), random_template(rng, d, bound)),
        2 => Pattern::hash(random_template(rng, d, bound)),
        3 => Pattern::Tuple((0..rng.gen_range(1..=3)).map(|_| random_template(rng, d, bound)).collect()),
        _ => Pattern::Func(
            FUNCS.choose(rng).unwrap().to_string(),
            (0..rng.gen_range(1..=2)).map(|_| random_template(rng, d, bound)).collect(),
        ),
    }
}

fn random_guard(rng: &mut StdRng, bound: &[String], wild: bool) -> GuardAtom {
    let t = |rng: &mut StdRng| canonical(random_template(rng, 2, bound));
    if wild {
        return match rng.gen_range(0..3) {
            0 => GuardAtom::Eq(t(rng), t(rng)),
            1 => GuardAtom::Ne(t(rng), t(rng)),
            _ => GuardAtom::Verify { sig: t(rng), payload: t(rng), key: t(rng) },
        };
    }
    // Guards that hold on the honest run.
    if rng.gen_bool(0.5) {
        let x = t(rng);
        GuardAtom::Eq(x.clone(), x)
    } else {
        GuardAtom::Ne(Pattern::Lit(Term::atom("A")), Pattern::Lit(Term::atom("B")))
    }
}

const DESCRIPTIONS: &[&str] =
    &["", "plain words", "with \"quotes\" inside", "back\\slash and # hash", "tab\tand unicode é"];

/// A random model that validates, with every pattern in canonical form so
/// that it survives a parse/serialize round trip unchanged.
///
/// Subjects form a ring `p0 -> p1 -> ... -> p0`; p0 starts and commits. With
/// `wild` unset every receive pattern is an abstraction of the template sent
/// to it, so the honest run commits and the model can be explored.
pub fn random_model(rng: &mut StdRng, wild: bool) -> ProtocolModel {
    let n = rng.gen_range(2..=3);
    let channels: Vec<Channel> = (0..n).map(|i| Channel { id: format!("c{i}"), secure: rng.gen_bool(0.4) }).collect();
    let mut subjects: Vec<Subject> = Vec::new();
    let mut sent: Vec<Pattern> = Vec::new();
    let mut p0_names = Names { prefix: "v0_".into(), used: Vec::new() };
    let mut p0_bound = Vec::new();
    for i in 0..n {
        let trusted = i == 0 || rng.gen_bool(0.6);
        let capabilities: BTreeSet<Capability> =
            if trusted { BTreeSet::new() } else { Capability::ALL.into_iter().filter(|_| rng.gen_bool(0.7)).collect() };
        let knowledge: Vec<KnowledgeEntry> = (0..rng.gen_range(0..=2))
            .map(|j| KnowledgeEntry { name: format!("k{j}"), term: random_term(rng, 2), private: rng.gen_bool(0.7) })
            .collect();
        let mut bound: Vec<String> = knowledge.iter().map(|k| k.name.clone()).collect();
        let mut names = Names { prefix: format!("v{i}_"), used: Vec::new() };
        let inbound = channels[(i + n - 1) % n].id.clone();
        let outbound = channels[i].id.clone();

        let trigger = (i > 0).then(|| {
            let pattern =
                if wild { wild_pattern(rng, 3, &mut names) } else { abstract_pattern(rng, &sent[i - 1], &mut names) };
            bound.extend(names.used.iter().cloned());
            Receive { channel: inbound.clone(), pattern: canonical(pattern) }
        });
        let template = canonical(random_template(rng, 3, &bound));
        sent.push(template.clone());
        let guard = (0..rng.gen_range(0..=1)).map(|_| random_guard(rng, &bound, wild)).collect();
        let first = Transition {
            to: if i == 0 { "s1".into() } else { "t1".into() },
            trigger,
            emit: (!wild || rng.gen_bool(0.8)).then_some(Send { channel: outbound, template }),
            guard,
        };
        let states = if i == 0 {
            p0_bound = bound;
            p0_names = names;
            vec![
                StateNode {
                    id: "s0".into(),
                    kind: StateKind::Start,
                    on_enter_checks: vec![],
                    transitions: vec![first],
                },
                StateNode { id: "s1".into(), kind: StateKind::Plain, on_enter_checks: vec![], transitions: vec![] },
                StateNode { id: "s2".into(), kind: StateKind::Commit, on_enter_checks: vec![], transitions: vec![] },
            ]
        } else {
            vec![
                StateNode {
                    id: "t0".into(),
                    kind: StateKind::Plain,
                    on_enter_checks: vec![],
                    transitions: vec![first],
                },
                StateNode { id: "t1".into(), kind: StateKind::Plain, on_enter_checks: vec![], transitions: vec![] },
            ]
        };
        subjects.push(Subject { id: format!("p{i}"), trusted, capabilities, knowledge, states });
    }
    // p0 closes the ring.
    let before = p0_names.used.len();
    let pattern =
        if wild { wild_pattern(rng, 3, &mut p0_names) } else { abstract_pattern(rng, &sent[n - 1], &mut p0_names) };
    p0_bound.extend(p0_names.used[before..].iter().cloned());
    let guard = (0..rng.gen_range(0..=1)).map(|_| random_guard(rng, &p0_bound, wild)).collect();
    subjects[0].states[1].transitions.push(Transition {
        to: "s2".into(),
        trigger: Some(Receive { channel: channels[n - 1].id.clone(), pattern: canonical(pattern) }),
        emit: None,
        guard,
    });

    let fields: Vec<Slot> = subjects
        .iter()
        .flat_map(|s| s.bindable_fields().into_iter().map(|f| Slot::new(s.id.clone(), f)).collect::<Vec<_>>())
        .collect();
    let p0_fields: Vec<Slot> = fields.iter().filter(|s| s.subject == "p0").cloned().collect();
    let mut tags = Vec::new();
    let mut invariants = Vec::new();
    if !p0_fields.is_empty() {
        let k = rng.gen_range(1..=p0_fields.len().min(3));
        let inte: Vec<Slot> = p0_fields.choose_multiple(rng, k).cloned().collect();
        for s in &inte {
            tags.push(ValueTag { slot: s.clone(), tag: TagKind::Inte });
        }
        invariants.push(InvariantDecl {
            id: "I1".into(),
            kind: InvariantKind::Integrity { commit_subject: "p0".into(), protected: inte },
            description: DESCRIPTIONS.choose(rng).unwrap().to_string(),
        });
    }
    if !fields.is_empty() && rng.gen_bool(0.5) {
        let c = fields.choose(rng).unwrap().clone();
        tags.push(ValueTag { slot: c.clone(), tag: TagKind::Conf });
        invariants.push(InvariantDecl {
            id: "I2".into(),
            kind: InvariantKind::Confidentiality(c),
            description: DESCRIPTIONS.choose(rng).unwrap().to_string(),
        });
    }
    if !invariants.is_empty() && rng.gen_bool(0.3) {
        subjects[0].states[2].on_enter_checks = invariants.iter().map(|i| i.id.clone()).collect();
    }

    let mut preconditions = Vec::new();
    let mut next_id = 0;
    let mut pid = || {
        next_id += 1;
        format!("C{next_id}")
    };
    for s in &subjects {
        if s.trusted && rng.gen_bool(0.5) {
            preconditions.push(Precondition { id: pid(), effect: PreconditionEffect::TrustSubject(s.id.clone()) });
        }
        for k in s.knowledge.iter().filter(|k| k.private) {
            if rng.gen_bool(0.4) {
                preconditions.push(Precondition {
                    id: pid(),
                    effect: PreconditionEffect::GrantPrivate(s.id.clone(), k.term.clone()),
                });
            }
        }
    }
    for c in channels.iter().filter(|c| c.secure) {
        if rng.gen_bool(0.5) {
            preconditions.push(Precondition { id: pid(), effect: PreconditionEffect::SecureChannel(c.id.clone()) });
        }
    }
    let expected = match rng.gen_range(0..3) {
        0 => None,
        1 => Some(ExpectedVerdict::Pass),
        _ => invariants.first().map(|i| ExpectedVerdict::FailWith(i.id.clone())),
    };
    ProtocolModel {
        name: format!("gen_{}", rng.gen_range(0..1000)),
        phase: *Phase::ALL.choose(rng).unwrap(),
        scope: if rng.gen_bool(0.5) { Scope::External } else { Scope::Internal },
        sessions: if wild { rng.gen_range(1..=3) } else { rng.gen_range(1..=2) },
        public: (0..rng.gen_range(0..=2)).map(|_| random_term(rng, 2)).collect(),
        subjects,
        channels,
        tags,
        preconditions,
        invariants,
        expected,
    }
}

// ---------------------------------------------------------------------------
// Reference explorer

pub struct BruteForce {
    pub states: usize,
    pub violations: BTreeSet<ViolationKey>,
    pub commit_states: usize,
}

/// Breadth-first search keyed on full structural state equality instead of
/// fingerprints, single-threaded, no shortcuts.
pub fn brute_force(m: &Machine<'_>) -> BruteForce {
    let init = m.initial_state().unwrap();
    let mut seen: HashSet<GlobalState> = HashSet::new();
    let mut queue = VecDeque::new();
    let mut violations = BTreeSet::new();
    let mut commit_states = 0;
    seen.insert(init.clone());
    queue.push_back(init);
    while let Some(st) = queue.pop_front() {
        violations.extend(m.check_state(&st).into_iter().map(|(k, _)| k));
        if m.is_finisher_committed(&st) {
            commit_states += 1;
        }
        for (_, next) in m.next_states(&st).unwrap() {
            if seen.insert(next.clone()) {
                queue.push_back(next);
            }
        }
    }
    BruteForce { states: seen.len(), violations, commit_states }
}

pub fn violation_keys(v: &svmcheck::invariants::Verdict) -> BTreeSet<ViolationKey> {
    v.violations().iter().map(|v| v.key()).collect()
}
