//! Symbolic term algebra under perfect cryptography, and the attacker
//! knowledge closure.
//!
//! Terms are plain trees compared structurally. Cryptography is opaque: a
//! ciphertext only opens with the matching key, a signature can only be made
//! with the private half of a key pair, and hashes and uninterpreted functions
//! are never inverted.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the number of materialized terms in one closure.
pub const DEFAULT_CLOSURE_CAP: usize = 100_000;

/// Prefix reserved for attacker-fresh atoms. The model language cannot
/// produce it, so these never collide with model names.
pub const ATTACKER_ATOM_PREFIX: char = '@';

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    Atom(String),
    /// `session` is bumped every time the owner restarts the protocol, so
    /// nonces from different runs never compare equal.
    Nonce {
        id: String,
        owner: String,
        session: u32,
    },
    SymKey(String),
    PubKey(String),
    PrivKey(String),
    Enc(Box<Term>, Box<Term>),
    Sig(Box<Term>, Box<Term>),
    Hash(Box<Term>),
    Tuple(Vec<Term>),
    Func(String, Vec<Term>),
}

impl Term {
    pub fn atom(name: impl Into<String>) -> Term {
        Term::Atom(name.into())
    }

    pub fn nonce(id: impl Into<String>, owner: impl Into<String>) -> Term {
        Term::Nonce { id: id.into(), owner: owner.into(), session: 0 }
    }

    pub fn sym(id: impl Into<String>) -> Term {
        Term::SymKey(id.into())
    }

    pub fn public(id: impl Into<String>) -> Term {
        Term::PubKey(id.into())
    }

    pub fn private(id: impl Into<String>) -> Term {
        Term::PrivKey(id.into())
    }

    pub fn enc(payload: Term, key: Term) -> Term {
        Term::Enc(Box::new(payload), Box::new(key))
    }

    pub fn sig(payload: Term, key: Term) -> Term {
        Term::Sig(Box::new(payload), Box::new(key))
    }

    pub fn hash(payload: Term) -> Term {
        Term::Hash(Box::new(payload))
    }

    pub fn tuple(items: Vec<Term>) -> Term {
        Term::Tuple(items)
    }

    pub fn func(name: impl Into<String>, args: Vec<Term>) -> Term {
        Term::Func(name.into(), args)
    }

    /// A certificate binding `subject` (usually a public key) under the
    /// issuer's private key. Stored as a plain signature.
    pub fn cert(subject: Term, issuer: Term) -> Term {
        Term::sig(subject, issuer)
    }

    pub fn attacker_atom(label: &str) -> Term {
        Term::Atom(format!("{ATTACKER_ATOM_PREFIX}{label}"))
    }

    pub fn is_attacker_atom(&self) -> bool {
        matches!(self, Term::Atom(name) if name.starts_with(ATTACKER_ATOM_PREFIX))
    }

    /// Direct children, in constructor order.
    pub fn children(&self) -> Vec<&Term> {
        match self {
            Term::Atom(_) | Term::Nonce { .. } | Term::SymKey(_) | Term::PubKey(_) | Term::PrivKey(_) => Vec::new(),
            Term::Enc(p, k) | Term::Sig(p, k) => vec![p, k],
            Term::Hash(p) => vec![p],
            Term::Tuple(items) | Term::Func(_, items) => items.iter().collect(),
        }
    }

    pub fn is_composite(&self) -> bool {
        !self.children().is_empty() || matches!(self, Term::Tuple(_) | Term::Func(..))
    }

    pub fn depth(&self) -> usize {
        1 + self.children().iter().map(|c| c.depth()).max().unwrap_or(0)
    }

    /// All subterms including `self`.
    pub fn subterms(&self) -> Vec<&Term> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(t) = stack.pop() {
            out.push(t);
            stack.extend(t.children());
        }
        out
    }

    pub fn contains(&self, needle: &Term) -> bool {
        self == needle || self.children().iter().any(|c| c.contains(needle))
    }

    /// The key that opens a ciphertext made with `key`.
    pub fn decryption_key(key: &Term) -> Term {
        match key {
            Term::PubKey(id) => Term::PrivKey(id.clone()),
            other => other.clone(),
        }
    }

    /// The key that checks a signature made with `key`, if it is a private key.
    pub fn verification_key(key: &Term) -> Option<Term> {
        match key {
            Term::PrivKey(id) => Some(Term::PubKey(id.clone())),
            _ => None,
        }
    }

    /// Coarse shape used when the attacker looks for substitutes of a value.
    pub fn sort(&self) -> Sort {
        match self {
            Term::Atom(_) => Sort::Atom,
            Term::Nonce { .. } => Sort::Nonce,
            Term::SymKey(_) => Sort::SymKey,
            Term::PubKey(_) => Sort::PubKey,
            Term::PrivKey(_) => Sort::PrivKey,
            Term::Enc(..) => Sort::Enc,
            Term::Sig(..) => Sort::Sig,
            Term::Hash(_) => Sort::Hash,
            Term::Tuple(items) => Sort::Tuple(items.len()),
            Term::Func(name, args) => Sort::Func(name.clone(), args.len()),
        }
    }

    /// Re-stamps every nonce owned by `owner` with `session`.
    pub fn in_session(&self, owner: &str, session: u32) -> Term {
        match self {
            Term::Nonce { id, owner: o, .. } if o == owner => Term::Nonce { id: id.clone(), owner: o.clone(), session },
            Term::Enc(p, k) => Term::enc(p.in_session(owner, session), k.in_session(owner, session)),
            Term::Sig(p, k) => Term::sig(p.in_session(owner, session), k.in_session(owner, session)),
            Term::Hash(p) => Term::hash(p.in_session(owner, session)),
            Term::Tuple(items) => Term::Tuple(items.iter().map(|t| t.in_session(owner, session)).collect()),
            Term::Func(name, args) => {
                Term::Func(name.clone(), args.iter().map(|t| t.in_session(owner, session)).collect())
            }
            other => other.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sort {
    Atom,
    Nonce,
    SymKey,
    PubKey,
    PrivKey,
    Enc,
    Sig,
    Hash,
    Tuple(usize),
    Func(String, usize),
}

fn write_list(f: &mut fmt::Formatter<'_>, items: &[Term]) -> fmt::Result {
    for (i, t) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{t}")?;
    }
    Ok(())
}

/// Renders in the model-file term syntax.
impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Atom(name) => f.write_str(name),
            Term::Nonce { id, owner, session: 0 } => write!(f, "nonce({id}, {owner})"),
            Term::Nonce { id, owner, session } => write!(f, "nonce({id}, {owner}, {session})"),
            Term::SymKey(id) => write!(f, "symkey({id})"),
            Term::PubKey(id) => write!(f, "pubkey({id})"),
            Term::PrivKey(id) => write!(f, "privkey({id})"),
            Term::Enc(p, k) => write!(f, "enc({p}, {k})"),
            Term::Sig(p, k) => write!(f, "sig({p}, {k})"),
            Term::Hash(p) => write!(f, "hash({p})"),
            Term::Tuple(items) => {
                f.write_str("tuple(")?;
                write_list(f, items)?;
                f.write_str(")")
            }
            Term::Func(name, args) => {
                write!(f, "func {name}(")?;
                write_list(f, args)?;
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClosureError {
    #[error("E_CLOSURE_CAP: knowledge closure exceeded the size cap of {cap} terms")]
    SizeCap { cap: usize },
}

/// A closure-closed set of attacker-derivable terms.
///
/// `terms` holds everything obtainable by taking messages apart plus every
/// composite of the model universe the attacker can assemble. Composites that
/// do not occur in the universe are decided on demand by [`can_derive`], so
/// the materialized set stays finite.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnowledgeSet {
    terms: BTreeSet<Term>,
    generation: u64,
    fab_depth: usize,
}

impl KnowledgeSet {
    pub fn empty(fab_depth: usize) -> Self {
        KnowledgeSet { terms: BTreeSet::new(), generation: 0, fab_depth }
    }

    pub fn terms(&self) -> &BTreeSet<Term> {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Nesting bound on attacker-built substitutes (see the engine).
    pub fn fab_depth(&self) -> usize {
        self.fab_depth
    }

    pub fn contains(&self, t: &Term) -> bool {
        self.terms.contains(t)
    }

    /// Adds `more` and re-closes. The generation counter bumps whenever the
    /// set actually grows.
    pub fn extend<'a>(
        &self,
        more: impl IntoIterator<Item = &'a Term>,
        universe: &BTreeSet<Term>,
        cap: usize,
    ) -> Result<KnowledgeSet, ClosureError> {
        let mut base = self.terms.clone();
        let before = base.len();
        base.extend(more.into_iter().cloned());
        if base.len() == before {
            return Ok(self.clone());
        }
        let mut next = close(base, universe, cap)?;
        next.fab_depth = self.fab_depth;
        next.generation = self.generation + 1;
        Ok(next)
    }
}

/// Computes the least fixpoint of the derivation rules over `base`.
///
/// Destructors: tuple projection, decryption with the matching key, payload
/// extraction from signatures. Constructors only fire for terms occurring as
/// subterms of `universe` or `base`; everything else is left to
/// [`can_derive`].
pub fn closure(
    base: &BTreeSet<Term>,
    universe: &BTreeSet<Term>,
    fab_depth: usize,
) -> Result<KnowledgeSet, ClosureError> {
    closure_with_cap(base, universe, fab_depth, DEFAULT_CLOSURE_CAP)
}

pub fn closure_with_cap(
    base: &BTreeSet<Term>,
    universe: &BTreeSet<Term>,
    fab_depth: usize,
    cap: usize,
) -> Result<KnowledgeSet, ClosureError> {
    let mut k = close(base.clone(), universe, cap)?;
    k.fab_depth = fab_depth;
    k.generation = 1;
    Ok(k)
}

fn close(mut known: BTreeSet<Term>, universe: &BTreeSet<Term>, cap: usize) -> Result<KnowledgeSet, ClosureError> {
    if known.len() > cap {
        return Err(ClosureError::SizeCap { cap });
    }
    // Candidate composites, ordered by depth so that one sweep usually
    // builds inner layers before outer ones.
    let mut candidates: BTreeSet<&Term> = BTreeSet::new();
    for t in universe.iter() {
        candidates.extend(t.subterms().into_iter().filter(|s| s.is_composite()));
    }
    let extra: BTreeSet<Term> =
        known.iter().flat_map(|t| t.subterms().into_iter().filter(|s| s.is_composite()).cloned()).collect();
    candidates.extend(extra.iter());
    let mut ordered: Vec<&Term> = candidates.into_iter().collect();
    ordered.sort_by_key(|t| t.depth());

    let mut pending: Vec<Term> = known.iter().cloned().collect();
    loop {
        // Analysis to fixpoint.
        while let Some(t) = pending.pop() {
            let parts: Vec<Term> = match &t {
                Term::Tuple(items) => items.clone(),
                Term::Sig(payload, _) => vec![(**payload).clone()],
                Term::Enc(payload, key) => {
                    if known.contains(&Term::decryption_key(key)) {
                        vec![(**payload).clone()]
                    } else {
                        Vec::new()
                    }
                }
                // A newly learned key may open ciphertexts already held.
                key @ (Term::SymKey(_) | Term::PrivKey(_) | Term::Atom(_) | Term::Nonce { .. }) => known
                    .iter()
                    .filter_map(|c| match c {
                        Term::Enc(p, k) if Term::decryption_key(k) == *key => Some((**p).clone()),
                        _ => None,
                    })
                    .collect(),
                _ => Vec::new(),
            };
            // Composite keys (unusual, but legal) are handled the same way.
            let parts = if t.is_composite() {
                let mut parts = parts;
                parts.extend(known.iter().filter_map(|c| match c {
                    Term::Enc(p, k) if Term::decryption_key(k) == t => Some((**p).clone()),
                    _ => None,
                }));
                parts
            } else {
                parts
            };
            for p in parts {
                if known.insert(p.clone()) {
                    if known.len() > cap {
                        return Err(ClosureError::SizeCap { cap });
                    }
                    pending.push(p);
                }
            }
        }
        // Synthesis over the candidate pool.
        let mut grew = false;
        for c in &ordered {
            if known.contains(*c) {
                continue;
            }
            if c.children().iter().all(|ch| known.contains(*ch)) {
                known.insert((*c).clone());
                if known.len() > cap {
                    return Err(ClosureError::SizeCap { cap });
                }
                pending.push((*c).clone());
                grew = true;
            }
        }
        if !grew && pending.is_empty() {
            break;
        }
    }
    Ok(KnowledgeSet { terms: known, generation: 0, fab_depth: 0 })
}

/// True iff the attacker can produce `t`: it is in the closure, it is an
/// attacker-fresh atom, or it can be assembled from derivable parts.
/// Hashes, functions and signatures are never inverted; a signature needs the
/// signing key itself.
pub fn can_derive(k: &KnowledgeSet, t: &Term) -> bool {
    if k.contains(t) || t.is_attacker_atom() {
        return true;
    }
    match t {
        Term::Atom(_) | Term::Nonce { .. } | Term::SymKey(_) | Term::PubKey(_) | Term::PrivKey(_) => false,
        Term::Enc(p, key) | Term::Sig(p, key) => can_derive(k, p) && can_derive(k, key),
        Term::Hash(p) => can_derive(k, p),
        Term::Tuple(items) | Term::Func(_, items) => items.iter().all(|i| can_derive(k, i)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ts: &[Term]) -> BTreeSet<Term> {
        ts.iter().cloned().collect()
    }

    fn m() -> Term {
        Term::atom("m")
    }

    #[test]
    fn symmetric_decryption_needs_key() {
        let k = Term::sym("k");
        let with_key = closure(&set(&[Term::enc(m(), k.clone()), k.clone()]), &BTreeSet::new(), 0).unwrap();
        assert!(can_derive(&with_key, &m()));
        let without = closure(&set(&[Term::enc(m(), k)]), &BTreeSet::new(), 0).unwrap();
        assert!(!can_derive(&without, &m()));
    }

    #[test]
    fn key_learned_after_ciphertext_opens_it() {
        let k = Term::sym("k");
        let first = closure(&set(&[Term::enc(m(), k.clone())]), &BTreeSet::new(), 0).unwrap();
        let second = first.extend([&k], &BTreeSet::new(), DEFAULT_CLOSURE_CAP).unwrap();
        assert!(second.contains(&m()));
        assert!(second.generation() > first.generation());
    }

    #[test]
    fn public_key_encryption_opens_with_private_half() {
        let c = Term::enc(m(), Term::public("a"));
        let k = closure(&set(&[c.clone(), Term::public("a")]), &BTreeSet::new(), 0).unwrap();
        assert!(!can_derive(&k, &m()));
        let k = closure(&set(&[c, Term::private("a")]), &BTreeSet::new(), 0).unwrap();
        assert!(can_derive(&k, &m()));
    }

    #[test]
    fn signatures_reveal_payload_but_cannot_be_forged() {
        let s = Term::sig(m(), Term::private("a"));
        let k = closure(&set(std::slice::from_ref(&s)), &BTreeSet::new(), 0).unwrap();
        assert!(can_derive(&k, &s));
        assert!(can_derive(&k, &m()));

        let k = closure(&set(&[Term::public("a"), m()]), &BTreeSet::new(), 0).unwrap();
        assert!(!can_derive(&k, &Term::sig(m(), Term::private("a"))));
    }

    #[test]
    fn hashes_and_functions_are_one_way() {
        let base = set(&[Term::hash(m()), Term::func("f", vec![m()])]);
        let k = closure(&base, &base, 2).unwrap();
        assert!(!can_derive(&k, &m()));
    }

    #[test]
    fn universe_composites_are_materialized() {
        let target = Term::hash(Term::tuple(vec![m(), Term::atom("n")]));
        let k = closure(&set(&[m(), Term::atom("n")]), &set(std::slice::from_ref(&target)), 0).unwrap();
        assert!(k.contains(&target));
        assert!(k.contains(&Term::tuple(vec![m(), Term::atom("n")])));
    }

    #[test]
    fn size_cap_is_a_hard_error() {
        let base: BTreeSet<Term> = (0..20).map(|i| Term::atom(format!("a{i}"))).collect();
        let err = closure_with_cap(&base, &BTreeSet::new(), 0, 10).unwrap_err();
        assert_eq!(err, ClosureError::SizeCap { cap: 10 });
    }

    #[test]
    fn session_restamp_only_touches_owner() {
        let t = Term::tuple(vec![Term::nonce("N", "alice"), Term::nonce("M", "bob")]);
        let s = t.in_session("alice", 3);
        assert_eq!(
            s,
            Term::tuple(vec![
                Term::Nonce { id: "N".into(), owner: "alice".into(), session: 3 },
                Term::nonce("M", "bob"),
            ])
        );
    }

    #[test]
    fn display_uses_model_syntax() {
        let t = Term::enc(Term::tuple(vec![Term::nonce("N", "c"), Term::func("f", vec![m()])]), Term::sym("K"));
        assert_eq!(t.to_string(), "enc(tuple(nonce(N, c), func f(m)), symkey(K))");
    }
}
