//! The `.svm` model description language.
//!
//! Line comments start with `#`. Layout is free: blocks are introduced by
//! keywords, so indentation and line breaks carry no meaning beyond the
//! mandatory version line.
//!
//! ```text
//! svm-format-version 1
//! model ping phase runtime scope external
//! sessions 1
//! channel ab
//! subject alice trusted
//!   knows ?n = nonce(N, alice)
//!   states
//!     state a0 start
//!       goto a1 send ab ?n
//!     state a1 commit
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::model::{
    validate, Capability, Channel, Diagnostic, ExpectedVerdict, GuardAtom, InvariantDecl, InvariantKind,
    KnowledgeEntry, Pattern, Phase, Precondition, PreconditionEffect, ProtocolModel, Receive, Scope, Send, Slot,
    StateKind, StateNode, Subject, TagKind, Transition, ValueTag,
};
use crate::term::Term;

pub const FORMAT_HEADER: &str = "svm-format-version 1";

const MAX_NESTING: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub file: String,
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.file, self.line, self.column)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Var(String),
    Int(u64),
    Str(String),
    LParen,
    RParen,
    Comma,
    Dot,
    At,
    Assign,
    EqEq,
    NotEq,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Var(s) => write!(f, "`?{s}`"),
            Tok::Int(n) => write!(f, "`{n}`"),
            Tok::Str(_) => f.write_str("string"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Dot => f.write_str("`.`"),
            Tok::At => f.write_str("`@`"),
            Tok::Assign => f.write_str("`=`"),
            Tok::EqEq => f.write_str("`==`"),
            Tok::NotEq => f.write_str("`!=`"),
        }
    }
}

struct Lexed {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn lex(src: &str, first_line: usize, file: &str) -> Result<Vec<Lexed>, Diagnostic> {
    let mut out = Vec::new();
    for (offset, line_text) in src.lines().enumerate() {
        let line = first_line + offset;
        let chars: Vec<char> = line_text.chars().collect();
        let mut i = 0;
        let err = |col: usize, msg: String| {
            let mut d = Diagnostic::new("E_LEX", "model", msg);
            d.span = Some(SourceSpan { file: file.to_string(), line, column: col });
            d
        };
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '#' {
                break;
            }
            let tok = if is_ident_start(c) {
                let start = i;
                while i < chars.len() && is_ident_char(chars[i]) {
                    i += 1;
                }
                Tok::Ident(chars[start..i].iter().collect())
            } else if c == '?' {
                i += 1;
                let start = i;
                if i >= chars.len() || !is_ident_start(chars[i]) {
                    return Err(err(col, "expected a variable name after `?`".into()));
                }
                while i < chars.len() && is_ident_char(chars[i]) {
                    i += 1;
                }
                Tok::Var(chars[start..i].iter().collect())
            } else if c.is_ascii_digit() {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                match text.parse::<u64>() {
                    Ok(n) => Tok::Int(n),
                    Err(_) => return Err(err(col, format!("integer {text} is out of range"))),
                }
            } else if c == '"' {
                i += 1;
                let mut s = String::new();
                loop {
                    match chars.get(i) {
                        None => return Err(err(col, "unterminated string".into())),
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            match chars.get(i + 1) {
                                Some('n') => s.push('\n'),
                                Some('"') => s.push('"'),
                                Some('\\') => s.push('\\'),
                                _ => return Err(err(i + 1, "bad escape in string".into())),
                            }
                            i += 2;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                Tok::Str(s)
            } else {
                i += 1;
                match c {
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ',' => Tok::Comma,
                    '.' => Tok::Dot,
                    '@' => Tok::At,
                    '=' if chars.get(i) == Some(&'=') => {
                        i += 1;
                        Tok::EqEq
                    }
                    '=' => Tok::Assign,
                    '!' if chars.get(i) == Some(&'=') => {
                        i += 1;
                        Tok::NotEq
                    }
                    other => return Err(err(col, format!("unexpected character {other:?}"))),
                }
            };
            out.push(Lexed { tok, line, col });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Lexed>,
    pos: usize,
    file: &'a str,
    /// Model path (as used in validation diagnostics) to source position.
    spans: BTreeMap<String, SourceSpan>,
    eof_line: usize,
}

type PResult<T> = Result<T, Diagnostic>;

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|l| &l.tok)
    }

    fn peek_at(&self, ahead: usize) -> Option<&Tok> {
        self.toks.get(self.pos + ahead).map(|l| &l.tok)
    }

    fn here(&self) -> SourceSpan {
        match self.toks.get(self.pos) {
            Some(l) => SourceSpan { file: self.file.to_string(), line: l.line, column: l.col },
            None => SourceSpan { file: self.file.to_string(), line: self.eof_line, column: 1 },
        }
    }

    fn error(&self, code: &str, msg: impl Into<String>) -> Diagnostic {
        let mut d = Diagnostic::new(code, "model", msg);
        d.span = Some(self.here());
        d
    }

    fn unexpected(&self, wanted: &str) -> Diagnostic {
        match self.peek() {
            Some(t) => self.error("E_SYNTAX", format!("expected {wanted}, found {t}")),
            None => self.error("E_SYNTAX", format!("expected {wanted}, found end of input")),
        }
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|l| l.tok.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s == kw)
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.at_keyword(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> PResult<()> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("`{kw}`")))
        }
    }

    fn expect(&mut self, tok: Tok) -> PResult<()> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.unexpected(&tok.to_string()))
        }
    }

    fn ident(&mut self, what: &str) -> PResult<String> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.unexpected(what)),
        }
    }

    fn mark(&mut self, path: String) {
        let span = self.here();
        self.spans.entry(path).or_insert(span);
    }

    fn model(&mut self) -> PResult<ProtocolModel> {
        self.mark("model".into());
        self.expect_keyword("model")?;
        let name = self.ident("model name")?;
        self.expect_keyword("phase")?;
        let phase_word = self.ident("phase name")?;
        let phase = Phase::from_keyword(&phase_word)
            .ok_or_else(|| self.error("E_SYNTAX", format!("unknown phase {phase_word}")))?;
        self.expect_keyword("scope")?;
        let scope = match self.ident("`external` or `internal`")?.as_str() {
            "external" => Scope::External,
            "internal" => Scope::Internal,
            other => return Err(self.error("E_SYNTAX", format!("unknown scope {other}"))),
        };
        let mut m = ProtocolModel {
            name,
            phase,
            scope,
            sessions: 1,
            public: Vec::new(),
            subjects: Vec::new(),
            channels: Vec::new(),
            tags: Vec::new(),
            preconditions: Vec::new(),
            invariants: Vec::new(),
            expected: None,
        };
        while let Some(tok) = self.peek() {
            let Tok::Ident(kw) = tok else {
                return Err(self.unexpected("a declaration"));
            };
            match kw.as_str() {
                "sessions" => {
                    self.pos += 1;
                    match self.next() {
                        Some(Tok::Int(n)) if n <= u32::MAX as u64 => m.sessions = n as u32,
                        _ => {
                            self.pos -= 1;
                            return Err(self.unexpected("a session count"));
                        }
                    }
                }
                "expect" => {
                    self.pos += 1;
                    if self.eat_keyword("pass") {
                        m.expected = Some(ExpectedVerdict::Pass);
                    } else {
                        self.expect_keyword("fail")?;
                        m.expected = Some(ExpectedVerdict::FailWith(self.ident("invariant id")?));
                    }
                }
                "public" => {
                    self.pos += 1;
                    m.public.push(self.term(0)?);
                    while self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                        m.public.push(self.term(0)?);
                    }
                }
                "channel" => {
                    self.pos += 1;
                    let here = self.here();
                    let id = self.ident("channel name")?;
                    self.spans.entry(format!("channel {id}")).or_insert(here);
                    let secure = self.eat_keyword("secure");
                    m.channels.push(Channel { id, secure });
                }
                "subject" => {
                    self.pos += 1;
                    let s = self.subject()?;
                    m.subjects.push(s);
                }
                "tag" => {
                    self.mark(format!("tag {}", m.tags.len()));
                    self.pos += 1;
                    let tag = match self.ident("`INTE` or `CONF`")?.as_str() {
                        "INTE" => TagKind::Inte,
                        "CONF" => TagKind::Conf,
                        other => return Err(self.error("E_SYNTAX", format!("unknown tag {other}"))),
                    };
                    let slot = self.slot()?;
                    m.tags.push(ValueTag { slot, tag });
                }
                "precondition" => {
                    self.pos += 1;
                    let here = self.here();
                    let id = self.ident("precondition id")?;
                    self.spans.entry(format!("precondition {id}")).or_insert(here);
                    let effect = match self.ident("`trust`, `private` or `secure`")?.as_str() {
                        "trust" => PreconditionEffect::TrustSubject(self.ident("subject name")?),
                        "private" => {
                            let s = self.ident("subject name")?;
                            PreconditionEffect::GrantPrivate(s, self.term(0)?)
                        }
                        "secure" => PreconditionEffect::SecureChannel(self.ident("channel name")?),
                        other => return Err(self.error("E_SYNTAX", format!("unknown precondition effect {other}"))),
                    };
                    m.preconditions.push(Precondition { id, effect });
                }
                "invariant" => {
                    self.pos += 1;
                    let here = self.here();
                    let id = self.ident("invariant id")?;
                    self.spans.entry(format!("invariant {id}")).or_insert(here);
                    let kind = match self.ident("`integrity` or `confidentiality`")?.as_str() {
                        "integrity" => {
                            let commit_subject = self.ident("commit subject")?;
                            self.expect_keyword("protects")?;
                            let mut protected = vec![self.slot()?];
                            while self.peek() == Some(&Tok::Comma) {
                                self.pos += 1;
                                protected.push(self.slot()?);
                            }
                            InvariantKind::Integrity { commit_subject, protected }
                        }
                        "confidentiality" => InvariantKind::Confidentiality(self.slot()?),
                        other => return Err(self.error("E_SYNTAX", format!("unknown invariant kind {other}"))),
                    };
                    let description = match self.next() {
                        Some(Tok::Str(s)) => s,
                        _ => {
                            self.pos = self.pos.saturating_sub(1);
                            return Err(self.unexpected("a quoted description"));
                        }
                    };
                    m.invariants.push(InvariantDecl { id, kind, description });
                }
                _ => return Err(self.unexpected("a declaration")),
            }
        }
        Ok(m)
    }

    fn slot(&mut self) -> PResult<Slot> {
        let subject = self.ident("subject name")?;
        self.expect(Tok::Dot)?;
        let field = self.ident("field name")?;
        Ok(Slot { subject, field })
    }

    fn subject(&mut self) -> PResult<Subject> {
        let here = self.here();
        let id = self.ident("subject name")?;
        let loc = format!("subject {id}");
        self.spans.entry(loc.clone()).or_insert(here);
        let mut capabilities = std::collections::BTreeSet::new();
        let trusted = if self.eat_keyword("trusted") {
            true
        } else if self.eat_keyword("untrusted") {
            while let Some(Tok::Ident(w)) = self.peek() {
                match Capability::from_keyword(w) {
                    Some(c) => {
                        capabilities.insert(c);
                        self.pos += 1;
                    }
                    None => break,
                }
            }
            false
        } else {
            return Err(self.unexpected("`trusted` or `untrusted`"));
        };
        let mut knowledge = Vec::new();
        if self.eat_keyword("knows") {
            loop {
                let private = !self.eat_keyword("public");
                let here = self.here();
                let name = match self.next() {
                    Some(Tok::Var(v)) => v,
                    _ => {
                        self.pos = self.pos.saturating_sub(1);
                        return Err(self.unexpected("a `?name` for the knowledge entry"));
                    }
                };
                self.spans.entry(format!("{loc}/knows {name}")).or_insert(here);
                self.expect(Tok::Assign)?;
                let term = self.term(0)?;
                knowledge.push(KnowledgeEntry { name, term, private });
                if self.peek() == Some(&Tok::Comma) {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        self.expect_keyword("states")?;
        let mut states = Vec::new();
        while self.at_keyword("state") {
            self.pos += 1;
            let here = self.here();
            let sid = self.ident("state name")?;
            let sloc = format!("{loc}/state {sid}");
            self.spans.entry(sloc.clone()).or_insert(here);
            let kind = if self.eat_keyword("start") {
                StateKind::Start
            } else if self.eat_keyword("commit") {
                StateKind::Commit
            } else {
                StateKind::Plain
            };
            let mut on_enter_checks = Vec::new();
            if self.eat_keyword("check") {
                on_enter_checks.push(self.ident("invariant id")?);
                while self.peek() == Some(&Tok::Comma) {
                    self.pos += 1;
                    on_enter_checks.push(self.ident("invariant id")?);
                }
            }
            let mut transitions = Vec::new();
            while self.at_keyword("on") || self.at_keyword("goto") {
                self.mark(format!("{sloc}/transition {}", transitions.len()));
                transitions.push(self.transition()?);
            }
            states.push(StateNode { id: sid, kind, on_enter_checks, transitions });
        }
        if states.is_empty() {
            return Err(self.unexpected("`state`"));
        }
        Ok(Subject { id, trusted, capabilities, knowledge, states })
    }

    fn transition(&mut self) -> PResult<Transition> {
        let trigger = if self.eat_keyword("on") {
            let channel = self.ident("channel name")?;
            let pattern = self.pattern(0)?;
            Some(Receive { channel, pattern })
        } else {
            None
        };
        self.expect_keyword("goto")?;
        let to = self.ident("state name")?;
        let mut emit = None;
        let mut guard = Vec::new();
        // `send` and `when` may come in either order, each at most once.
        loop {
            if emit.is_none() && self.eat_keyword("send") {
                let channel = self.ident("channel name")?;
                let template = self.pattern(0)?;
                emit = Some(Send { channel, template });
            } else if guard.is_empty() && self.eat_keyword("when") {
                guard.push(self.guard_atom()?);
                while self.eat_keyword("and") {
                    guard.push(self.guard_atom()?);
                }
            } else {
                break;
            }
        }
        Ok(Transition { to, trigger, emit, guard })
    }

    fn guard_atom(&mut self) -> PResult<GuardAtom> {
        if self.at_keyword("verify") && self.peek_at(1) == Some(&Tok::LParen) {
            self.pos += 2;
            let sig = self.pattern(0)?;
            self.expect(Tok::Comma)?;
            let payload = self.pattern(0)?;
            self.expect(Tok::Comma)?;
            let key = self.pattern(0)?;
            self.expect(Tok::RParen)?;
            return Ok(GuardAtom::Verify { sig, payload, key });
        }
        let lhs = self.pattern(0)?;
        match self.next() {
            Some(Tok::EqEq) => Ok(GuardAtom::Eq(lhs, self.pattern(0)?)),
            Some(Tok::NotEq) => Ok(GuardAtom::Ne(lhs, self.pattern(0)?)),
            _ => {
                self.pos = self.pos.saturating_sub(1);
                Err(self.unexpected("`==` or `!=`"))
            }
        }
    }

    fn term(&mut self, depth: usize) -> PResult<Term> {
        let here = self.here();
        let p = self.pattern(depth)?;
        match p {
            Pattern::Lit(t) => Ok(t),
            _ => {
                let mut d = Diagnostic::new("E_SYNTAX", "model", "expected a ground term without variables");
                d.span = Some(here);
                Err(d)
            }
        }
    }

    fn pattern_list(&mut self, depth: usize) -> PResult<Vec<Pattern>> {
        self.expect(Tok::LParen)?;
        let mut items = Vec::new();
        if self.peek() != Some(&Tok::RParen) {
            items.push(self.pattern(depth + 1)?);
            while self.peek() == Some(&Tok::Comma) {
                self.pos += 1;
                items.push(self.pattern(depth + 1)?);
            }
        }
        self.expect(Tok::RParen)?;
        Ok(items)
    }

    fn pattern(&mut self, depth: usize) -> PResult<Pattern> {
        if depth > MAX_NESTING {
            return Err(self.error("E_SYNTAX", "term nesting is too deep"));
        }
        let p = match self.next() {
            Some(Tok::Var(v)) => {
                if self.peek() == Some(&Tok::At) {
                    self.pos += 1;
                    Pattern::Bind(v, Box::new(self.pattern(depth + 1)?))
                } else {
                    Pattern::Var(v)
                }
            }
            Some(Tok::Ident(w)) => {
                let call = self.peek() == Some(&Tok::LParen);
                match (w.as_str(), call) {
                    ("_", false) => Pattern::Wildcard,
                    ("func", false) => {
                        let name = self.ident("function name")?;
                        let args = self.pattern_list(depth)?;
                        Pattern::Func(name, args)
                    }
                    (_, false) => Pattern::Lit(Term::Atom(w)),
                    ("nonce", true) => {
                        self.pos += 1;
                        let id = self.ident("nonce id")?;
                        self.expect(Tok::Comma)?;
                        let owner = self.ident("nonce owner")?;
                        let session = if self.peek() == Some(&Tok::Comma) {
                            self.pos += 1;
                            match self.next() {
                                Some(Tok::Int(n)) if n <= u32::MAX as u64 => n as u32,
                                _ => {
                                    self.pos = self.pos.saturating_sub(1);
                                    return Err(self.unexpected("a session number"));
                                }
                            }
                        } else {
                            0
                        };
                        self.expect(Tok::RParen)?;
                        Pattern::Lit(Term::Nonce { id, owner, session })
                    }
                    (kind @ ("symkey" | "pubkey" | "privkey"), true) => {
                        let kind = kind.to_string();
                        self.pos += 1;
                        let id = self.ident("key id")?;
                        self.expect(Tok::RParen)?;
                        Pattern::Lit(match kind.as_str() {
                            "symkey" => Term::SymKey(id),
                            "pubkey" => Term::PubKey(id),
                            _ => Term::PrivKey(id),
                        })
                    }
                    (kind @ ("enc" | "sig" | "cert"), true) => {
                        let kind = kind.to_string();
                        let mut args = self.pattern_list(depth)?;
                        if args.len() != 2 {
                            return Err(self.error("E_SYNTAX", format!("{kind} takes two arguments")));
                        }
                        let k = args.pop().unwrap_or(Pattern::Wildcard);
                        let p = args.pop().unwrap_or(Pattern::Wildcard);
                        if kind == "enc" {
                            Pattern::enc(p, k)
                        } else {
                            Pattern::sig(p, k)
                        }
                    }
                    ("hash", true) => {
                        let mut args = self.pattern_list(depth)?;
                        if args.len() != 1 {
                            return Err(self.error("E_SYNTAX", "hash takes one argument"));
                        }
                        Pattern::hash(args.pop().unwrap_or(Pattern::Wildcard))
                    }
                    ("tuple", true) => Pattern::Tuple(self.pattern_list(depth)?),
                    (other, true) => {
                        return Err(self
                            .error("E_SYNTAX", format!("unknown term constructor {other}; use `func {other}(...)`")))
                    }
                }
            }
            _ => {
                self.pos = self.pos.saturating_sub(1);
                return Err(self.unexpected("a term"));
            }
        };
        Ok(canonical(p))
    }
}

/// Collapses variable-free subpatterns into literals, the one canonical
/// form the parser produces.
pub fn canonical(p: Pattern) -> Pattern {
    fn lit(p: &Pattern) -> Option<&Term> {
        match p {
            Pattern::Lit(t) => Some(t),
            _ => None,
        }
    }
    match p {
        Pattern::Enc(a, b) => {
            let (a, b) = (canonical(*a), canonical(*b));
            match (lit(&a), lit(&b)) {
                (Some(x), Some(y)) => Pattern::Lit(Term::enc(x.clone(), y.clone())),
                _ => Pattern::enc(a, b),
            }
        }
        Pattern::Sig(a, b) => {
            let (a, b) = (canonical(*a), canonical(*b));
            match (lit(&a), lit(&b)) {
                (Some(x), Some(y)) => Pattern::Lit(Term::sig(x.clone(), y.clone())),
                _ => Pattern::sig(a, b),
            }
        }
        Pattern::Hash(a) => {
            let a = canonical(*a);
            match lit(&a) {
                Some(x) => Pattern::Lit(Term::hash(x.clone())),
                None => Pattern::hash(a),
            }
        }
        Pattern::Tuple(items) => {
            let items: Vec<Pattern> = items.into_iter().map(canonical).collect();
            if items.iter().all(|i| lit(i).is_some()) {
                Pattern::Lit(Term::Tuple(items.iter().filter_map(lit).cloned().collect()))
            } else {
                Pattern::Tuple(items)
            }
        }
        Pattern::Func(name, items) => {
            let items: Vec<Pattern> = items.into_iter().map(canonical).collect();
            if items.iter().all(|i| lit(i).is_some()) {
                Pattern::Lit(Term::Func(name, items.iter().filter_map(lit).cloned().collect()))
            } else {
                Pattern::Func(name, items)
            }
        }
        Pattern::Bind(v, inner) => Pattern::Bind(v, Box::new(canonical(*inner))),
        other => other,
    }
}

fn attach_span(d: &mut Diagnostic, spans: &BTreeMap<String, SourceSpan>, file: &str) {
    if d.span.is_some() {
        return;
    }
    let mut path = d.location.as_str();
    loop {
        if let Some(s) = spans.get(path) {
            d.span = Some(s.clone());
            return;
        }
        match path.rfind('/') {
            Some(i) => path = &path[..i],
            None => break,
        }
    }
    d.span = Some(spans.get("model").cloned().unwrap_or(SourceSpan { file: file.to_string(), line: 1, column: 1 }));
}

/// Parses and validates model text. Every diagnostic carries a span.
pub fn parse(text: &str) -> Result<ProtocolModel, Vec<Diagnostic>> {
    parse_named(text, "<input>")
}

pub fn parse_bytes(bytes: &[u8], file: &str) -> Result<ProtocolModel, Vec<Diagnostic>> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_named(text, file),
        Err(e) => {
            let mut d = Diagnostic::new("E_ENCODING", "model", format!("model text is not UTF-8: {e}"));
            d.span = Some(SourceSpan { file: file.to_string(), line: 1, column: 1 });
            Err(vec![d])
        }
    }
}

pub fn parse_named(text: &str, file: &str) -> Result<ProtocolModel, Vec<Diagnostic>> {
    let span = |line: usize, column: usize| SourceSpan { file: file.to_string(), line, column };
    let meaningful = |l: &str| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('#')
    };
    let Some((header_idx, header)) = text.lines().enumerate().find(|(_, l)| meaningful(l)) else {
        let mut d = Diagnostic::new("E_EMPTY_MODEL", "model", "input contains no model");
        d.span = Some(span(1, 1));
        return Err(vec![d]);
    };
    if header.trim() != FORMAT_HEADER {
        let mut d = Diagnostic::new("E_VERSION", "model", format!("first line must be `{FORMAT_HEADER}`"));
        d.span = Some(span(header_idx + 1, 1));
        return Err(vec![d]);
    }
    let body: String = text.lines().skip(header_idx + 1).collect::<Vec<_>>().join("\n");
    let toks = lex(&body, header_idx + 2, file).map_err(|d| vec![d])?;
    if toks.is_empty() {
        let mut d = Diagnostic::new("E_EMPTY_MODEL", "model", "no model declaration after the version line");
        d.span = Some(span(header_idx + 1, 1));
        return Err(vec![d]);
    }
    let eof_line = header_idx + 2 + body.lines().count();
    let mut p = Parser { toks, pos: 0, file, spans: BTreeMap::new(), eof_line };
    let model = p.model().map_err(|d| vec![d])?;
    let mut diags = validate(&model);
    if diags.is_empty() {
        Ok(model)
    } else {
        for d in diags.iter_mut() {
            attach_span(d, &p.spans, file);
        }
        Err(diags)
    }
}

fn write_pattern(out: &mut String, p: &Pattern) {
    match p {
        Pattern::Lit(t) => {
            let _ = write!(out, "{t}");
        }
        Pattern::Var(v) => {
            let _ = write!(out, "?{v}");
        }
        Pattern::Wildcard => out.push('_'),
        Pattern::Bind(v, inner) => {
            let _ = write!(out, "?{v}@");
            write_pattern(out, inner);
        }
        Pattern::Enc(a, b) | Pattern::Sig(a, b) => {
            out.push_str(if matches!(p, Pattern::Enc(..)) { "enc(" } else { "sig(" });
            write_pattern(out, a);
            out.push_str(", ");
            write_pattern(out, b);
            out.push(')');
        }
        Pattern::Hash(a) => {
            out.push_str("hash(");
            write_pattern(out, a);
            out.push(')');
        }
        Pattern::Tuple(items) | Pattern::Func(_, items) => {
            match p {
                Pattern::Func(name, _) => {
                    let _ = write!(out, "func {name}(");
                }
                _ => out.push_str("tuple("),
            }
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_pattern(out, item);
            }
            out.push(')');
        }
    }
}

pub fn pattern_to_string(p: &Pattern) -> String {
    let mut s = String::new();
    write_pattern(&mut s, p);
    s
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Renders a model as `.svm` text. Declaration order is preserved and sets
/// are emitted sorted, so equal models give byte-identical output.
pub fn serialize(m: &ProtocolModel) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "{FORMAT_HEADER}");
    let scope = match m.scope {
        Scope::External => "external",
        Scope::Internal => "internal",
    };
    let _ = writeln!(w, "model {} phase {} scope {scope}", m.name, m.phase.keyword());
    let _ = writeln!(w, "sessions {}", m.sessions);
    match &m.expected {
        Some(ExpectedVerdict::Pass) => {
            let _ = writeln!(w, "expect pass");
        }
        Some(ExpectedVerdict::FailWith(id)) => {
            let _ = writeln!(w, "expect fail {id}");
        }
        None => {}
    }
    if !m.public.is_empty() {
        let items: Vec<String> = m.public.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(w, "public {}", items.join(", "));
    }
    for c in &m.channels {
        let _ = writeln!(w, "channel {}{}", c.id, if c.secure { " secure" } else { "" });
    }
    for s in &m.subjects {
        let _ = write!(w, "subject {}", s.id);
        if s.trusted {
            let _ = writeln!(w, " trusted");
        } else {
            let mut caps: Vec<&str> = s.capabilities.iter().map(|c| c.keyword()).collect();
            caps.sort_unstable();
            let _ = write!(w, " untrusted");
            for c in caps {
                let _ = write!(w, " {c}");
            }
            let _ = writeln!(w);
        }
        if !s.knowledge.is_empty() {
            let entries: Vec<String> = s
                .knowledge
                .iter()
                .map(|k| format!("{}?{} = {}", if k.private { "" } else { "public " }, k.name, k.term))
                .collect();
            let _ = writeln!(w, "  knows {}", entries.join(", "));
        }
        let _ = writeln!(w, "  states");
        for st in &s.states {
            let _ = write!(w, "    state {}", st.id);
            match st.kind {
                StateKind::Start => w.push_str(" start"),
                StateKind::Commit => w.push_str(" commit"),
                StateKind::Plain => {}
            }
            if !st.on_enter_checks.is_empty() {
                let _ = write!(w, " check {}", st.on_enter_checks.join(", "));
            }
            w.push('\n');
            for t in &st.transitions {
                w.push_str("      ");
                if let Some(r) = &t.trigger {
                    let _ = write!(w, "on {} {} ", r.channel, pattern_to_string(&r.pattern));
                }
                let _ = write!(w, "goto {}", t.to);
                if let Some(e) = &t.emit {
                    let _ = write!(w, " send {} {}", e.channel, pattern_to_string(&e.template));
                }
                for (i, g) in t.guard.iter().enumerate() {
                    w.push_str(if i == 0 { " when " } else { " and " });
                    match g {
                        GuardAtom::Eq(a, b) => {
                            let _ = write!(w, "{} == {}", pattern_to_string(a), pattern_to_string(b));
                        }
                        GuardAtom::Ne(a, b) => {
                            let _ = write!(w, "{} != {}", pattern_to_string(a), pattern_to_string(b));
                        }
                        GuardAtom::Verify { sig, payload, key } => {
                            let _ = write!(
                                w,
                                "verify({}, {}, {})",
                                pattern_to_string(sig),
                                pattern_to_string(payload),
                                pattern_to_string(key)
                            );
                        }
                    }
                }
                w.push('\n');
            }
        }
    }
    for t in &m.tags {
        let _ = writeln!(w, "tag {} {}", t.tag.keyword(), t.slot);
    }
    for p in &m.preconditions {
        let _ = match &p.effect {
            PreconditionEffect::TrustSubject(s) => writeln!(w, "precondition {} trust {s}", p.id),
            PreconditionEffect::GrantPrivate(s, t) => writeln!(w, "precondition {} private {s} {t}", p.id),
            PreconditionEffect::SecureChannel(c) => writeln!(w, "precondition {} secure {c}", p.id),
        };
    }
    for inv in &m.invariants {
        let _ = match &inv.kind {
            InvariantKind::Integrity { commit_subject, protected } => {
                let slots: Vec<String> = protected.iter().map(|s| s.to_string()).collect();
                writeln!(
                    w,
                    "invariant {} integrity {commit_subject} protects {} {}",
                    inv.id,
                    slots.join(", "),
                    quote(&inv.description)
                )
            }
            InvariantKind::Confidentiality(slot) => {
                writeln!(w, "invariant {} confidentiality {slot} {}", inv.id, quote(&inv.description))
            }
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::ping_pong;

    #[test]
    fn empty_input_is_reported() {
        let err = parse("").unwrap_err();
        assert_eq!(err[0].code, "E_EMPTY_MODEL");
        let err = parse("# only a comment\n\n").unwrap_err();
        assert_eq!(err[0].code, "E_EMPTY_MODEL");
    }

    #[test]
    fn version_line_is_mandatory() {
        let err = parse("model x phase runtime scope external\n").unwrap_err();
        assert_eq!(err[0].code, "E_VERSION");
    }

    #[test]
    fn fixture_round_trips() {
        let m = ping_pong();
        let text = serialize(&m);
        assert_eq!(parse(&text).unwrap(), m);
        assert_eq!(serialize(&parse(&text).unwrap()), text);
    }

    #[test]
    fn minimal_model() {
        let text = "svm-format-version 1\nmodel tiny phase runtime scope internal\n\
                    subject solo trusted states state s start goto t state t commit\n";
        let m = parse(text).unwrap();
        assert_eq!(m.subjects.len(), 1);
        assert_eq!(m.sessions, 1);
        let again = serialize(&m);
        assert_eq!(parse(&again).unwrap(), m);
    }

    #[test]
    fn validation_errors_carry_spans() {
        let text = "svm-format-version 1\nmodel tiny phase runtime scope internal\n\
                    subject solo trusted\n states\n  state s start goto nowhere\n  state t commit\n";
        let err = parse(text).unwrap_err();
        let d = err.iter().find(|d| d.code == "E_UNKNOWN_STATE").unwrap();
        let span = d.span.as_ref().unwrap();
        assert_eq!(span.line, 5);
    }

    #[test]
    fn syntax_error_position() {
        let text = "svm-format-version 1\nmodel tiny phase runtime scope internal\nsubject solo maybe\n";
        let err = parse(text).unwrap_err();
        assert_eq!(err[0].code, "E_SYNTAX");
        assert_eq!(err[0].span.as_ref().unwrap().line, 3);
    }

    #[test]
    fn patterns_collapse_to_literals() {
        let p = canonical(Pattern::Tuple(vec![
            Pattern::lit(Term::atom("a")),
            Pattern::hash(Pattern::lit(Term::atom("b"))),
        ]));
        assert_eq!(p, Pattern::Lit(Term::tuple(vec![Term::atom("a"), Term::hash(Term::atom("b"))])));
    }

    #[test]
    fn deep_nesting_is_rejected_not_crashing() {
        let mut text = String::from("svm-format-version 1\nmodel x phase runtime scope internal\npublic ");
        for _ in 0..10_000 {
            text.push_str("hash(");
        }
        let err = parse(&text).unwrap_err();
        assert_eq!(err[0].code, "E_SYNTAX");
    }
}
