//! First-order background rules over sentence pairs and their fuzzy semantics.
//!
//! A rule `body ⇒ head` is grounded by a [`Substitution`] mapping variables
//! to sentences. Atom probabilities come from a [`Scorer`]; conjunctions use
//! the Gödel t-norm (`min`), negation is `1 − p`, and an empty body is ⊤
//! with probability 1. The inconsistency loss is `[p(body) − p(head)]_+`.

use std::collections::BTreeMap;
use std::fmt;

use num_traits::One;

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::model::Scorer;
use crate::scalar::Scalar;

/// The Table-1 style rule file shipped with the repository.
pub const NLI_RULES: &str = include_str!("../../../rules/nli.rules");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Predicate {
    Ent,
    Con,
    Neu,
}

impl Predicate {
    /// Output class of the scorer this predicate reads.
    pub fn class(self) -> usize {
        match self {
            Predicate::Ent => 0,
            Predicate::Con => 1,
            Predicate::Neu => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Predicate::Ent => "ent",
            Predicate::Con => "con",
            Predicate::Neu => "neu",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ent" => Some(Predicate::Ent),
            "con" => Some(Predicate::Con),
            "neu" => Some(Predicate::Neu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub predicate: Predicate,
    pub args: [String; 2],
}

impl Atom {
    pub fn new(predicate: Predicate, arg1: &str, arg2: &str) -> Self {
        Atom {
            predicate,
            args: [arg1.to_owned(), arg2.to_owned()],
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({},{})",
            self.predicate.name(),
            self.args[0],
            self.args[1]
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Literal {
    pub atom: Atom,
    pub negated: bool,
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.negated {
            f.write_str("~")?;
        }
        self.atom.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rule {
    pub name: String,
    /// Empty body encodes ⊤.
    pub body: Vec<Atom>,
    pub head: Literal,
}

impl Rule {
    /// Distinct variables in order of first appearance (body, then head).
    pub fn variables(&self) -> Vec<&str> {
        let mut vars: Vec<&str> = Vec::new();
        for atom in self.body.iter().chain(std::iter::once(&self.head.atom)) {
            for a in &atom.args {
                if !vars.contains(&a.as_str()) {
                    vars.push(a);
                }
            }
        }
        vars
    }

    pub fn arity(&self) -> usize {
        self.variables().len()
    }

    /// Bind the rule's variables, in first-appearance order, to `sentences`.
    pub fn bind(&self, sentences: &[&Sentence]) -> Result<Substitution> {
        let vars = self.variables();
        if sentences.len() < vars.len() {
            return Err(Error::Unbound(vars[sentences.len()].to_owned()));
        }
        Ok(Substitution::from_pairs(
            vars.into_iter().zip(sentences.iter().map(|s| (*s).clone())),
        ))
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.name)?;
        if self.body.is_empty() {
            f.write_str("true")?;
        }
        for (i, a) in self.body.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            a.fmt(f)?;
        }
        write!(f, " => {}", self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Result<Self> {
        for (i, r) in rules.iter().enumerate() {
            if rules[..i].iter().any(|o| o.name == r.name) {
                return Err(Error::Argument(format!("duplicate rule name {:?}", r.name)));
            }
        }
        Ok(RuleSet { rules })
    }

    /// The five shipped NLI rules.
    pub fn nli() -> Self {
        parse_rules(NLI_RULES).expect("shipped rule file parses")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Rule> {
        self.rules.iter()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for RuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a RuleSet {
    type Item = &'a Rule;
    type IntoIter = std::slice::Iter<'a, Rule>;

    fn into_iter(self) -> Self::IntoIter {
        self.rules.iter()
    }
}

/// Parse the rule DSL:
///
/// ```text
/// rule := name ":" body "=>" head
/// body := "true" | atom ("&" atom)*
/// head := ["~"] atom
/// atom := ("ent"|"con"|"neu") "(" var "," var ")"
/// ```
///
/// One rule per line; `#` starts a comment.
pub fn parse_rules(text: &str) -> Result<RuleSet> {
    let mut rules: Vec<Rule> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let rule = LineParser::new(line, i + 1).rule()?;
        if rules.iter().any(|r| r.name == rule.name) {
            return Err(Error::RuleSyntax {
                line: i + 1,
                column: 1,
                message: format!("duplicate rule name {:?}", rule.name),
            });
        }
        rules.push(rule);
    }
    RuleSet::new(rules)
}

struct LineParser {
    chars: Vec<char>,
    pos: usize,
    line: usize,
}

impl LineParser {
    fn new(src: &str, line: usize) -> Self {
        LineParser {
            chars: src.chars().collect(),
            pos: 0,
            line,
        }
    }

    fn err(&self, column: usize, message: impl Into<String>) -> Error {
        Error::RuleSyntax {
            line: self.line,
            column: column + 1,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.chars.get(self.pos).is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn expect(&mut self, token: &str) -> Result<()> {
        self.skip_ws();
        let at = self.pos;
        for expected in token.chars() {
            if self.chars.get(self.pos) != Some(&expected) {
                return Err(self.err(at, format!("expected {token:?}")));
            }
            self.pos += 1;
        }
        Ok(())
    }

    /// `letter (letter|digit|_)*`; returns the identifier and its start column.
    fn ident(&mut self, what: &str) -> Result<(String, usize)> {
        self.skip_ws();
        let start = self.pos;
        if !self.chars.get(start).is_some_and(|c| c.is_alphabetic()) {
            return Err(self.err(start, format!("expected {what}")));
        }
        while self
            .chars
            .get(self.pos)
            .is_some_and(|c| c.is_alphanumeric() || *c == '_')
        {
            self.pos += 1;
        }
        Ok((self.chars[start..self.pos].iter().collect(), start))
    }

    fn var(&mut self) -> Result<String> {
        let (v, start) = self.ident("a variable")?;
        if v.contains('_') {
            return Err(self.err(start, format!("invalid variable name {v:?}")));
        }
        Ok(v)
    }

    fn atom(&mut self) -> Result<Atom> {
        let (name, start) = self.ident("a predicate")?;
        let predicate = Predicate::parse(&name)
            .ok_or_else(|| self.err(start, format!("unknown predicate {name:?}")))?;
        self.expect("(")?;
        let a1 = self.var()?;
        self.expect(",")?;
        let a2 = self.var()?;
        self.expect(")")?;
        Ok(Atom {
            predicate,
            args: [a1, a2],
        })
    }

    fn rule(mut self) -> Result<Rule> {
        let (name, _) = self.ident("a rule name")?;
        self.expect(":")?;
        let mut body = Vec::new();
        self.skip_ws();
        let body_start = self.pos;
        let is_true = {
            let rest: String = self.chars[self.pos..].iter().take(5).collect();
            rest.starts_with("true")
                && !rest[4..]
                    .chars()
                    .next()
                    .is_some_and(|c| c.is_alphanumeric() || c == '_')
        };
        if is_true {
            self.pos += 4;
        } else {
            body.push(self.atom()?);
            while self.peek() == Some('&') {
                self.pos += 1;
                body.push(self.atom()?);
            }
        }
        self.expect("=>")?;
        let negated = if self.peek() == Some('~') {
            self.pos += 1;
            true
        } else {
            false
        };
        let head_start = {
            self.skip_ws();
            self.pos
        };
        let atom = self.atom()?;
        if self.peek().is_some() {
            return Err(self.err(self.pos, "unexpected trailing input"));
        }
        let rule = Rule {
            name,
            body,
            head: Literal { atom, negated },
        };
        if !rule.body.is_empty() {
            for v in &rule.head.atom.args {
                if !rule.body.iter().any(|a| a.args.contains(v)) {
                    return Err(self.err(
                        head_start,
                        format!("head variable {v} does not appear in the body"),
                    ));
                }
            }
        }
        if rule.arity() > 3 {
            return Err(self.err(body_start, "rules may use at most three variables"));
        }
        Ok(rule)
    }
}

/// Variable → sentence bindings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Substitution {
    binding: BTreeMap<String, Sentence>,
}

impl Substitution {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<K: Into<String>>(pairs: impl IntoIterator<Item = (K, Sentence)>) -> Self {
        Substitution {
            binding: pairs.into_iter().map(|(k, s)| (k.into(), s)).collect(),
        }
    }

    pub fn bind(&mut self, var: impl Into<String>, sentence: Sentence) {
        self.binding.insert(var.into(), sentence);
    }

    pub fn get(&self, var: &str) -> Result<&Sentence> {
        self.binding
            .get(var)
            .ok_or_else(|| Error::Unbound(var.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Sentence)> {
        self.binding.iter().map(|(k, s)| (k.as_str(), s))
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.binding.values()
    }

    pub fn len(&self) -> usize {
        self.binding.len()
    }

    pub fn is_empty(&self) -> bool {
        self.binding.is_empty()
    }
}

/// The `(premise, hypothesis)` pair an atom queries under `s`.
pub fn ground<'s>(atom: &Atom, s: &'s Substitution) -> Result<(&'s Sentence, &'s Sentence)> {
    Ok((s.get(&atom.args[0])?, s.get(&atom.args[1])?))
}

pub fn atom_probability<S: Scorer + ?Sized>(
    scorer: &S,
    atom: &Atom,
    s: &Substitution,
) -> Result<S::Scalar> {
    let (a, b) = ground(atom, s)?;
    Ok(scorer.predict(a, b)?.probs[atom.predicate.class()])
}

/// Probabilities of each body atom, in rule order.
pub fn body_atom_probabilities<S: Scorer + ?Sized>(
    scorer: &S,
    rule: &Rule,
    s: &Substitution,
) -> Result<Vec<S::Scalar>> {
    rule.body
        .iter()
        .map(|a| atom_probability(scorer, a, s))
        .collect()
}

/// Index of the body atom carrying the Gödel minimum; the first one on ties.
/// `None` for a ⊤ body.
pub fn argmin_atom<T: Scalar>(probs: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &p) in probs.iter().enumerate() {
        if best.is_none_or(|(_, b)| p < b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| i)
}

pub fn body_probability<S: Scorer + ?Sized>(
    scorer: &S,
    rule: &Rule,
    s: &Substitution,
) -> Result<S::Scalar> {
    let probs = body_atom_probabilities(scorer, rule, s)?;
    Ok(match argmin_atom(&probs) {
        Some(i) => probs[i],
        None => S::Scalar::one(),
    })
}

pub fn head_probability<S: Scorer + ?Sized>(
    scorer: &S,
    rule: &Rule,
    s: &Substitution,
) -> Result<S::Scalar> {
    let p = atom_probability(scorer, &rule.head.atom, s)?;
    Ok(if rule.head.negated {
        S::Scalar::one() - p
    } else {
        p
    })
}

/// `[p(body) − p(head)]_+`.
pub fn inconsistency_loss<S: Scorer + ?Sized>(
    scorer: &S,
    rule: &Rule,
    s: &Substitution,
) -> Result<S::Scalar> {
    let body = body_probability(scorer, rule, s)?;
    let head = head_probability(scorer, rule, s)?;
    Ok((body - head).pos())
}

/// Whether the atom's class is the scorer's argmax for the grounded pair.
pub fn atom_holds<S: Scorer + ?Sized>(scorer: &S, atom: &Atom, s: &Substitution) -> Result<bool> {
    let (a, b) = ground(atom, s)?;
    Ok(scorer.predict(a, b)?.argmax() == atom.predicate.class())
}

pub fn body_holds<S: Scorer + ?Sized>(scorer: &S, rule: &Rule, s: &Substitution) -> Result<bool> {
    for a in &rule.body {
        if !atom_holds(scorer, a, s)? {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn head_holds<S: Scorer + ?Sized>(scorer: &S, rule: &Rule, s: &Substitution) -> Result<bool> {
    Ok(atom_holds(scorer, &rule.head.atom, s)? != rule.head.negated)
}
