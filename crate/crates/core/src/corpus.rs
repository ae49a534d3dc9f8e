//! SNLI-format corpora, bracketed constituency trees and vocabularies.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const RESERVED: [&str; 4] = [PAD, UNK, BOS, EOS];

pub type Token = String;

/// Lookup form of a token.
pub fn normalize(token: &str, lowercase: bool) -> String {
    if lowercase {
        token.to_lowercase()
    } else {
        token.to_owned()
    }
}

/// A constituency tree in PTB bracketing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ParseTree {
    Leaf(Token),
    Node {
        label: String,
        children: Vec<ParseTree>,
    },
}

impl ParseTree {
    pub fn node(label: impl Into<String>, children: Vec<ParseTree>) -> Self {
        ParseTree::Node {
            label: label.into(),
            children,
        }
    }

    pub fn leaf(token: impl Into<String>) -> Self {
        ParseTree::Leaf(token.into())
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, ParseTree::Leaf(_))
    }

    pub fn children(&self) -> &[ParseTree] {
        match self {
            ParseTree::Leaf(_) => &[],
            ParseTree::Node { children, .. } => children,
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            ParseTree::Leaf(_) => 1,
            ParseTree::Node { children, .. } => children.iter().map(ParseTree::leaf_count).sum(),
        }
    }

    /// Subtree at a child-index path from this node.
    pub fn get(&self, path: &[usize]) -> Option<&ParseTree> {
        path.iter().try_fold(self, |t, &i| t.children().get(i))
    }

    pub fn get_mut(&mut self, path: &[usize]) -> Option<&mut ParseTree> {
        let mut cur = self;
        for &i in path {
            cur = match cur {
                ParseTree::Leaf(_) => return None,
                ParseTree::Node { children, .. } => children.get_mut(i)?,
            };
        }
        Some(cur)
    }

    /// Paths of all internal nodes in pre-order, root (`[]`) first.
    pub fn internal_paths(&self) -> Vec<Vec<usize>> {
        fn walk(t: &ParseTree, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if let ParseTree::Node { children, .. } = t {
                out.push(path.clone());
                for (i, c) in children.iter().enumerate() {
                    path.push(i);
                    walk(c, path, out);
                    path.pop();
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut Vec::new(), &mut out);
        out
    }

    /// Replace the `index`-th leaf token (left to right). Returns false when
    /// the tree has fewer leaves.
    pub fn replace_leaf(&mut self, index: usize, token: &str) -> bool {
        fn walk(t: &mut ParseTree, remaining: &mut usize, token: &str) -> bool {
            match t {
                ParseTree::Leaf(tok) => {
                    if *remaining == 0 {
                        *tok = token.to_owned();
                        true
                    } else {
                        *remaining -= 1;
                        false
                    }
                }
                ParseTree::Node { children, .. } => {
                    children.iter_mut().any(|c| walk(c, remaining, token))
                }
            }
        }
        let mut remaining = index;
        walk(self, &mut remaining, token)
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseTree::Leaf(tok) => f.write_str(tok),
            ParseTree::Node { label, children } => {
                write!(f, "({label}")?;
                for c in children {
                    write!(f, " {c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Left-to-right leaf tokens.
pub fn linearize(tree: &ParseTree) -> Vec<Token> {
    fn walk(t: &ParseTree, out: &mut Vec<Token>) {
        match t {
            ParseTree::Leaf(tok) => out.push(tok.clone()),
            ParseTree::Node { children, .. } => children.iter().for_each(|c| walk(c, out)),
        }
    }
    let mut out = Vec::new();
    walk(tree, &mut out);
    out
}

/// Parse a PTB-style bracketing such as `(ROOT (NP (DT A) (NN dog)))`.
///
/// Node labels may be empty (`( (S ...))`), leaves are bare tokens, and a
/// node without children is rejected.
pub fn parse_tree(text: &str) -> Result<ParseTree> {
    let mut parser = TreeParser {
        text,
        bytes: text.as_bytes(),
        pos: 0,
    };
    parser.skip_ws();
    let tree = match parser.peek() {
        Some(b'(') => parser.node()?,
        Some(_) => parser.atom().map(ParseTree::Leaf)?,
        None => return Err(parser.error(0, "empty input")),
    };
    parser.skip_ws();
    if parser.pos < parser.bytes.len() {
        return Err(parser.error(parser.pos, "trailing input after tree"));
    }
    Ok(tree)
}

struct TreeParser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl TreeParser<'_> {
    fn error(&self, offset: usize, message: &str) -> Error {
        Error::TreeParse {
            offset,
            message: message.to_owned(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|b| b.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn atom(&mut self) -> Result<String> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|b| !b.is_ascii_whitespace() && b != b'(' && b != b')')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error(start, "expected a token"));
        }
        Ok(self.text[start..self.pos].to_owned())
    }

    fn node(&mut self) -> Result<ParseTree> {
        debug_assert_eq!(self.peek(), Some(b'('));
        self.pos += 1;
        self.skip_ws();
        let label = match self.peek() {
            Some(b'(') | Some(b')') | None => String::new(),
            Some(_) => self.atom()?,
        };
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                None => return Err(self.error(self.pos, "unbalanced parentheses")),
                Some(b')') => {
                    if children.is_empty() {
                        return Err(self.error(self.pos, "empty node"));
                    }
                    self.pos += 1;
                    return Ok(ParseTree::Node { label, children });
                }
                Some(b'(') => children.push(self.node()?),
                Some(_) => children.push(ParseTree::Leaf(self.atom()?)),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub tree: Option<ParseTree>,
}

impl Sentence {
    /// Whitespace-tokenized sentence without a tree.
    pub fn from_text(text: &str) -> Self {
        Sentence {
            tokens: text.split_whitespace().map(str::to_owned).collect(),
            tree: None,
        }
    }

    pub fn from_tree(tree: ParseTree) -> Self {
        Sentence {
            tokens: linearize(&tree),
            tree: Some(tree),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Entailment,
    Contradiction,
    Neutral,
    Unlabeled,
}

impl Label {
    pub const CLASSES: [Label; 3] = [Label::Entailment, Label::Contradiction, Label::Neutral];

    /// Output class index (ent=0, con=1, neu=2); `None` for unlabeled.
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Entailment => Some(0),
            Label::Contradiction => Some(1),
            Label::Neutral => Some(2),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class(class: usize) -> Option<Label> {
        Label::CLASSES.get(class).copied()
    }

    /// SNLI `gold_label` string.
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Contradiction => "contradiction",
            Label::Neutral => "neutral",
            Label::Unlabeled => "-",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "entailment" => Some(Label::Entailment),
            "contradiction" => Some(Label::Contradiction),
            "neutral" => Some(Label::Neutral),
            "-" => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub premise: Sentence,
    pub hypothesis: Sentence,
    pub label: Label,
}

impl Instance {
    pub fn swapped(&self) -> Instance {
        Instance {
            premise: self.hypothesis.clone(),
            hypothesis: self.premise.clone(),
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    pub source: String,
}

/// One line of SNLI JSONL. Unknown fields are ignored on read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnliRecord {
    pub gold_label: String,
    pub sentence1: String,
    pub sentence2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence1_parse: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence2_parse: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inconsistency_score: Option<f64>,
}

impl SnliRecord {
    pub fn from_instance(inst: &Instance) -> Self {
        SnliRecord {
            gold_label: inst.label.as_str().to_owned(),
            sentence1: inst.premise.text(),
            sentence2: inst.hypothesis.text(),
            sentence1_parse: inst.premise.tree.as_ref().map(ToString::to_string),
            sentence2_parse: inst.hypothesis.tree.as_ref().map(ToString::to_string),
            inconsistency_score: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub keep_unlabeled: bool,
    /// Pairs with a sentence longer than this are dropped.
    pub max_len: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            keep_unlabeled: false,
            max_len: 64,
        }
    }
}

fn read_sentence(text: &str, parse: Option<&str>, where_: &str) -> Sentence {
    if let Some(parse) = parse {
        match parse_tree(parse) {
            Ok(tree) => return Sentence::from_tree(tree),
            Err(e) => log::warn!("{where_}: malformed parse ignored ({e})"),
        }
    }
    Sentence::from_text(text)
}

impl Corpus {
    pub fn new(instances: Vec<Instance>, source: impl Into<String>) -> Self {
        Corpus {
            instances,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Every sentence, premises and hypotheses interleaved in instance order.
    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.instances
            .iter()
            .flat_map(|i| [&i.premise, &i.hypothesis])
    }

    pub fn from_reader(reader: impl BufRead, source: &str, opts: &LoadOptions) -> Result<Self> {
        let mut instances = Vec::new();
        let mut too_long = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.map_err(|e| Error::io(source, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let format_err = |message: String| Error::Format {
                source_name: source.to_owned(),
                line: lineno,
                message,
            };
            let rec: SnliRecord = serde_json::from_str(&line).map_err(|e| format_err(e.to_string()))?;
            let label = Label::parse(&rec.gold_label)
                .ok_or_else(|| format_err(format!("unknown gold_label {:?}", rec.gold_label)))?;
            if label == Label::Unlabeled && !opts.keep_unlabeled {
                continue;
            }
            let where_ = format!("{source}:{lineno}");
            let premise = read_sentence(&rec.sentence1, rec.sentence1_parse.as_deref(), &where_);
            let hypothesis = read_sentence(&rec.sentence2, rec.sentence2_parse.as_deref(), &where_);
            if premise.is_empty() || hypothesis.is_empty() {
                log::warn!("{where_}: empty sentence, instance dropped");
                continue;
            }
            if premise.len() > opts.max_len || hypothesis.len() > opts.max_len {
                too_long += 1;
                continue;
            }
            instances.push(Instance {
                premise,
                hypothesis,
                label,
            });
        }
        if too_long > 0 {
            log::warn!(
                "{source}: dropped {too_long} instance(s) longer than {} tokens",
                opts.max_len
            );
        }
        Ok(Corpus::new(instances, source))
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for inst in &self.instances {
            let rec = SnliRecord::from_instance(inst);
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Load an SNLI JSONL file. Lines labelled `-` are kept only with
/// `keep_unlabeled`; unparseable bracketings fall back to whitespace tokens.
pub fn load_snli(path: &Path, opts: &LoadOptions) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_reader(BufReader::new(file), &path.display().to_string(), opts)
}

/// Token ↔ index map with counts. Indices 0..4 are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Token>,
    counts: Vec<u64>,
    index: HashMap<Token, usize>,
}

impl Vocab {
    /// Rebuild from `(token, count)` rows in index order, e.g. from a checkpoint.
    pub fn from_entries(entries: Vec<(Token, u64)>) -> Result<Self> {
        if entries.len() < RESERVED.len()
            || entries.iter().zip(RESERVED).any(|((t, _), r)| t != r)
        {
            return Err(Error::Contract(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (t, _)) in entries.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let (tokens, counts) = entries.into_iter().unzip();
        Ok(Vocab {
            tokens,
            counts,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens.iter().map(String::as_str).zip(self.counts.iter().copied())
    }

    /// Embedding row for a stored token: exact match, then lowercased, then UNK.
    pub fn lookup(&self, token: &str) -> usize {
        self.id(token)
            .or_else(|| self.id(&token.to_lowercase()))
            .unwrap_or(UNK_ID)
    }
}

/// Reserved tokens first, then tokens with `count >= min_count` by
/// descending count, ties in lexicographic order.
pub fn build_vocab(corpus: &Corpus, min_count: u64, lowercase: bool) -> Vocab {
    let mut counts: HashMap<Token, u64> = HashMap::new();
    for s in corpus.sentences() {
        for t in &s.tokens {
            *counts.entry(normalize(t, lowercase)).or_default() += 1;
        }
    }
    let mut kept: Vec<(Token, u64)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let entries = RESERVED
        .iter()
        .map(|r| (r.to_string(), 0))
        .chain(kept)
        .collect();
    Vocab::from_entries(entries).expect("reserved prefix and unique tokens by construction")
}
