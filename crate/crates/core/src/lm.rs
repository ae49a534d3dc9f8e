//! Additive-smoothed n-gram language model used as a fluency gate.
//!
//! `p(w | c) = (count(c, w) + δ) / (total(c) + δ·|V|)`, where each sentence is
//! padded with `order − 1` BOS tokens and one EOS token. Unseen contexts
//! have `total = 0`, so every continuation gets `1/|V|`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::corpus::{normalize, Corpus, Sentence, BOS, EOS, RESERVED};
use crate::error::{Error, Result};
use crate::rules::Substitution;

type Id = u32;
const UNKNOWN: Id = Id::MAX;

#[derive(Debug, Clone)]
pub struct LanguageModel {
    order: usize,
    delta: f64,
    vocab_size: usize,
    symbols: Vec<String>,
    index: HashMap<String, Id>,
    counts: HashMap<Vec<Id>, HashMap<Id, u64>>,
    totals: HashMap<Vec<Id>, u64>,
    /// Continuations of each context, most frequent first, ties lexicographic.
    ranked: HashMap<Vec<Id>, Vec<Id>>,
}

impl PartialEq for LanguageModel {
    fn eq(&self, other: &Self) -> bool {
        self.order == other.order
            && self.delta.to_bits() == other.delta.to_bits()
            && self.vocab_size == other.vocab_size
            && self.entries() == other.entries()
    }
}

/// Fit counts over every premise and hypothesis of `corpus`.
///
/// `vocab_size` for smoothing is the number of distinct (normalized) word
/// types plus the four reserved symbols.
pub fn fit_lm(corpus: &Corpus, order: usize, delta: f64, lowercase: bool) -> Result<LanguageModel> {
    LanguageModel::fit(corpus.sentences(), order, delta, lowercase)
}

impl LanguageModel {
    fn empty(order: usize, delta: f64, vocab_size: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::Argument("language model order must be at least 1".into()));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Argument("smoothing constant must be positive".into()));
        }
        if vocab_size == 0 {
            return Err(Error::Argument("vocabulary size must be positive".into()));
        }
        let mut lm = LanguageModel {
            order,
            delta,
            vocab_size,
            symbols: Vec::new(),
            index: HashMap::new(),
            counts: HashMap::new(),
            totals: HashMap::new(),
            ranked: HashMap::new(),
        };
        for r in RESERVED {
            lm.intern(r);
        }
        Ok(lm)
    }

    pub fn fit<'a>(
        sentences: impl IntoIterator<Item = &'a Sentence>,
        order: usize,
        delta: f64,
        lowercase: bool,
    ) -> Result<Self> {
        let mut lm = Self::empty(order, delta, 1)?;
        let mut seen = 0usize;
        for s in sentences {
            if s.is_empty() {
                continue;
            }
            seen += 1;
            let ids: Vec<Id> = s
                .tokens
                .iter()
                .map(|t| lm.intern(&normalize(t, lowercase)))
                .collect();
            let padded = lm.pad(&ids);
            for window in padded.windows(order) {
                let (ctx, w) = window.split_at(order - 1);
                *lm.counts.entry(ctx.to_vec()).or_default().entry(w[0]).or_default() += 1;
                *lm.totals.entry(ctx.to_vec()).or_default() += 1;
            }
        }
        if seen == 0 {
            return Err(Error::Degenerate("no sentences to fit a language model on".into()));
        }
        lm.vocab_size = lm.symbols.len();
        lm.rebuild_rankings();
        Ok(lm)
    }

    /// Build from explicit `(context, token, count)` rows.
    pub fn from_counts(
        order: usize,
        delta: f64,
        vocab_size: usize,
        rows: impl IntoIterator<Item = (Vec<String>, String, u64)>,
    ) -> Result<Self> {
        let mut lm = Self::empty(order, delta, vocab_size)?;
        for (ctx, token, count) in rows {
            if ctx.len() != order - 1 {
                return Err(Error::Argument(format!(
                    "context {ctx:?} does not have {} tokens",
                    order - 1
                )));
            }
            if count == 0 {
                continue;
            }
            let ctx: Vec<Id> = ctx.iter().map(|t| lm.intern(t)).collect();
            let w = lm.intern(&token);
            *lm.counts.entry(ctx.clone()).or_default().entry(w).or_default() += count;
            *lm.totals.entry(ctx).or_default() += count;
        }
        lm.rebuild_rankings();
        Ok(lm)
    }

    fn intern(&mut self, token: &str) -> Id {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.symbols.len() as Id;
        self.symbols.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    fn bos(&self) -> Id {
        self.index[BOS]
    }

    fn eos(&self) -> Id {
        self.index[EOS]
    }

    fn pad(&self, ids: &[Id]) -> Vec<Id> {
        let mut padded = vec![self.bos(); self.order - 1];
        padded.extend_from_slice(ids);
        padded.push(self.eos());
        padded
    }

    fn rebuild_rankings(&mut self) {
        let symbols = &self.symbols;
        self.ranked = self
            .counts
            .iter()
            .map(|(ctx, conts)| {
                let mut ids: Vec<Id> = conts.keys().copied().collect();
                ids.sort_by(|a, b| {
                    conts[b]
                        .cmp(&conts[a])
                        .then_with(|| symbols[*a as usize].cmp(&symbols[*b as usize]))
                });
                (ctx.clone(), ids)
            })
            .collect();
    }

    /// Exact match, then the lowercased form.
    fn lookup(&self, token: &str) -> Id {
        self.index
            .get(token)
            .or_else(|| self.index.get(&token.to_lowercase()))
            .copied()
            .unwrap_or(UNKNOWN)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn conditional_ids(&self, ctx: &[Id], w: Id) -> f64 {
        let count = self
            .counts
            .get(ctx)
            .and_then(|m| m.get(&w))
            .copied()
            .unwrap_or(0);
        let total = self.totals.get(ctx).copied().unwrap_or(0);
        (count as f64 + self.delta) / (total as f64 + self.delta * self.vocab_size as f64)
    }

    /// Smoothed `p(token | context)`; context tokens are given unpadded and
    /// must number `order − 1` (use `"<s>"` for sentence-initial positions).
    pub fn conditional(&self, context: &[&str], token: &str) -> f64 {
        let ctx: Vec<Id> = context.iter().map(|t| self.lookup(t)).collect();
        self.conditional_ids(&ctx, self.lookup(token))
    }

    /// Natural-log probability of the sentence, EOS included.
    pub fn log_prob(&self, s: &Sentence) -> f64 {
        let ids: Vec<Id> = s.tokens.iter().map(|t| self.lookup(t)).collect();
        let padded = self.pad(&ids);
        padded
            .windows(self.order)
            .map(|win| {
                let (ctx, w) = win.split_at(self.order - 1);
                self.conditional_ids(ctx, w[0]).ln()
            })
            .sum()
    }

    /// `−log_prob / (ℓ + 1)`: the log of per-token perplexity.
    pub fn per_token_nll(&self, s: &Sentence) -> f64 {
        -self.log_prob(s) / (s.len() + 1) as f64
    }

    /// Observed continuations of the `order − 1` tokens preceding position
    /// `site`, most frequent first. Reserved symbols are skipped.
    pub fn ranked_continuations(&self, tokens: &[String], site: usize) -> Vec<&str> {
        let ids: Vec<Id> = tokens[..site].iter().map(|t| self.lookup(t)).collect();
        let mut ctx = vec![self.bos(); (self.order - 1).saturating_sub(ids.len())];
        let keep = (self.order - 1).min(ids.len());
        ctx.extend_from_slice(&ids[ids.len() - keep..]);
        self.ranked
            .get(&ctx)
            .into_iter()
            .flatten()
            .map(|&id| self.symbols[id as usize].as_str())
            .filter(|t| !RESERVED.contains(t))
            .collect()
    }

    /// `(context, token, count)` rows in a canonical order.
    pub fn entries(&self) -> Vec<(Vec<&str>, &str, u64)> {
        let mut rows: BTreeMap<(Vec<&str>, &str), u64> = BTreeMap::new();
        for (ctx, conts) in &self.counts {
            let ctx: Vec<&str> = ctx.iter().map(|&i| self.symbols[i as usize].as_str()).collect();
            for (&w, &c) in conts {
                rows.insert((ctx.clone(), self.symbols[w as usize].as_str()), c);
            }
        }
        rows.into_iter().map(|((c, w), n)| (c, w, n)).collect()
    }

    /// Every symbol the smoothed distribution is normalized over, when the
    /// model was fitted (reserved symbols included).
    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Contexts with at least one observation.
    pub fn contexts(&self) -> Vec<Vec<&str>> {
        let mut out: Vec<Vec<&str>> = self
            .totals
            .keys()
            .map(|c| c.iter().map(|&i| self.symbols[i as usize].as_str()).collect())
            .collect();
        out.sort();
        out
    }

    /// `NLILM 1 <order> <δ> <vocab_size>` followed by one
    /// `<context tokens TAB-joined> <token> <count>` line per n-gram.
    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "NLILM 1 {} {} {}", self.order, self.delta, self.vocab_size)?;
        for (ctx, token, count) in self.entries() {
            writeln!(w, "{} {} {}", ctx.join("\t"), token, count)?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Format {
            source_name: "language model".into(),
            line,
            message,
        };
        let mut lines = r.lines();
        let mut next = |n: usize| -> Result<Option<String>> {
            lines
                .next()
                .transpose()
                .map_err(|e| bad(n, e.to_string()))
        };
        let header = next(1)?.ok_or_else(|| bad(1, "empty file".into()))?;
        let f: Vec<&str> = header.split(' ').collect();
        if f.len() != 5 || f[0] != "NLILM" || f[1] != "1" {
            return Err(bad(1, format!("bad header {header:?}")));
        }
        let order: usize = f[2].parse().map_err(|_| bad(1, "bad order".into()))?;
        let delta: f64 = f[3].parse().map_err(|_| bad(1, "bad delta".into()))?;
        let vocab_size: usize = f[4].parse().map_err(|_| bad(1, "bad vocab size".into()))?;
        let mut rows = Vec::new();
        let mut n = 1;
        while let Some(line) = next(n + 1)? {
            n += 1;
            let mut parts = line.rsplitn(3, ' ');
            let (Some(count), Some(token), Some(ctx)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(bad(n, format!("bad n-gram line {line:?}")));
            };
            let count: u64 = count.parse().map_err(|_| bad(n, "bad count".into()))?;
            let ctx: Vec<String> = if ctx.is_empty() {
                Vec::new()
            } else {
                ctx.split('\t').map(str::to_owned).collect()
            };
            rows.push((ctx, token.to_owned(), count));
        }
        Self::from_counts(order, delta, vocab_size, rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file))
    }
}

/// Every sentence bound in `s` has per-token NLL at most `tau`.
pub fn admissible(lm: &LanguageModel, s: &Substitution, tau: f64) -> bool {
    s.sentences().all(|x| lm.per_token_nll(x) <= tau)
}
