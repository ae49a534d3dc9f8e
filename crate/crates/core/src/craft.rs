//! Crafted adversarial evaluation sets, rule-violation audits and accuracy.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use num_traits::Zero;

use crate::corpus::{Corpus, Instance, Label, Sentence, SnliRecord};
use crate::error::{Error, Result};
use crate::model::{CachedScorer, Scorer};
use crate::rules::{body_holds, head_holds, inconsistency_loss, Rule, RuleSet};
use crate::scalar::Scalar;

/// Rules that enter the instance score and the audit: those over at most
/// two variables.
fn pair_rules(rules: &RuleSet) -> impl Iterator<Item = &Rule> {
    rules.iter().filter(|r| r.arity() <= 2)
}

/// `Σ_r L_I(r, S) + L_I(r, S')` with `S = (premise, hypothesis)` and
/// `S' = (hypothesis, premise)`, over rules of at most two variables.
/// The label is ignored.
pub fn instance_score<S: Scorer + ?Sized>(
    scorer: &S,
    inst: &Instance,
    rules: &RuleSet,
) -> Result<S::Scalar> {
    let mut total = S::Scalar::zero();
    for rule in pair_rules(rules) {
        for pair in [
            [&inst.premise, &inst.hypothesis],
            [&inst.hypothesis, &inst.premise],
        ] {
            let s = rule.bind(&pair)?;
            total = total + inconsistency_loss(scorer, rule, &s)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CraftedDataset<T> {
    /// Originals at even positions, their swaps right after.
    pub instances: Vec<Instance>,
    /// One score per instance; a swap repeats its original's score.
    pub scores: Vec<T>,
    pub model: String,
    pub k: usize,
}

/// Top-`k` pairs of `d` by [`instance_score`] (ties keep corpus order),
/// each followed by its unlabeled swap.
pub fn craft_dataset<S: Scorer + ?Sized>(
    scorer: &S,
    d: &Corpus,
    rules: &RuleSet,
    k: usize,
    model: &str,
) -> Result<CraftedDataset<S::Scalar>> {
    if k == 0 || k > d.len() {
        return Err(Error::Argument(format!(
            "k must be in 1..={}, got {k}",
            d.len()
        )));
    }
    let cached = CachedScorer::new(scorer);
    let scores = d
        .instances
        .iter()
        .map(|inst| instance_score(&cached, inst, rules))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = CraftedDataset {
        instances: Vec::with_capacity(2 * k),
        scores: Vec::with_capacity(2 * k),
        model: model.to_owned(),
        k,
    };
    for &i in &order[..k] {
        let inst = &d.instances[i];
        out.instances.push(inst.clone());
        let mut swap = inst.swapped();
        swap.label = Label::Unlabeled;
        out.instances.push(swap);
        out.scores.extend([scores[i], scores[i]]);
    }
    Ok(out)
}

impl<T: Scalar> CraftedDataset<T> {
    /// Label each swap with the label symmetry forces on it: a contradiction
    /// stays a contradiction, anything else stays unlabeled.
    pub fn apply_symmetric_labels(&mut self) {
        for pair in self.instances.chunks_mut(2) {
            if let [orig, swap] = pair {
                swap.label = if orig.label == Label::Contradiction {
                    Label::Contradiction
                } else {
                    Label::Unlabeled
                };
            }
        }
    }

    pub fn to_corpus(&self) -> Corpus {
        Corpus::new(self.instances.clone(), format!("A[{}]_{}", self.model, self.k))
    }

    /// SNLI-style JSONL with an extra `inconsistency_score` field.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for (inst, score) in self.instances.iter().zip(&self.scores) {
            let mut rec = SnliRecord::from_instance(inst);
            rec.inconsistency_score = Some(score.as_f64());
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Tab-separated sheet for annotating the swapped pairs by hand.
    pub fn write_annotation_template(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "index\tpremise\thypothesis\toriginal_label\tlabel")?;
        for (i, pair) in self.instances.chunks(2).enumerate() {
            if let [orig, swap] = pair {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}",
                    2 * i + 1,
                    swap.premise.text(),
                    swap.hypothesis.text(),
                    orig.label.as_str(),
                    swap.label.as_str()
                )?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, template: Option<&Path>) -> Result<()> {
        write_file(path, |w| self.write_jsonl(w))?;
        if let Some(t) = template {
            write_file(t, |w| self.write_annotation_template(w))?;
        }
        Ok(())
    }
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleViolations {
    pub rule: String,
    /// Groundings whose body holds.
    pub body_count: u64,
    /// Groundings whose body holds and head does not.
    pub violation_count: u64,
}

impl RuleViolations {
    pub fn percentage(&self) -> f64 {
        percentage(self.violation_count, self.body_count)
    }
}

/// `100 · violations / body`, or 0 when the body never holds.
pub fn percentage(violations: u64, body: u64) -> f64 {
    if body == 0 {
        0.0
    } else {
        100.0 * violations as f64 / body as f64
    }
}

/// Two-decimal rendering used in reports.
pub fn format_pct(pct: f64) -> String {
    format!("{pct:.2}")
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ViolationReport {
    pub rules: Vec<RuleViolations>,
}

impl ViolationReport {
    pub fn get(&self, rule: &str) -> Option<&RuleViolations> {
        self.rules.iter().find(|r| r.rule == rule)
    }

    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        write!(w, "{self}")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, |w| self.write_tsv(w))
    }
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rule\tbody\tviolations\tpct")?;
        for r in &self.rules {
            writeln!(
                f,
                "{}\t{}\t{}\t{}",
                r.rule,
                r.body_count,
                r.violation_count,
                format_pct(r.percentage())
            )?;
        }
        Ok(())
    }
}

/// Count body and violation groundings for every rule of at most two
/// variables. One-variable rules range over the distinct sentences of `d`;
/// two-variable rules over both orderings of every pair.
pub fn audit<S: Scorer + ?Sized>(scorer: &S, d: &Corpus, rules: &RuleSet) -> Result<ViolationReport> {
    let cached = CachedScorer::new(scorer);
    let mut distinct: Vec<&Sentence> = Vec::new();
    let mut seen = HashSet::new();
    for s in d.sentences() {
        if seen.insert(&s.tokens) {
            distinct.push(s);
        }
    }
    let mut report = ViolationReport::default();
    for rule in pair_rules(rules) {
        let mut row = RuleViolations {
            rule: rule.name.clone(),
            body_count: 0,
            violation_count: 0,
        };
        let mut check = |bound: &[&Sentence]| -> Result<()> {
            let s = rule.bind(bound)?;
            if body_holds(&cached, rule, &s)? {
                row.body_count += 1;
                if !head_holds(&cached, rule, &s)? {
                    row.violation_count += 1;
                }
            }
            Ok(())
        };
        if rule.arity() == 1 {
            for s in &distinct {
                check(&[s])?;
            }
        } else {
            for inst in &d.instances {
                check(&[&inst.premise, &inst.hypothesis])?;
                check(&[&inst.hypothesis, &inst.premise])?;
            }
        }
        report.rules.push(row);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub labeled: usize,
    pub skipped: usize,
}

/// Argmax accuracy over labeled instances; unlabeled ones are skipped.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, d: &Corpus) -> Result<Evaluation> {
    let mut eval = Evaluation {
        accuracy: 0.0,
        correct: 0,
        labeled: 0,
        skipped: 0,
    };
    for inst in &d.instances {
        let Some(gold) = inst.label.class() else {
            eval.skipped += 1;
            continue;
        };
        eval.labeled += 1;
        if scorer.predict(&inst.premise, &inst.hypothesis)?.argmax() == gold {
            eval.correct += 1;
        }
    }
    if eval.labeled == 0 {
        return Err(Error::Argument(format!(
            "{} has no labeled instances",
            d.source
        )));
    }
    eval.accuracy = eval.correct as f64 / eval.labeled as f64;
    Ok(eval)
}
