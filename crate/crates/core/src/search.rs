//! Adversarial substitution sets by prototype editing and re-ranking.
//!
//! Each round samples seed pairs, binds them to every rule's variables,
//! applies one perturbation (word swap, subtree deletion or subtree
//! insertion) to one bound sentence, drops candidates the language model
//! rejects, and ranks the rest by inconsistency loss.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, Corpus, Instance, ParseTree, Sentence, Token};
use crate::error::Result;
use crate::lm::LanguageModel;
use crate::model::{CachedScorer, Scorer};
use crate::rules::{inconsistency_loss, RuleSet, Substitution};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    WordSwap,
    SubtreeDelete,
    SubtreeInsert,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 3] = [
        PerturbationKind::WordSwap,
        PerturbationKind::SubtreeDelete,
        PerturbationKind::SubtreeInsert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::WordSwap => "word_swap",
            PerturbationKind::SubtreeDelete => "subtree_delete",
            PerturbationKind::SubtreeInsert => "subtree_insert",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Where an edit applies: a token index, or a child-index path into the tree.
/// For insertions the path names the inserted subtree's position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Token(usize),
    Node(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Token(Token),
    Subtree(ParseTree),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub site: Site,
    /// Replacement token for swaps, donor subtree for insertions.
    pub payload: Option<Payload>,
}

/// One perturbed sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Edit {
    pub sentence: Sentence,
    pub perturbation: Perturbation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub seeds_per_round: usize,
    pub pool_size: usize,
    /// Per-token negative log-likelihood threshold.
    pub tau: f64,
    pub word_candidates_per_site: usize,
    pub max_sites_per_sentence: usize,
    pub rng_seed: u64,
    pub enabled_kinds: Vec<PerturbationKind>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            seeds_per_round: 32,
            pool_size: 512,
            tau: 6.0,
            word_candidates_per_site: 3,
            max_sites_per_sentence: 3,
            rng_seed: 0,
            enabled_kinds: PerturbationKind::ALL.to_vec(),
        }
    }
}

impl SearchConfig {
    pub fn enabled(&self, kind: PerturbationKind) -> bool {
        self.enabled_kinds.contains(&kind)
    }

    /// Upper bound on the edits produced for one sentence.
    pub fn max_edits_per_sentence(&self) -> usize {
        let sites = self.max_sites_per_sentence;
        let mut bound = 0;
        if self.enabled(PerturbationKind::WordSwap) {
            bound += sites * self.word_candidates_per_site;
        }
        if self.enabled(PerturbationKind::SubtreeDelete) {
            bound += sites;
        }
        if self.enabled(PerturbationKind::SubtreeInsert) {
            bound += sites;
        }
        bound
    }
}

/// Donor subtrees may have at most this many leaves.
pub const MAX_DONOR_LEAVES: usize = 5;

/// Applies single edits, ranking swap candidates with the language model
/// and drawing inserted constituents from a donor pool.
pub struct Perturber<'a> {
    lm: &'a LanguageModel,
    donors: Vec<ParseTree>,
}

impl<'a> Perturber<'a> {
    /// Donors are the distinct non-root constituents of `corpus` parses
    /// with at most [`MAX_DONOR_LEAVES`] leaves, in first-seen order.
    pub fn new(lm: &'a LanguageModel, corpus: &Corpus) -> Self {
        let mut seen = HashSet::new();
        let mut donors = Vec::new();
        for tree in corpus.sentences().filter_map(|s| s.tree.as_ref()) {
            for path in tree.internal_paths().into_iter().skip(1) {
                let node = tree.get(&path).expect("path from internal_paths");
                if node.leaf_count() <= MAX_DONOR_LEAVES && seen.insert(node.to_string()) {
                    donors.push(node.clone());
                }
            }
        }
        Perturber { lm, donors }
    }

    pub fn with_donors(lm: &'a LanguageModel, donors: Vec<ParseTree>) -> Self {
        Perturber { lm, donors }
    }

    pub fn lm(&self) -> &LanguageModel {
        self.lm
    }

    pub fn donors(&self) -> &[ParseTree] {
        &self.donors
    }

    /// All single-edit variants of `s`, deduplicated by token sequence.
    pub fn enumerate<R: Rng + ?Sized>(
        &self,
        s: &Sentence,
        config: &SearchConfig,
        rng: &mut R,
    ) -> Vec<Edit> {
        let mut out = Vec::new();
        if config.enabled(PerturbationKind::WordSwap) {
            self.word_swaps(s, config, rng, &mut out);
        }
        if let Some(tree) = &s.tree {
            if config.enabled(PerturbationKind::SubtreeDelete) {
                subtree_deletions(tree, config, rng, &mut out);
            }
            if config.enabled(PerturbationKind::SubtreeInsert) {
                self.subtree_insertions(tree, config, rng, &mut out);
            }
        }
        let mut seen: HashSet<Vec<Token>> = HashSet::new();
        seen.insert(s.tokens.clone());
        out.retain(|e| !e.sentence.is_empty() && seen.insert(e.sentence.tokens.clone()));
        out
    }

    fn word_swaps<R: Rng + ?Sized>(
        &self,
        s: &Sentence,
        config: &SearchConfig,
        rng: &mut R,
        out: &mut Vec<Edit>,
    ) {
        for site in sample_sorted(rng, s.len(), config.max_sites_per_sentence) {
            let current = normalize(&s.tokens[site], true);
            let candidates = self
                .lm
                .ranked_continuations(&s.tokens, site)
                .into_iter()
                .filter(|w| normalize(w, true) != current)
                .take(config.word_candidates_per_site);
            for word in candidates {
                let mut sentence = s.clone();
                sentence.tokens[site] = word.to_owned();
                if let Some(tree) = &mut sentence.tree {
                    tree.replace_leaf(site, word);
                }
                out.push(Edit {
                    sentence,
                    perturbation: Perturbation {
                        kind: PerturbationKind::WordSwap,
                        site: Site::Token(site),
                        payload: Some(Payload::Token(word.to_owned())),
                    },
                });
            }
        }
    }

    fn subtree_insertions<R: Rng + ?Sized>(
        &self,
        tree: &ParseTree,
        config: &SearchConfig,
        rng: &mut R,
        out: &mut Vec<Edit>,
    ) {
        if self.donors.is_empty() {
            return;
        }
        let points = tree.internal_paths();
        for i in sample_sorted(rng, points.len(), config.max_sites_per_sentence) {
            let path = &points[i];
            let donor = &self.donors[rng.gen_range(0..self.donors.len())];
            let mut edited = tree.clone();
            let Some(ParseTree::Node { children, .. }) = edited.get_mut(path) else {
                continue;
            };
            let position = rng.gen_range(0..=children.len());
            children.insert(position, donor.clone());
            let mut site = path.clone();
            site.push(position);
            out.push(Edit {
                sentence: Sentence::from_tree(edited),
                perturbation: Perturbation {
                    kind: PerturbationKind::SubtreeInsert,
                    site: Site::Node(site),
                    payload: Some(Payload::Subtree(donor.clone())),
                },
            });
        }
    }
}

fn subtree_deletions<R: Rng + ?Sized>(
    tree: &ParseTree,
    config: &SearchConfig,
    rng: &mut R,
    out: &mut Vec<Edit>,
) {
    let eligible: Vec<Vec<usize>> = tree.internal_paths().into_iter().skip(1).collect();
    for i in sample_sorted(rng, eligible.len(), config.max_sites_per_sentence) {
        let path = &eligible[i];
        if let Some(edited) = remove_subtree(tree, path) {
            out.push(Edit {
                sentence: Sentence::from_tree(edited),
                perturbation: Perturbation {
                    kind: PerturbationKind::SubtreeDelete,
                    site: Site::Node(path.clone()),
                    payload: None,
                },
            });
        }
    }
}

/// Remove the node at `path` (non-empty) and any ancestors left without
/// children. `None` when that would empty the root.
pub fn remove_subtree(tree: &ParseTree, path: &[usize]) -> Option<ParseTree> {
    assert!(!path.is_empty(), "the root cannot be removed");
    let mut edited = tree.clone();
    let mut depth = path.len();
    loop {
        let parent = edited.get_mut(&path[..depth - 1])?;
        let ParseTree::Node { children, .. } = parent else {
            return None;
        };
        if path[depth - 1] >= children.len() {
            return None;
        }
        children.remove(path[depth - 1]);
        if !children.is_empty() {
            return Some(edited);
        }
        depth -= 1;
        if depth == 0 {
            return None;
        }
    }
}

fn sample_sorted<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut picked = index::sample(rng, n, k.min(n)).into_vec();
    picked.sort_unstable();
    picked
}

/// Single edits of `s`; see [`Perturber::enumerate`].
pub fn enumerate_perturbations<R: Rng + ?Sized>(
    s: &Sentence,
    perturber: &Perturber<'_>,
    config: &SearchConfig,
    rng: &mut R,
) -> Vec<Edit> {
    perturber.enumerate(s, config, rng)
}

/// How a candidate was produced from its seed pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index of the seed instance in the slice given to the search.
    pub seed: usize,
    /// Variable whose binding was perturbed.
    pub variable: String,
    pub kind: PerturbationKind,
    pub site: Site,
}

/// A grounded rule before gating and scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub rule_index: usize,
    pub substitution: Substitution,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSet<T> {
    pub rule_index: usize,
    pub rule: String,
    pub substitution: Substitution,
    pub loss: T,
    pub provenance: Provenance,
    /// Position of the candidate in the logged pool.
    pub pool_index: usize,
}

/// Search result plus the full candidate pool, so callers can re-rank it
/// independently.
#[derive(Debug, Clone)]
pub struct AttackOutcome<T> {
    pub sets: Vec<AdversarialSet<T>>,
    pub pool: Vec<Candidate>,
}

fn bind_candidates(
    rules: &RuleSet,
    seed: usize,
    pair: [&Sentence; 2],
    edits: [&[Edit]; 2],
    pool: &mut Vec<Candidate>,
) {
    for (rule_index, rule) in rules.iter().enumerate() {
        let vars = rule.variables();
        let mut push = |bound: Vec<&Sentence>, perturbed: usize, edit: &Edit| {
            let substitution =
                Substitution::from_pairs(vars.iter().zip(bound).map(|(v, s)| (*v, s.clone())));
            pool.push(Candidate {
                rule_index,
                substitution,
                provenance: Provenance {
                    seed,
                    variable: vars[perturbed].to_owned(),
                    kind: edit.perturbation.kind,
                    site: edit.perturbation.site.clone(),
                },
            });
        };
        match vars.len() {
            1 => {
                for side in edits {
                    for e in side {
                        push(vec![&e.sentence], 0, e);
                    }
                }
            }
            2 => {
                for (first, second) in [(0, 1), (1, 0)] {
                    for e in edits[first] {
                        push(vec![&e.sentence, pair[second]], 0, e);
                    }
                    for e in edits[second] {
                        push(vec![pair[first], &e.sentence], 1, e);
                    }
                }
            }
            3 => {
                // the third sentence is an edit of the second binding
                for (first, second) in [(0, 1), (1, 0)] {
                    for e in edits[second] {
                        push(vec![pair[first], pair[second], &e.sentence], 2, e);
                    }
                }
            }
            n => log::warn!("rule {} has {n} variables; skipped by the search", rule.name),
        }
    }
}

/// Build the candidate pool for one round: sample seeds, perturb both
/// sentences of each, bind them to every rule, and subsample to `pool_size`.
pub fn build_pool<R: Rng + ?Sized>(
    perturber: &Perturber<'_>,
    rules: &RuleSet,
    seeds: &[Instance],
    config: &SearchConfig,
    rng: &mut R,
) -> Vec<Candidate> {
    let mut pool = Vec::new();
    for seed in sample_sorted(rng, seeds.len(), config.seeds_per_round.max(1)) {
        let inst = &seeds[seed];
        let premise_edits = perturber.enumerate(&inst.premise, config, rng);
        let hypothesis_edits = perturber.enumerate(&inst.hypothesis, config, rng);
        bind_candidates(
            rules,
            seed,
            [&inst.premise, &inst.hypothesis],
            [&premise_edits, &hypothesis_edits],
            &mut pool,
        );
    }
    if pool.len() > config.pool_size {
        let keep = sample_sorted(rng, pool.len(), config.pool_size);
        let mut keep = keep.into_iter().peekable();
        pool = pool
            .into_iter()
            .enumerate()
            .filter_map(|(i, c)| {
                if keep.peek() == Some(&i) {
                    keep.next();
                    Some(c)
                } else {
                    None
                }
            })
            .collect();
    }
    pool
}

/// Stochastic perturbation re-ranking: returns every admissible candidate
/// with its loss, highest first; ties go to the rule name, then pool order.
pub fn generate_adversarials<S, R>(
    scorer: &S,
    perturber: &Perturber<'_>,
    rules: &RuleSet,
    seeds: &[Instance],
    config: &SearchConfig,
    rng: &mut R,
) -> Result<AttackOutcome<S::Scalar>>
where
    S: Scorer + ?Sized,
    R: Rng + ?Sized,
{
    let pool = build_pool(perturber, rules, seeds, config, rng);
    let lm = perturber.lm();
    let mut nll: HashMap<Vec<Token>, f64> = HashMap::new();
    let mut admissible = |s: &Substitution| {
        s.sentences().all(|x| {
            let v = *nll
                .entry(x.tokens.clone())
                .or_insert_with(|| lm.per_token_nll(x));
            v <= config.tau
        })
    };
    let cached = CachedScorer::new(scorer);
    let mut sets = Vec::new();
    for (pool_index, cand) in pool.iter().enumerate() {
        if !admissible(&cand.substitution) {
            continue;
        }
        let rule = &rules.rules()[cand.rule_index];
        let loss = inconsistency_loss(&cached, rule, &cand.substitution)?;
        sets.push(AdversarialSet {
            rule_index: cand.rule_index,
            rule: rule.name.clone(),
            substitution: cand.substitution.clone(),
            loss,
            provenance: cand.provenance.clone(),
            pool_index,
        });
    }
    sets.sort_by(|a, b| {
        b.loss
            .partial_cmp(&a.loss)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.rule.cmp(&b.rule))
            .then_with(|| a.pool_index.cmp(&b.pool_index))
    });
    Ok(AttackOutcome { sets, pool })
}

/// One line of attack output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub rule: String,
    pub loss: f64,
    pub sentences: BTreeMap<String, Vec<String>>,
    pub provenance: Provenance,
}

impl<T: Scalar> From<&AdversarialSet<T>> for AttackRecord {
    fn from(set: &AdversarialSet<T>) -> Self {
        AttackRecord {
            rule: set.rule.clone(),
            loss: set.loss.as_f64(),
            sentences: set
                .substitution
                .iter()
                .map(|(v, s)| (v.to_owned(), s.tokens.clone()))
                .collect(),
            provenance: set.provenance.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_tree, Label};
    use crate::lm::LanguageModel;
    use crate::model::testing::{FnScorer, TableScorer};
    use crate::seed;

    fn tree_sentence(text: &str) -> Sentence {
        Sentence::from_tree(parse_tree(text).unwrap())
    }

    fn fixture() -> Corpus {
        let mk = |p: &str, h: &str, label| Instance {
            premise: tree_sentence(p),
            hypothesis: tree_sentence(h),
            label,
        };
        Corpus::new(
            vec![
                mk(
                    "(ROOT (S (NP (DT A) (NN dog)) (VP (VBZ runs) (PP (IN in) (NP (DT the) (NN park))))))",
                    "(ROOT (S (NP (DT An) (NN animal)) (VP (VBZ moves))))",
                    Label::Entailment,
                ),
                mk(
                    "(ROOT (S (NP (DT A) (NN cat)) (VP (VBZ sleeps))))",
                    "(ROOT (S (NP (DT A) (NN dog)) (VP (VBZ runs))))",
                    Label::Contradiction,
                ),
                mk(
                    "(ROOT (S (NP (DT The) (JJ old) (NN man)) (VP (VBZ eats))))",
                    "(ROOT (S (NP (DT The) (NN man)) (VP (VBZ eats) (NP (NN food)))))",
                    Label::Neutral,
                ),
            ],
            "fixture",
        )
    }

    fn lm(c: &Corpus) -> LanguageModel {
        crate::lm::fit_lm(c, 2, 0.1, true).unwrap()
    }

    #[test]
    fn one_token_treeless_sentence_is_bounded() {
        let c = fixture();
        let lm = lm(&c);
        let p = Perturber::new(&lm, &c);
        let cfg = SearchConfig {
            word_candidates_per_site: 3,
            ..SearchConfig::default()
        };
        let edits = p.enumerate(&Sentence::from_text("a"), &cfg, &mut seed::rng(1));
        assert!(!edits.is_empty() && edits.len() <= 3);
        assert!(edits.iter().all(|e| e.sentence.len() == 1 && e.sentence.tree.is_none()));
        assert!(edits.iter().all(|e| e.perturbation.kind == PerturbationKind::WordSwap));
    }

    #[test]
    fn deleting_vp_leaves_subject() {
        let t = parse_tree("(ROOT (NP (DT A) (NN dog)) (VP (VBZ runs)))").unwrap();
        let edited = remove_subtree(&t, &[1]).unwrap();
        assert_eq!(crate::corpus::linearize(&edited), ["A", "dog"]);
        // deleting a lone preterminal also drops its emptied parent
        let edited = remove_subtree(&t, &[1, 0]).unwrap();
        assert_eq!(edited, parse_tree("(ROOT (NP (DT A) (NN dog)))").unwrap());
    }

    #[test]
    fn deletion_that_empties_the_sentence_is_skipped() {
        let t = parse_tree("(ROOT (S (NP (NN dogs))))").unwrap();
        assert!(remove_subtree(&t, &[0]).is_none());
        assert!(remove_subtree(&t, &[0, 0, 0]).is_none());
        let c = fixture();
        let lm = lm(&c);
        let p = Perturber::new(&lm, &c);
        let cfg = SearchConfig {
            enabled_kinds: vec![PerturbationKind::SubtreeDelete],
            max_sites_per_sentence: 10,
            ..SearchConfig::default()
        };
        let s = Sentence::from_tree(t);
        assert!(p.enumerate(&s, &cfg, &mut seed::rng(0)).is_empty());
    }

    #[test]
    fn edits_respect_bound_and_are_deterministic() {
        let c = fixture();
        let lm = lm(&c);
        let p = Perturber::new(&lm, &c);
        assert!(p.donors().iter().all(|d| d.leaf_count() <= MAX_DONOR_LEAVES));
        let cfg = SearchConfig::default();
        for s in c.sentences() {
            let a = p.enumerate(s, &cfg, &mut seed::rng(5));
            let b = p.enumerate(s, &cfg, &mut seed::rng(5));
            assert_eq!(a, b);
            assert!(a.len() <= cfg.max_edits_per_sentence());
            for e in &a {
                assert_ne!(e.sentence.tokens, s.tokens);
                let tree = e.sentence.tree.as_ref().unwrap();
                assert_eq!(crate::corpus::linearize(tree), e.sentence.tokens);
            }
        }
    }

    #[test]
    fn fully_gated_search_is_empty() {
        let c = fixture();
        let lm = lm(&c);
        let p = Perturber::new(&lm, &c);
        let cfg = SearchConfig {
            tau: 0.0,
            ..SearchConfig::default()
        };
        let out = generate_adversarials(
            &TableScorer::uniform(),
            &p,
            &RuleSet::nli(),
            &c.instances,
            &cfg,
            &mut seed::rng(2),
        )
        .unwrap();
        assert!(!out.pool.is_empty());
        assert!(out.sets.is_empty());
    }

    #[test]
    fn symmetric_scorer_never_violates_symmetry() {
        let c = fixture();
        let lm = lm(&c);
        let p = Perturber::new(&lm, &c);
        let rules = crate::rules::parse_rules("r2: con(X1,X2) => con(X2,X1)").unwrap();
        // contradiction probability depends only on the unordered pair
        let scorer = FnScorer(|a: &Sentence, b: &Sentence| {
            let n = (a.len() + b.len()) as f64;
            let con = 1.0 / (1.0 + n);
            [(1.0 - con) / 2.0, con, (1.0 - con) / 2.0]
        });
        let cfg = SearchConfig {
            tau: 1e9,
            ..SearchConfig::default()
        };
        let out =
            generate_adversarials(&scorer, &p, &rules, &c.instances, &cfg, &mut seed::rng(3)).unwrap();
        assert!(!out.sets.is_empty());
        assert!(out.sets.iter().all(|s| s.loss == 0.0));
    }

    #[test]
    fn three_variable_rules_perturb_the_second_binding() {
        let c = fixture();
        let lm = lm(&c);
        let p = Perturber::new(&lm, &c);
        let rules = crate::rules::parse_rules("r5: ent(X1,X2) & ent(X2,X3) => ent(X1,X3)").unwrap();
        let cfg = SearchConfig {
            tau: 1e9,
            ..SearchConfig::default()
        };
        let pool = build_pool(&p, &rules, &c.instances, &cfg, &mut seed::rng(4));
        assert!(!pool.is_empty());
        for cand in &pool {
            assert_eq!(cand.provenance.variable, "X3");
            let inst = &c.instances[cand.provenance.seed];
            let x1 = cand.substitution.get("X1").unwrap();
            let x2 = cand.substitution.get("X2").unwrap();
            assert!(
                (x1 == &inst.premise && x2 == &inst.hypothesis)
                    || (x1 == &inst.hypothesis && x2 == &inst.premise)
            );
        }
    }

    #[test]
    fn pool_is_capped() {
        let c = fixture();
        let lm = lm(&c);
        let p = Perturber::new(&lm, &c);
        let cfg = SearchConfig {
            pool_size: 7,
            ..SearchConfig::default()
        };
        let pool = build_pool(&p, &RuleSet::nli(), &c.instances, &cfg, &mut seed::rng(9));
        assert_eq!(pool.len(), 7);
    }

    #[test]
    fn records_serialize_as_jsonl_objects() {
        let set = AdversarialSet {
            rule_index: 1,
            rule: "r2".into(),
            substitution: Substitution::from_pairs([
                ("X1", Sentence::from_text("a b")),
                ("X2", Sentence::from_text("c")),
            ]),
            loss: 0.5f64,
            provenance: Provenance {
                seed: 3,
                variable: "X2".into(),
                kind: PerturbationKind::WordSwap,
                site: Site::Token(0),
            },
            pool_index: 0,
        };
        let json = serde_json::to_string(&AttackRecord::from(&set)).unwrap();
        assert_eq!(
            json,
            r#"{"rule":"r2","loss":0.5,"sentences":{"X1":["a","b"],"X2":["c"]},"provenance":{"seed":3,"variable":"X2","kind":"word_swap","site":{"token":0}}}"#
        );
    }
}
