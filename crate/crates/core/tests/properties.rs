use proptest::prelude::*;

use advnli::corpus::{build_vocab, linearize, Corpus, Instance, Label, LoadOptions, ParseTree, Sentence};
use advnli::craft::{audit, instance_score};
use advnli::lm::LanguageModel;
use advnli::model::testing::TableScorer;
use advnli::model::{init_params, NliModel, Scorer, ScorerConfig};
use advnli::rules::{body_probability, head_probability, inconsistency_loss, RuleSet};
use advnli::search::{PerturbationKind, Perturber, SearchConfig, Site};
use advnli::{seed, synth};

fn probs() -> impl Strategy<Value = [f64; 3]> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)
        .prop_filter("non-degenerate", |(a, b, c)| a + b + c > 1e-6)
        .prop_map(|(a, b, c)| {
            let t = a + b + c;
            [a / t, b / t, c / t]
        })
}

/// A table over every ordered pair of the sentences "a", "b", "c".
fn table() -> impl Strategy<Value = TableScorer> {
    proptest::collection::vec(probs(), 9).prop_map(|ps| {
        let names = ["a", "b", "c"];
        let mut t = TableScorer::uniform();
        for (i, p) in ps.into_iter().enumerate() {
            t = t.with(names[i / 3], names[i % 3], p);
        }
        t
    })
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn tree() -> impl Strategy<Value = ParseTree> {
    let leaf = ("[A-Z]{1,3}", word()).prop_map(|(tag, w)| ParseTree::node(tag, vec![ParseTree::leaf(w)]));
    leaf.prop_recursive(3, 12, 3, |inner| {
        ("[A-Z]{1,3}", proptest::collection::vec(inner, 1..4)).prop_map(|(l, kids)| ParseTree::node(l, kids))
    })
}

fn model(seed: u64) -> NliModel<f64> {
    let corpus = synth::generate(60, seed);
    let vocab = build_vocab(&corpus, 1, true);
    let cfg = ScorerConfig {
        embedding_dim: 6,
        hidden_dim: 5,
        vocab_size: vocab.len(),
        rng_seed: seed,
        init_scale: 1.0,
    };
    NliModel::new(vocab, init_params(&cfg).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn inconsistency_loss_is_a_hinge(t in table()) {
        let s = ["a", "b", "c"].map(Sentence::from_text);
        for rule in RuleSet::nli().iter() {
            let sub = rule.bind(&[&s[0], &s[1], &s[2]]).unwrap();
            let loss = inconsistency_loss(&t, rule, &sub).unwrap();
            let body = body_probability(&t, rule, &sub).unwrap();
            let head = head_probability(&t, rule, &sub).unwrap();
            prop_assert!((0.0..=1.0).contains(&loss));
            prop_assert_eq!(loss == 0.0, head >= body);
            prop_assert_eq!(loss, (body - head).max(0.0));
        }
    }

    #[test]
    fn instance_score_ignores_order_and_label(t in table(), label in 0usize..3) {
        let inst = Instance {
            premise: Sentence::from_text("a"),
            hypothesis: Sentence::from_text("b"),
            label: Label::CLASSES[label],
        };
        let rules = RuleSet::nli();
        let score = instance_score(&t, &inst, &rules).unwrap();
        prop_assert!(score >= 0.0);
        prop_assert_eq!(score, instance_score(&t, &inst.swapped(), &rules).unwrap());
        let mut relabeled = inst.clone();
        relabeled.label = Label::Unlabeled;
        prop_assert_eq!(score, instance_score(&t, &relabeled, &rules).unwrap());
    }

    #[test]
    fn audit_counts_are_bounded(t in table()) {
        let pair = |p: &str, h: &str| Instance {
            premise: Sentence::from_text(p),
            hypothesis: Sentence::from_text(h),
            label: Label::Neutral,
        };
        let d = Corpus::new(vec![pair("a", "b"), pair("b", "c"), pair("c", "a")], "t");
        for r in audit(&t, &d, &RuleSet::nli()).unwrap().rules {
            prop_assert!(r.violation_count <= r.body_count);
            prop_assert!((0.0..=100.0).contains(&r.percentage()));
        }
    }

    #[test]
    fn corpus_round_trips(trees in proptest::collection::vec((tree(), tree(), 0usize..3), 1..6)) {
        let instances: Vec<Instance> = trees
            .into_iter()
            .map(|(p, h, l)| Instance {
                premise: Sentence::from_tree(p),
                hypothesis: Sentence::from_tree(h),
                label: Label::CLASSES[l],
            })
            .collect();
        let corpus = Corpus::new(instances, "generated");
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf).unwrap();
        let back = Corpus::from_reader(&buf[..], "generated", &LoadOptions::default()).unwrap();
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn tree_display_parses_back(t in tree()) {
        let back = advnli::corpus::parse_tree(&t.to_string()).unwrap();
        prop_assert_eq!(linearize(&back), linearize(&t));
        prop_assert_eq!(back, t);
    }

    #[test]
    fn lm_counts_raise_sentence_probability(
        words in proptest::collection::vec(0usize..4, 1..6),
        extra in 0u64..5,
        delta in 0.01..2.0f64,
    ) {
        // a bigram model whose only context in the sentence is its first position
        let vocab = ["p", "q", "r", "s"];
        let tokens: Vec<&str> = words.iter().map(|&i| vocab[i]).collect();
        let base = vec![(vec!["<s>".to_owned()], "p".to_owned(), 2), (vec!["p".to_owned()], "q".to_owned(), 1)];
        let bumped = {
            let mut rows = base.clone();
            rows.push((vec!["<s>".to_owned()], tokens[0].to_owned(), extra + 1));
            rows
        };
        let lm = LanguageModel::from_counts(2, delta, 9, base).unwrap();
        let lm2 = LanguageModel::from_counts(2, delta, 9, bumped).unwrap();
        let s = Sentence::from_text(&tokens.join(" "));
        prop_assert!(lm2.log_prob(&s) > lm.log_prob(&s));
    }

    #[test]
    fn edits_change_one_site(seed_no in 0u64..200, which in 0usize..40) {
        let corpus = synth::generate(40, 77);
        let lm = advnli::lm::fit_lm(&corpus, 2, 0.1, true).unwrap();
        let perturber = Perturber::new(&lm, &corpus);
        let inst = &corpus.instances[which];
        let s = if seed_no % 2 == 0 { &inst.premise } else { &inst.hypothesis };
        let config = SearchConfig::default();
        let edits = perturber.enumerate(s, &config, &mut seed::rng(seed_no));
        prop_assert!(edits.len() <= config.max_edits_per_sentence());
        for e in edits {
            let (a, b) = (&s.tokens, &e.sentence.tokens);
            match (e.perturbation.kind, &e.perturbation.site) {
                (PerturbationKind::WordSwap, Site::Token(i)) => {
                    prop_assert_eq!(a.len(), b.len());
                    let diffs: Vec<usize> = (0..a.len()).filter(|&j| a[j] != b[j]).collect();
                    prop_assert_eq!(diffs, vec![*i]);
                }
                (PerturbationKind::SubtreeDelete, _) => {
                    prop_assert!(!b.is_empty() && b.len() < a.len());
                    prop_assert!(is_contiguous_removal(a, b));
                }
                (PerturbationKind::SubtreeInsert, _) => {
                    prop_assert!(b.len() > a.len());
                    prop_assert!(is_contiguous_removal(b, a));
                }
                (kind, site) => prop_assert!(false, "{kind:?} at {site:?}"),
            }
        }
    }
}

/// `short` equals `long` with one contiguous span removed.
fn is_contiguous_removal(long: &[String], short: &[String]) -> bool {
    let prefix = long.iter().zip(short).take_while(|(x, y)| x == y).count();
    let suffix = long
        .iter()
        .rev()
        .zip(short.iter().rev())
        .take_while(|(x, y)| x == y)
        .count();
    prefix + suffix >= short.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn predictions_lie_on_the_simplex(
        seed_no in 0u64..20,
        p in proptest::collection::vec(word(), 1..6),
        h in proptest::collection::vec(word(), 1..6),
    ) {
        let m = model(seed_no);
        let pred = m.predict(&Sentence::from_text(&p.join(" ")), &Sentence::from_text(&h.join(" "))).unwrap();
        prop_assert!(pred.probs.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn shifting_all_logits_changes_nothing(seed_no in 0u64..20, shift in -50.0..50.0f64, which in 0usize..60) {
        let mut m = model(seed_no);
        let inst = synth::generate(60, seed_no).instances[which].clone();
        let before = m.predict(&inst.premise, &inst.hypothesis).unwrap();
        for b in &mut m.params.b2.data {
            *b += shift;
        }
        let after = m.predict(&inst.premise, &inst.hypothesis).unwrap();
        for (x, y) in before.probs.iter().zip(&after.probs) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
