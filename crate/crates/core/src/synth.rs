//! Synthetic SNLI-style corpora with constituency parses.
//!
//! Premises describe a subject doing something, optionally somewhere.
//! Hypotheses are built from the premise by templates that fix the label:
//! generalising or dropping detail entails, adding unseen detail is neutral,
//! and changing the action, the subject, or negating the subject contradicts.
//! Contradictions lean on hypothesis-side cue words ("nobody", "sleeping"),
//! the kind of annotation artifact that leaves classifiers asymmetric.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Corpus, Instance, Label, ParseTree, Sentence};
use crate::seed;

struct Noun {
    word: &'static str,
    hypernym: &'static str,
    animate: Kind,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Person,
    Animal,
}

const NOUNS: &[Noun] = &[
    Noun { word: "man", hypernym: "person", animate: Kind::Person },
    Noun { word: "woman", hypernym: "person", animate: Kind::Person },
    Noun { word: "boy", hypernym: "child", animate: Kind::Person },
    Noun { word: "girl", hypernym: "child", animate: Kind::Person },
    Noun { word: "worker", hypernym: "person", animate: Kind::Person },
    Noun { word: "dog", hypernym: "animal", animate: Kind::Animal },
    Noun { word: "cat", hypernym: "animal", animate: Kind::Animal },
    Noun { word: "horse", hypernym: "animal", animate: Kind::Animal },
];

const ADJECTIVES: &[&str] = &["young", "old", "tall", "small", "happy", "tired"];

struct Action {
    verb: &'static str,
    object: Option<(&'static str, &'static str)>,
    kinds: &'static [Kind],
}

const BOTH: &[Kind] = &[Kind::Person, Kind::Animal];
const PEOPLE: &[Kind] = &[Kind::Person];

const ACTIONS: &[Action] = &[
    Action { verb: "running", object: None, kinds: BOTH },
    Action { verb: "swimming", object: None, kinds: BOTH },
    Action { verb: "jumping", object: None, kinds: BOTH },
    Action { verb: "eating", object: Some(("some", "food")), kinds: BOTH },
    Action { verb: "playing", object: Some(("a", "guitar")), kinds: PEOPLE },
    Action { verb: "riding", object: Some(("a", "bike")), kinds: PEOPLE },
    Action { verb: "reading", object: Some(("a", "book")), kinds: PEOPLE },
    Action { verb: "cooking", object: Some(("a", "meal")), kinds: PEOPLE },
    Action { verb: "climbing", object: Some(("a", "rock")), kinds: PEOPLE },
    Action { verb: "dancing", object: None, kinds: PEOPLE },
];

/// Actions that only ever appear in contradicting hypotheses.
const CUE_ACTIONS: &[&str] = &["sleeping", "sitting", "resting"];

const PLACES: &[(&str, &str, &str)] = &[
    ("in", "the", "park"),
    ("on", "the", "beach"),
    ("at", "the", "market"),
    ("near", "a", "lake"),
    ("on", "a", "street"),
    ("in", "a", "field"),
];

const EXTRAS: &[(&str, &str, &str)] = &[
    ("with", "some", "friends"),
    ("for", "a", "competition"),
    ("after", "the", "rain"),
];

fn pre(tag: &str, word: &str) -> ParseTree {
    ParseTree::node(tag, vec![ParseTree::leaf(word)])
}

fn capitalised(word: &str) -> String {
    let mut c = word.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn np(det: &str, adj: Option<&str>, noun: &str) -> ParseTree {
    let mut kids = vec![pre("DT", det)];
    if let Some(a) = adj {
        kids.push(pre("JJ", a));
    }
    kids.push(pre("NN", noun));
    ParseTree::node("NP", kids)
}

fn pp((prep, det, noun): (&str, &str, &str)) -> ParseTree {
    ParseTree::node("PP", vec![pre("IN", prep), np(det, None, noun)])
}

/// `(ROOT (S subject (VP (VBZ is) (VP (VBG verb) object? pps...)) (. .)))`
/// with the first word capitalised.
fn clause(
    subject: ParseTree,
    verb: &str,
    object: Option<(&str, &str)>,
    pps: &[(&str, &str, &str)],
) -> Sentence {
    let mut inner = vec![pre("VBG", verb)];
    if let Some((d, n)) = object {
        inner.push(np(d, None, n));
    }
    inner.extend(pps.iter().map(|&p| pp(p)));
    let vp = ParseTree::node(
        "VP",
        vec![pre("VBZ", "is"), ParseTree::node("VP", inner)],
    );
    let mut tree = ParseTree::node(
        "ROOT",
        vec![ParseTree::node("S", vec![subject, vp, pre(".", ".")])],
    );
    let first = crate::corpus::linearize(&tree)[0].clone();
    tree.replace_leaf(0, &capitalised(&first));
    Sentence::from_tree(tree)
}

fn pick<'a, T, R: Rng + ?Sized>(rng: &mut R, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty table")
}

fn instance<R: Rng + ?Sized>(rng: &mut R, label: Label) -> Instance {
    let noun = pick(rng, NOUNS);
    let adj = rng.gen_bool(0.5).then(|| *pick(rng, ADJECTIVES));
    let actions: Vec<&Action> = ACTIONS
        .iter()
        .filter(|a| a.kinds.contains(&noun.animate))
        .collect();
    let action = *pick(rng, &actions);
    let place = rng.gen_bool(0.6).then(|| *pick(rng, PLACES));
    let places: Vec<_> = place.into_iter().collect();
    let premise = clause(np("a", adj, noun.word), action.verb, action.object, &places);

    let hypothesis = match label {
        Label::Entailment => match rng.gen_range(0..3) {
            0 => clause(np("a", None, noun.hypernym), action.verb, action.object, &[]),
            1 => clause(np("a", None, noun.word), action.verb, action.object, &places),
            _ => clause(np("a", adj, noun.hypernym), action.verb, None, &[]),
        },
        Label::Neutral => match rng.gen_range(0..3) {
            0 => {
                let other = ADJECTIVES.iter().filter(|a| Some(**a) != adj).collect::<Vec<_>>();
                clause(np("a", Some(pick(rng, &other)), noun.word), action.verb, action.object, &[])
            }
            1 => clause(
                np("a", None, noun.word),
                action.verb,
                action.object,
                &[*pick(rng, EXTRAS)],
            ),
            _ => {
                let other: Vec<_> = PLACES.iter().filter(|p| Some(**p) != place).collect();
                clause(np("a", None, noun.word), action.verb, action.object, &[**pick(rng, &other)])
            }
        },
        Label::Contradiction => match rng.gen_range(0..4) {
            0 | 1 => clause(np("a", None, noun.word), pick(rng, CUE_ACTIONS), None, &places),
            2 => clause(
                ParseTree::node("NP", vec![pre("NN", "nobody")]),
                action.verb,
                action.object,
                &[],
            ),
            _ => {
                let others: Vec<_> = actions.iter().filter(|a| a.verb != action.verb).collect();
                let other = pick(rng, &others);
                clause(np("the", adj, noun.word), other.verb, other.object, &places)
            }
        },
        Label::Unlabeled => unreachable!("only labeled pairs are generated"),
    };
    Instance {
        premise,
        hypothesis,
        label,
    }
}

/// Default share of pairs whose label is replaced by a different one.
pub const DEFAULT_NOISE: f64 = 0.15;

/// `n` labeled pairs with [`DEFAULT_NOISE`]; see [`generate_with_noise`].
pub fn generate(n: usize, seed: u64) -> Corpus {
    generate_with_noise(n, seed, DEFAULT_NOISE)
}

/// `n` pairs built for classes cycling through entailment, contradiction and
/// neutral. With probability `noise` a pair's label is then swapped for one
/// of the other two, mimicking annotator disagreement. Deterministic in
/// `(n, seed, noise)`.
pub fn generate_with_noise(n: usize, seed: u64, noise: f64) -> Corpus {
    let mut rng = seed::rng_for(seed, "synth");
    // separate stream so the sentences do not depend on `noise`
    let mut flips = seed::rng_for(seed, "synth/noise");
    let instances = (0..n)
        .map(|i| {
            let mut inst = instance(&mut rng, Label::CLASSES[i % 3]);
            if flips.gen_bool(noise.clamp(0.0, 1.0)) {
                let shift = flips.gen_range(1..3);
                inst.label = Label::CLASSES[(i + shift) % 3];
            }
            inst
        })
        .collect();
    Corpus::new(instances, format!("synthetic:{seed}"))
}
