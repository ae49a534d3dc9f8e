//! Mini-batch SGD, with and without adversarial regularisation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Instance, Vocab};
use crate::craft::{audit, evaluate};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::model::{init_params, NliModel, ScorerConfig, ScorerParams};
use crate::rules::{RuleSet, Substitution};
use crate::scalar::Scalar;
use crate::search::{generate_adversarials, AdversarialSet, Perturber, SearchConfig};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Adversarial sets kept per batch.
    pub n_a: usize,
    pub rng_seed: u64,
    pub search: SearchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.05,
            epochs: 10,
            batch_size: 32,
            lambda: 0.0,
            n_a: 8,
            rng_seed: 0,
            search: SearchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Argument(format!("eta must be positive, got {}", self.eta)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.search.pool_size == 0 || self.search.seeds_per_round == 0 {
            return Err(Error::Argument(
                "pool_size and seeds_per_round must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn regularised(&self) -> bool {
        self.lambda != 0.0 && self.n_a > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Sum of batch data losses, each taken before its update.
    pub data_loss: f64,
    /// Sum of inconsistency losses of the sets used in updates.
    pub adv_loss: f64,
    pub dev_acc: Option<f64>,
    /// Violation percentage per rule, `None` for rules the audit skips.
    pub violations: Vec<(String, Option<f64>)>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub updates: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn write_tsv(&self, mut w: impl Write) -> std::io::Result<()> {
        let rules: Vec<&str> = self
            .epochs
            .first()
            .map(|e| e.violations.iter().map(|(r, _)| r.as_str()).collect())
            .unwrap_or_default();
        write!(w, "epoch\tdata_loss\tadv_loss\tdev_acc")?;
        for r in &rules {
            write!(w, "\tviol_{r}")?;
        }
        writeln!(w, "\tseconds")?;
        let na = |v: Option<f64>, p: usize| v.map_or("NA".to_owned(), |x| format!("{x:.p$}"));
        for e in &self.epochs {
            write!(
                w,
                "{}\t{:.6}\t{:.6}\t{}",
                e.epoch,
                e.data_loss,
                e.adv_loss,
                na(e.dev_acc, 4)
            )?;
            for (_, v) in &e.violations {
                write!(w, "\t{}", na(*v, 2))?;
            }
            writeln!(w, "\t{:.3}", e.seconds)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to memory");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: NliModel<T>,
    /// Parameters of the epoch with the best dev accuracy (first on ties);
    /// the final ones when dev has no labeled pairs.
    pub best: ScorerParams<T>,
    pub best_epoch: usize,
    pub report: TrainReport,
}

/// What an update saw, passed to the observer before the step is applied.
pub struct BatchRecord<'a, T> {
    pub epoch: usize,
    pub update: usize,
    /// Parameters the objective was evaluated at.
    pub model: &'a NliModel<T>,
    pub batch: &'a [Instance],
    pub sets: &'a [AdversarialSet<T>],
    pub objective: T,
}

/// Plain cross-entropy training from freshly initialised parameters.
pub fn train<T: Scalar>(
    corpus: &Corpus,
    dev: &Corpus,
    vocab: Vocab,
    scorer: &ScorerConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if scorer.vocab_size != vocab.len() {
        return Err(Error::Argument(format!(
            "scorer vocab_size {} does not match the vocabulary ({})",
            scorer.vocab_size,
            vocab.len()
        )));
    }
    let model = NliModel::new(vocab, init_params(scorer)?)?;
    let plain = TrainConfig {
        lambda: 0.0,
        ..config.clone()
    };
    run(model, corpus, dev, &RuleSet::nli(), None, &plain, |_| {})
}

/// Adversarially regularised fine-tuning: each batch seeds a search, the top
/// `n_a` sets are added to the objective with weight `λ`, and one SGD step
/// follows. With `λ = 0` or `n_a = 0` no search runs and the updates are
/// exactly those of [`train`] continued from `model`.
pub fn fine_tune<T, F>(
    model: NliModel<T>,
    corpus: &Corpus,
    dev: &Corpus,
    rules: &RuleSet,
    lm: &LanguageModel,
    config: &TrainConfig,
    on_batch: F,
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    F: FnMut(&BatchRecord<'_, T>),
{
    run(model, corpus, dev, rules, Some(lm), config, on_batch)
}

fn run<T, F>(
    mut model: NliModel<T>,
    corpus: &Corpus,
    dev: &Corpus,
    rules: &RuleSet,
    lm: Option<&LanguageModel>,
    config: &TrainConfig,
    mut on_batch: F,
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    F: FnMut(&BatchRecord<'_, T>),
{
    config.validate()?;
    let labeled: Vec<Instance> = corpus
        .instances
        .iter()
        .filter(|i| i.label.class().is_some())
        .cloned()
        .collect();
    if labeled.is_empty() {
        return Err(Error::Degenerate(format!(
            "{} has no labeled instances to train on",
            corpus.source
        )));
    }
    let perturber = match lm {
        Some(lm) if config.regularised() => Some(Perturber::new(lm, corpus)),
        _ => None,
    };
    let mut shuffle_rng: ChaCha8Rng = seed::rng_for(config.rng_seed, "shuffle");
    let mut search_rng: ChaCha8Rng = seed::rng_for(config.rng_seed, "search");
    let lambda = T::of(config.lambda);
    let eta = T::of(config.eta);
    let dev_labeled = dev.instances.iter().any(|i| i.label.class().is_some());

    let started = Instant::now();
    let mut report = TrainReport::default();
    let mut best = model.params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut data_loss = 0.0;
        let mut adv_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Instance> = chunk.iter().map(|&i| labeled[i].clone()).collect();
            let sets = match &perturber {
                Some(p) => {
                    let mut out = generate_adversarials(
                        &model,
                        p,
                        rules,
                        &batch,
                        &config.search,
                        &mut search_rng,
                    )?
                    .sets;
                    out.truncate(config.n_a);
                    out
                }
                None => Vec::new(),
            };
            let adversarial: Vec<(crate::rules::Rule, Substitution)> = sets
                .iter()
                .map(|s| (rules.rules()[s.rule_index].clone(), s.substitution.clone()))
                .collect();
            let (objective, grad) = model.loss_and_grad(&batch, &adversarial, lambda)?;
            let adv: f64 = sets.iter().map(|s| s.loss.as_f64()).sum();
            adv_loss += adv;
            data_loss += objective.as_f64() - config.lambda * adv;
            report.updates += 1;
            on_batch(&BatchRecord {
                epoch,
                update: report.updates,
                model: &model,
                batch: &batch,
                sets: &sets,
                objective,
            });
            model.sgd_step(&grad, eta);
            if !model.params.is_finite() {
                return Err(Error::Numeric(format!(
                    "parameters diverged at epoch {epoch}, update {}",
                    report.updates
                )));
            }
        }

        let dev_acc = if dev_labeled {
            Some(evaluate(&model, dev)?.accuracy)
        } else {
            None
        };
        let audited = audit(&model, dev, rules)?;
        let violations = rules
            .iter()
            .map(|r| (r.name.clone(), audited.get(&r.name).map(|v| v.percentage())))
            .collect();
        if let Some(acc) = dev_acc {
            if acc > best_acc {
                best_acc = acc;
                best = model.params.clone();
                best_epoch = epoch;
            }
        }
        let stats = EpochStats {
            epoch,
            data_loss,
            adv_loss,
            dev_acc,
            violations,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: data {:.4} adv {:.4} dev {}",
            stats.data_loss,
            stats.adv_loss,
            dev_acc.map_or("NA".into(), |a| format!("{a:.4}"))
        );
        report.epochs.push(stats);
    }
    if !dev_labeled {
        best = model.params.clone();
        best_epoch = config.epochs;
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Label, Sentence};

    fn fixture(n: usize) -> Corpus {
        let words = ["dog", "cat", "man", "woman", "child"];
        let verbs = ["runs", "sleeps", "eats", "sits"];
        let instances = (0..n)
            .map(|i| {
                let w = words[i % words.len()];
                let v = verbs[(i / words.len()) % verbs.len()];
                let (h, label) = match i % 3 {
                    0 => (format!("a {w} {v}"), Label::Entailment),
                    1 => (format!("nobody {v}"), Label::Contradiction),
                    _ => (format!("a {w} {v} outside"), Label::Neutral),
                };
                Instance {
                    premise: Sentence::from_text(&format!("the {w} {v}")),
                    hypothesis: Sentence::from_text(&h),
                    label,
                }
            })
            .collect();
        Corpus::new(instances, "fixture")
    }

    fn scorer_config(vocab: &Vocab) -> ScorerConfig {
        ScorerConfig {
            embedding_dim: 8,
            hidden_dim: 8,
            vocab_size: vocab.len(),
            rng_seed: 7,
            init_scale: 0.1,
        }
    }

    #[test]
    fn small_corpus_is_one_batch_per_epoch() {
        let c = fixture(5);
        let vocab = build_vocab(&c, 1, true);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = train::<f64>(&c, &c, vocab.clone(), &scorer_config(&vocab), &cfg).unwrap();
        assert_eq!(out.report.updates, 2);
        assert_eq!(out.report.epochs.len(), 2);
    }

    #[test]
    fn loss_trends_down() {
        let c = fixture(50);
        let vocab = build_vocab(&c, 1, true);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train::<f64>(&c, &c, vocab.clone(), &scorer_config(&vocab), &cfg).unwrap();
        let losses: Vec<f64> = out.report.epochs.iter().map(|e| e.data_loss).collect();
        let upticks = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(upticks <= 1, "{losses:?}");
        assert!(losses[2] < losses[0], "{losses:?}");
    }

    #[test]
    fn deterministic_and_regulariser_off_matches() {
        let c = fixture(40);
        let vocab = build_vocab(&c, 1, true);
        let sc = scorer_config(&vocab);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let a = train::<f64>(&c, &c, vocab.clone(), &sc, &cfg).unwrap();
        let b = train::<f64>(&c, &c, vocab.clone(), &sc, &cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);

        let lm = crate::lm::fit_lm(&c, 2, 0.1, true).unwrap();
        let base = a.model.clone();
        let cont = run(base.clone(), &c, &c, &RuleSet::nli(), None, &cfg, |_| {}).unwrap();
        for (lambda, n_a) in [(0.0, 8), (0.5, 0)] {
            let ft_cfg = TrainConfig {
                lambda,
                n_a,
                ..cfg.clone()
            };
            let ft = fine_tune(base.clone(), &c, &c, &RuleSet::nli(), &lm, &ft_cfg, |_| {}).unwrap();
            assert_eq!(ft.model.params, cont.model.params);
        }
    }

    #[test]
    fn objective_accounting() {
        let c = fixture(30);
        let vocab = build_vocab(&c, 1, true);
        let sc = scorer_config(&vocab);
        let base = NliModel::new(vocab, init_params::<f64>(&sc).unwrap()).unwrap();
        let lm = crate::lm::fit_lm(&c, 2, 0.1, true).unwrap();
        let rules = RuleSet::nli();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 10,
            lambda: 0.5,
            n_a: 4,
            search: SearchConfig {
                tau: 1e9,
                ..SearchConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut seen = 0;
        fine_tune(base, &c, &c, &rules, &lm, &cfg, |rec| {
            seen += 1;
            assert!(rec.sets.len() <= 4);
            let mut expected = rec.model.data_loss(rec.batch).unwrap();
            for s in rec.sets {
                let rule = &rules.rules()[s.rule_index];
                let li = crate::rules::inconsistency_loss(rec.model, rule, &s.substitution).unwrap();
                assert_eq!(li, s.loss);
                expected += 0.5 * li;
            }
            assert!((expected - rec.objective).abs() <= 1e-9);
        })
        .unwrap();
        assert_eq!(seen, 3);
    }

    #[test]
    fn unlabeled_corpus_is_degenerate() {
        let mut c = fixture(4);
        for i in &mut c.instances {
            i.label = Label::Unlabeled;
        }
        let vocab = build_vocab(&c, 1, true);
        let err = train::<f64>(&c, &c, vocab.clone(), &scorer_config(&vocab), &TrainConfig::default());
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn report_tsv_shape() {
        let report = TrainReport {
            epochs: vec![EpochStats {
                epoch: 1,
                data_loss: 1.5,
                adv_loss: 0.0,
                dev_acc: Some(0.5),
                violations: vec![("r1".into(), Some(12.5)), ("r5".into(), None)],
                seconds: 0.25,
            }],
            updates: 1,
            wall_seconds: 0.25,
        };
        let mut buf = Vec::new();
        report.write_tsv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch\tdata_loss\tadv_loss\tdev_acc\tviol_r1\tviol_r5\tseconds\n\
             1\t1.500000\t0.000000\t0.5000\t12.50\tNA\t0.250\n"
        );
    }
}
