use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};

use advnli::corpus::{build_vocab, load_snli, Corpus, LoadOptions};
use advnli::craft::{audit, craft_dataset, evaluate, format_pct};
use advnli::lm::{admissible, fit_lm, LanguageModel};
use advnli::model::ScorerConfig;
use advnli::rules::{parse_rules, RuleSet};
use advnli::search::{generate_adversarials, AttackRecord, Perturber, SearchConfig};
use advnli::seed::{derive_seed, rng_for};
use advnli::train::{fine_tune, train, TrainConfig};
use advnli::{synth, Model};

use crate::config::Config;
use crate::Invariant;

fn seed(config: &Config) -> Result<u64> {
    config.get("seed")
}

fn load_opts(config: &Config, keep_unlabeled: bool) -> Result<LoadOptions> {
    Ok(LoadOptions {
        keep_unlabeled,
        max_len: config.get("max_len")?,
    })
}

fn load_corpus(config: &Config, key: &str, keep_unlabeled: bool) -> Result<Corpus> {
    let path = config.existing_path(key)?;
    Ok(load_snli(&path, &load_opts(config, keep_unlabeled)?)?)
}

/// The `corpus` key if set, else `fallback`.
fn target_corpus(config: &Config, fallback: &str) -> Result<Corpus> {
    let key = if config.path("corpus").is_some() {
        "corpus"
    } else {
        fallback
    };
    load_corpus(config, key, true)
}

fn rules(config: &Config) -> Result<RuleSet> {
    match config.path("rules") {
        None => Ok(RuleSet::nli()),
        Some(path) => {
            let text = fs::read_to_string(&path)
                .with_context(|| format!("cannot read rules file {}", path.display()))?;
            parse_rules(&text).with_context(|| format!("in rules file {}", path.display()))
        }
    }
}

fn out_dir(config: &Config) -> Result<PathBuf> {
    let dir = config.out_dir();
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn checkpoint_path(config: &Config) -> PathBuf {
    config
        .path("checkpoint")
        .unwrap_or_else(|| config.out_dir().join("model.ckpt"))
}

fn lm_path(config: &Config) -> PathBuf {
    config
        .path("lm")
        .unwrap_or_else(|| config.out_dir().join("lm.txt"))
}

fn load_model(config: &Config) -> Result<Model> {
    let path = checkpoint_path(config);
    Model::load(&path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn load_lm(config: &Config) -> Result<LanguageModel> {
    let path = lm_path(config);
    LanguageModel::load(&path).with_context(|| format!("cannot load language model {}", path.display()))
}

fn search_config(config: &Config, purpose: &str) -> Result<SearchConfig> {
    Ok(SearchConfig {
        seeds_per_round: config.get("seeds_per_round")?,
        pool_size: config.get("pool_size")?,
        tau: config.get("tau")?,
        word_candidates_per_site: config.get("word_candidates")?,
        max_sites_per_sentence: config.get("max_sites")?,
        rng_seed: derive_seed(seed(config)?, purpose),
        enabled_kinds: config.kinds()?,
    })
}

fn train_config(config: &Config, purpose: &str, lambda: f64) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        eta: config.get("eta")?,
        epochs: config.get("epochs")?,
        batch_size: config.get("batch_size")?,
        lambda,
        n_a: config.get("n_a")?,
        rng_seed: derive_seed(seed(config)?, purpose),
        search: search_config(config, &format!("{purpose}/search"))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn cmd_train(config: &Config) -> Result<()> {
    let corpus = load_corpus(config, "train", false)?;
    let dev = match config.path("dev") {
        Some(_) => load_corpus(config, "dev", true)?,
        None => Corpus::new(Vec::new(), "none"),
    };
    let out = out_dir(config)?;
    let lowercase: bool = config.get("lowercase")?;
    let vocab = build_vocab(&corpus, config.get("min_count")?, lowercase);
    let scorer = ScorerConfig {
        embedding_dim: config.get("embedding_dim")?,
        hidden_dim: config.get("hidden_dim")?,
        vocab_size: vocab.len(),
        rng_seed: derive_seed(seed(config)?, "train/init"),
        init_scale: config.get("init_scale")?,
    };
    let cfg = train_config(config, "train", 0.0)?;
    let lm = fit_lm(&corpus, config.get("lm_order")?, config.get("lm_delta")?, lowercase)?;
    lm.save(&out.join("lm.txt"))?;

    let mut outcome = if let Some(emb) = config.path("embeddings") {
        // initialise, overwrite known rows, then train from there
        let params = advnli::model::init_params(&scorer)?;
        let mut model = Model::new(vocab, params)?;
        let n = model.load_pretrained_embeddings(&emb)?;
        info!("loaded {n} pretrained embedding rows from {}", emb.display());
        fine_tune(model, &corpus, &dev, &RuleSet::nli(), &lm, &cfg, |_| {})?
    } else {
        train::<f64>(&corpus, &dev, vocab, &scorer, &cfg)?
    };
    let expected = cfg.epochs * corpus.instances.len().div_ceil(cfg.batch_size);
    if outcome.report.updates != expected {
        return Err(Invariant(format!(
            "{} updates, schedule implies {expected}",
            outcome.report.updates
        ))
        .into());
    }
    outcome.model.save(&out.join("model.ckpt"))?;
    std::mem::swap(&mut outcome.model.params, &mut outcome.best);
    outcome.model.save(&out.join("best.ckpt"))?;
    outcome.report.save(&out.join("train.tsv"))?;
    write(&out.join("train.config"), config.dump())?;
    println!(
        "trained {} epochs ({} updates); best dev epoch {}; wrote {}",
        cfg.epochs,
        outcome.report.updates,
        outcome.best_epoch,
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn lambda_tag(lambda: f64) -> String {
    format!("{lambda}")
}

pub fn cmd_finetune(config: &Config) -> Result<()> {
    let corpus = load_corpus(config, "train", false)?;
    let dev = load_corpus(config, "dev", true)?;
    let audit_set = target_corpus(config, "dev")?;
    let base = load_model(config)?;
    let lm = load_lm(config)?;
    let rules = rules(config)?;
    let lambdas: Vec<f64> = config.list("lambdas")?;
    if lambdas.is_empty() {
        anyhow::bail!("config key lambdas is empty");
    }
    let out = out_dir(config)?;
    let mut curve = String::from("lambda\trule\tbody\tviolations\tpct\tdev_acc\n");
    for &lambda in &lambdas {
        // the same schedule for every λ, so runs differ only by the regulariser
        let cfg = train_config(config, "finetune", lambda)?;
        let mut gate_failures = 0usize;
        let outcome = fine_tune(base.clone(), &corpus, &dev, &rules, &lm, &cfg, |rec| {
            gate_failures += rec
                .sets
                .iter()
                .filter(|s| !admissible(&lm, &s.substitution, cfg.search.tau))
                .count();
        })?;
        if gate_failures > 0 {
            return Err(Invariant(format!("{gate_failures} adversarial sets failed the LM gate")).into());
        }
        let tag = lambda_tag(lambda);
        outcome.model.save(&out.join(format!("finetune_lambda{tag}.ckpt")))?;
        outcome.report.save(&out.join(format!("finetune_lambda{tag}.tsv")))?;
        let report = audit(&outcome.model, &audit_set, &rules)?;
        let acc = evaluate(&outcome.model, &dev)?.accuracy;
        for r in &report.rules {
            writeln!(
                curve,
                "{tag}\t{}\t{}\t{}\t{}\t{:.4}",
                r.rule,
                r.body_count,
                r.violation_count,
                format_pct(r.percentage()),
                acc
            )?;
        }
        println!("lambda {tag}: dev accuracy {}", format_pct(100.0 * acc));
    }
    write(&out.join("violations_curve.tsv"), curve)?;
    Ok(())
}

pub fn cmd_attack(config: &Config) -> Result<()> {
    let seeds = target_corpus(config, "train")?;
    if seeds.is_empty() {
        anyhow::bail!("{} has no instances to seed the search", seeds.source);
    }
    let model = load_model(config)?;
    let lm = load_lm(config)?;
    let rules = rules(config)?;
    let search = search_config(config, "attack")?;
    let perturber = Perturber::new(&lm, &seeds);
    let mut rng = rng_for(seed(config)?, "attack");
    let outcome = generate_adversarials(&model, &perturber, &rules, &seeds.instances, &search, &mut rng)?;
    if let Some(bad) = outcome
        .sets
        .iter()
        .find(|s| !admissible(&lm, &s.substitution, search.tau))
    {
        return Err(Invariant(format!("set from seed {} failed the LM gate", bad.provenance.seed)).into());
    }
    let out = out_dir(config)?;
    let mut lines = String::new();
    for set in &outcome.sets {
        lines.push_str(&serde_json::to_string(&AttackRecord::from(set))?);
        lines.push('\n');
    }
    write(&out.join("attack.jsonl"), lines)?;
    let mut pool = String::new();
    for cand in &outcome.pool {
        let record = serde_json::json!({
            "rule": rules.rules()[cand.rule_index].name,
            "sentences": cand.substitution.iter().map(|(v, s)| (v.to_owned(), s.tokens.clone())).collect::<std::collections::BTreeMap<_, _>>(),
            "provenance": cand.provenance,
        });
        pool.push_str(&record.to_string());
        pool.push('\n');
    }
    write(&out.join("attack_pool.jsonl"), pool)?;
    if outcome.sets.is_empty() {
        warn!(
            "every one of {} candidates failed the language-model gate (tau = {})",
            outcome.pool.len(),
            search.tau
        );
    }
    println!(
        "{} adversarial sets from a pool of {}",
        outcome.sets.len(),
        outcome.pool.len()
    );
    Ok(())
}

pub fn cmd_craft(config: &Config) -> Result<()> {
    let d = target_corpus(config, "dev")?;
    let k: usize = config.get("k")?;
    let model = load_model(config)?;
    let rules = rules(config)?;
    let name = checkpoint_path(config)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let crafted = craft_dataset(&model, &d, &rules, k, &name)?;
    if crafted.instances.len() != 2 * k {
        return Err(Invariant(format!("crafted {} instances for k = {k}", crafted.instances.len())).into());
    }
    let out = out_dir(config)?;
    let path = out.join(format!("crafted_k{k}.jsonl"));
    crafted.save(&path, Some(&out.join(format!("crafted_k{k}.annotation.tsv"))))?;
    println!("wrote {} instances to {}", crafted.instances.len(), path.display());
    Ok(())
}

pub fn cmd_audit(config: &Config) -> Result<()> {
    let d = target_corpus(config, "dev")?;
    let model = load_model(config)?;
    let rules = rules(config)?;
    let report = audit(&model, &d, &rules)?;
    if let Some(r) = report.rules.iter().find(|r| r.violation_count > r.body_count) {
        return Err(Invariant(format!("rule {} has more violations than bodies", r.rule)).into());
    }
    let out = out_dir(config)?;
    report.save(&out.join("violations.tsv"))?;
    print!("{report}");
    Ok(())
}

pub fn cmd_eval(config: &Config) -> Result<()> {
    let d = target_corpus(config, "test")?;
    let model = load_model(config)?;
    let eval = evaluate(&model, &d)?;
    println!(
        "accuracy {} ({} of {} labeled; {} unlabeled skipped)",
        format_pct(100.0 * eval.accuracy),
        eval.correct,
        eval.labeled,
        eval.skipped
    );
    Ok(())
}

pub fn cmd_synth(config: &Config) -> Result<()> {
    let out = out_dir(config)?;
    let seed = seed(config)?;
    let noise: f64 = config.get("synth_noise")?;
    for (name, key) in [("train", "synth_train"), ("dev", "synth_dev"), ("test", "synth_test")] {
        let n: usize = config.get(key)?;
        let corpus = synth::generate_with_noise(n, derive_seed(seed, &format!("synth/{name}")), noise);
        let path = out.join(format!("{name}.jsonl"));
        corpus.save(&path)?;
        println!("wrote {n} pairs to {}", path.display());
    }
    Ok(())
}
