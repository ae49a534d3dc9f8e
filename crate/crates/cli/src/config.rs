//! `key = value` experiment configuration with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

use advnli::search::PerturbationKind;

/// Keys understood by the CLI, with their defaults. An empty default means
/// "unset".
pub const KEYS: &[(&str, &str)] = &[
    ("train", ""),
    ("dev", ""),
    ("test", ""),
    ("corpus", ""),
    ("rules", ""),
    ("out", "out"),
    ("seed", "0"),
    ("checkpoint", ""),
    ("lm", ""),
    ("embeddings", ""),
    ("min_count", "1"),
    ("lowercase", "true"),
    ("max_len", "64"),
    ("embedding_dim", "16"),
    ("hidden_dim", "16"),
    ("init_scale", "0.1"),
    ("eta", "0.05"),
    ("epochs", "10"),
    ("batch_size", "32"),
    ("lambda", "0.1"),
    ("lambdas", "0,0.0001,0.001,0.01,0.1"),
    ("n_a", "8"),
    ("seeds_per_round", "32"),
    ("pool_size", "512"),
    ("tau", "6"),
    ("word_candidates", "3"),
    ("max_sites", "3"),
    ("kinds", "word_swap,subtree_delete,subtree_insert"),
    ("lm_order", "3"),
    ("lm_delta", "0.1"),
    ("k", "100"),
    ("synth_train", "10000"),
    ("synth_dev", "2000"),
    ("synth_test", "2000"),
    ("synth_noise", "0.15"),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn defaults() -> Self {
        Config {
            values: KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Defaults, then the file, then each override in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut config = Self::defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            config
                .merge_text(&text)
                .with_context(|| format!("in config {}", path.display()))?;
        }
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        Ok(config)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key = value", i + 1);
            };
            self.set(k.trim(), v.trim())
                .with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_owned();
                Ok(())
            }
            None => bail!("unknown config key {key:?}"),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("{key} is not a config key"))
    }

    pub fn get<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| anyhow::anyhow!("config key {key}: cannot parse {raw:?}: {e}"))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    /// Like [`Config::path`] but fails when unset or missing on disk.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf> {
        let Some(path) = self.path(key) else {
            bail!("config key {key} is required");
        };
        if !path.exists() {
            bail!("{key} path {} does not exist", path.display());
        }
        Ok(path)
    }

    pub fn list<T>(&self, key: &str) -> Result<Vec<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| anyhow::anyhow!("config key {key}: cannot parse {s:?}: {e}"))
            })
            .collect()
    }

    pub fn kinds(&self) -> Result<Vec<PerturbationKind>> {
        self.list::<String>("kinds")?
            .iter()
            .map(|k| {
                PerturbationKind::parse(k)
                    .with_context(|| format!("unknown perturbation kind {k:?}"))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    /// Every key and its value, sorted; written next to outputs.
    pub fn dump(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Split `--key=value` tokens into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    args.iter()
        .map(|a| {
            let body = a
                .strip_prefix("--")
                .with_context(|| format!("unexpected argument {a:?}; overrides look like --key=value"))?;
            let (k, v) = body
                .split_once('=')
                .with_context(|| format!("override {a:?} is missing '='"))?;
            Ok((k.replace('-', "_"), v.to_owned()))
        })
        .collect()
}
