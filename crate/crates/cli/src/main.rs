mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_overrides, Config};

/// Adversarial rule-violation search and regularised training for NLI models.
#[derive(Parser, Debug)]
#[command(name = "advnli", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a classifier and fit the n-gram language model.
    Train(Common),
    /// Fine-tune a checkpoint for each λ in `lambdas`.
    Finetune(Common),
    /// Search for substitution sets that maximise the inconsistency loss.
    Attack(Common),
    /// Build the 2k-instance crafted set from the k most inconsistent pairs.
    Craft(Common),
    /// Count rule violations under the model's argmax predictions.
    Audit(Common),
    /// Print accuracy on a labeled corpus.
    Eval(Common),
    /// Write synthetic train/dev/test corpora in SNLI JSONL format.
    Synth(Common),
}

#[derive(clap::Args, Debug)]
struct Common {
    /// key = value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Config overrides as --key=value; they win over the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

/// A broken internal guarantee rather than bad input; exits with status 2.
#[derive(Debug)]
pub struct Invariant(pub String);

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "internal invariant failed: {}", self.0)
    }
}

impl std::error::Error for Invariant {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let internal = err.chain().any(|e| {
        e.is::<Invariant>() || matches!(e.downcast_ref(), Some(advnli::Error::Contract(_)))
    });
    if internal {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (command, common): (fn(&Config) -> anyhow::Result<()>, Common) = match cli.command {
        Command::Train(c) => (commands::cmd_train, c),
        Command::Finetune(c) => (commands::cmd_finetune, c),
        Command::Attack(c) => (commands::cmd_attack, c),
        Command::Craft(c) => (commands::cmd_craft, c),
        Command::Audit(c) => (commands::cmd_audit, c),
        Command::Eval(c) => (commands::cmd_eval, c),
        Command::Synth(c) => (commands::cmd_synth, c),
    };
    let mut overrides = parse_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out".into(), out.display().to_string()));
    }
    let config = Config::load(common.config.as_deref(), &overrides)?;
    command(&config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
