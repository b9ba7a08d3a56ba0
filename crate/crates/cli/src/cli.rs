use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{self, CliError};
use crate::config::{read_config_file, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "taylorfold", version, about = "Image restoration with Taylor-composed networks")]
pub struct Cli {
    /// `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `paper` (full size) or `desk` (small, CPU friendly)
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override any config key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Render clean scenes and write degraded pairs plus a manifest
    Synthesize {
        /// rain or blur
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Train a model on a corpus directory
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// with_k_residual or concat_only
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a corpus directory
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference gradient check of a tiny composed model
    Gradcheck,
    /// Train and evaluate one model per Taylor order
    SweepOrder {
        /// e.g. `0..6` or `0,2,4`
        #[arg(long)]
        orders: Option<String>,
        #[arg(long)]
        train_corpus: Option<PathBuf>,
        #[arg(long)]
        test_corpus: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn push<T: ToString>(out: &mut Vec<(String, String)>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key.to_owned(), v.to_string()));
    }
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Config file lines, then `--set` pairs, then named flags.
pub fn assignments(cli: &Cli) -> Result<Vec<(String, String)>, CliError> {
    let mut a = match &cli.config {
        Some(path) => read_config_file(path)?,
        None => Vec::new(),
    };
    for s in &cli.set {
        let (k, v) = s.split_once('=').ok_or_else(|| {
            ConfigError::Invalid(format!("--set expects KEY=VALUE, got `{s}`"))
        })?;
        a.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    push(&mut a, "preset", &cli.preset);
    push(&mut a, "seed", &cli.seed);
    push(&mut a, "out", &path_str(&cli.out));
    match &cli.command {
        Command::Synthesize { kind, count, height, width } => {
            push(&mut a, "data.kind", kind);
            push(&mut a, "data.count", count);
            push(&mut a, "data.height", height);
            push(&mut a, "data.width", width);
        }
        Command::Train { corpus, order, epochs, variant, resume } => {
            push(&mut a, "train.corpus", &path_str(corpus));
            push(&mut a, "composer.order", order);
            push(&mut a, "train.epochs", epochs);
            push(&mut a, "composer.variant", variant);
            push(&mut a, "train.resume", &path_str(resume));
        }
        Command::Eval { checkpoint, corpus } => {
            push(&mut a, "eval.checkpoint", &path_str(checkpoint));
            push(&mut a, "eval.corpus", &path_str(corpus));
        }
        Command::Gradcheck => {}
        Command::SweepOrder { orders, train_corpus, test_corpus, jobs } => {
            push(&mut a, "sweep.orders", orders);
            push(&mut a, "train.corpus", &path_str(train_corpus));
            push(&mut a, "eval.corpus", &path_str(test_corpus));
            push(&mut a, "sweep.jobs", jobs);
        }
    }
    Ok(a)
}

pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    Ok(RunConfig::from_assignments(&assignments(cli)?)?)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Synthesize { .. } => commands::synthesize(&cfg),
        Command::Train { .. } => commands::train_cmd(&cfg).map(drop),
        Command::Eval { .. } => commands::eval_cmd(&cfg).map(drop),
        Command::Gradcheck => commands::gradcheck_cmd(&cfg).map(drop),
        Command::SweepOrder { .. } => commands::sweep_cmd(&cfg).map(drop),
    }
}

/// Parses `args` and runs the verb; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as i32
        }
    }
}
