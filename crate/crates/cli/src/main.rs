// SPDX-License-Identifier: Apache-2.0

//! `araml`: prepare corpora, build augmented samples, train, and evaluate.

mod augment;
mod config;
mod data;
mod error;
mod eval;
mod manifest;
mod prepare;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use error::{CliError, CliResult};

/// Environment variable naming the root for default output directories.
pub const OUT_DIR_ENV: &str = "ARAML_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "araml", version, about = "Adversarial reward augmented maximum likelihood for text generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build vocabulary, train/test splits and optionally an n-gram LM.
    Prepare(prepare::Args),
    /// Write perturbed copies of the training split.
    Augment(augment::Args),
    /// Train one trainer over one or more seeds.
    Train(train::Args),
    /// Score samples or a checkpoint, or compare finished runs.
    Eval(eval::Args),
}

/// Default output root: `$ARAML_OUT_DIR`, else `./araml-out`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("araml-out"))
}

pub fn default_data_dir() -> PathBuf {
    output_root().join("data")
}

/// Refuses to write into a non-empty directory unless `force` is set.
pub fn ensure_fresh_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::io(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

pub fn usage_error(msg: &str, cmd: &str) -> CliError {
    let mut c = Cli::command();
    c.build();
    let usage = c
        .find_subcommand_mut(cmd)
        .map(|s| s.render_usage().to_string())
        .unwrap_or_default();
    CliError::usage(format!("{msg}\n\n{usage}"))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare(a) => prepare::run(a),
        Command::Augment(a) => augment::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
