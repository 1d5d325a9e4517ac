// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use araml_core::corpus::{load_corpus, train_test_split, Corpus};
use araml_core::hmm::{generate_hmm_corpus, HmmOracle};
use araml_core::ngram::NGramLm;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{default_data_dir, ensure_fresh_dir, usage_error};

pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LM_FILE: &str = "lm.txt";

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Corpus file: one space-tokenized sentence per line, or `context<TAB>response`.
    pub corpus: Option<PathBuf>,
    /// Generate a synthetic corpus from a random HMM instead, e.g.
    /// `states=5 vocab=20 count=10000 seed=7` (also `max_len`, `mean_len`).
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    pub synthetic_hmm: Option<Vec<String>>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub test_fraction: f64,
    /// Seed for the train/test shuffle.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also fit the n-gram LM used for constrained sampling.
    #[arg(long)]
    pub train_lm: bool,
    #[arg(long, default_value_t = 3)]
    pub lm_order: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lm_k: f64,
    /// Output directory (default `$ARAML_OUT_DIR/data`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overwrite an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, PartialEq)]
pub struct HmmSettings {
    pub states: usize,
    pub vocab: usize,
    pub count: usize,
    pub seed: u64,
    pub max_len: usize,
    pub mean_len: f64,
}

pub fn parse_hmm_settings(items: &[String]) -> CliResult<HmmSettings> {
    let mut hmm = HmmSettings { states: 5, vocab: 20, count: 10_000, seed: 7, max_len: 12, mean_len: 7.0 };
    for item in items {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("expected KEY=VALUE, got {item:?}")))?;
        let bad = || CliError::usage(format!("invalid value {v:?} for {k}"));
        match k {
            "states" => hmm.states = v.parse().map_err(|_| bad())?,
            "vocab" => hmm.vocab = v.parse().map_err(|_| bad())?,
            "count" => hmm.count = v.parse().map_err(|_| bad())?,
            "seed" => hmm.seed = v.parse().map_err(|_| bad())?,
            "max_len" => hmm.max_len = v.parse().map_err(|_| bad())?,
            "mean_len" => hmm.mean_len = v.parse().map_err(|_| bad())?,
            _ => return Err(CliError::usage(format!("unknown HMM setting {k:?}"))),
        }
    }
    Ok(hmm)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

pub fn run(args: Args) -> CliResult<()> {
    let out = args.out.clone().unwrap_or_else(default_data_dir);
    let mut manifest = RunManifest::new("prepare", &out);
    let mut config: Vec<(String, String)> = Vec::new();
    let corpus: Corpus = match (&args.corpus, &args.synthetic_hmm) {
        (Some(_), Some(_)) => return Err(usage_error("give a corpus path or --synthetic-hmm, not both", "prepare")),
        (None, None) => return Err(usage_error("missing input: a corpus path or --synthetic-hmm", "prepare")),
        (Some(path), None) => {
            if !path.exists() {
                return Err(CliError::io(format!("{}: no such file", path.display())));
            }
            config.push(("source".into(), path.display().to_string()));
            config.push(("min_freq".into(), args.min_freq.to_string()));
            config.push(("max_vocab".into(), args.max_vocab.map_or("none".into(), |v| v.to_string())));
            let c = load_corpus(path, args.min_freq, args.max_vocab)?;
            manifest.add_input("corpus", path)?;
            c
        }
        (None, Some(items)) => {
            let hmm = parse_hmm_settings(items)?;
            config.push(("source".into(), "synthetic-hmm".into()));
            config.push(("hmm.states".into(), hmm.states.to_string()));
            config.push(("hmm.vocab".into(), hmm.vocab.to_string()));
            config.push(("hmm.count".into(), hmm.count.to_string()));
            config.push(("hmm.seed".into(), hmm.seed.to_string()));
            config.push(("hmm.max_len".into(), hmm.max_len.to_string()));
            config.push(("hmm.mean_len".into(), hmm.mean_len.to_string()));
            let oracle = HmmOracle::random(hmm.states, hmm.vocab, hmm.mean_len, hmm.seed)?;
            generate_hmm_corpus(&oracle, hmm.count, hmm.max_len, hmm.seed)?
        }
    };
    if !(args.test_fraction > 0.0 && args.test_fraction < 1.0) {
        return Err(CliError::usage("--test-fraction must lie in (0, 1)"));
    }
    let (train, test) = train_test_split(&corpus, args.test_fraction, args.seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(CliError::usage("corpus too small for the requested split"));
    }
    ensure_fresh_dir(&out, args.force)?;
    config.push(("test_fraction".into(), args.test_fraction.to_string()));
    config.push(("lm_order".into(), args.lm_order.to_string()));
    config.push(("lm_k".into(), args.lm_k.to_string()));
    config.push(("train_lm".into(), args.train_lm.to_string()));
    config.push(("vocab_digest".into(), corpus.vocab.digest()));
    manifest.config = config;
    manifest.seeds = vec![args.seed];

    write(&out.join(VOCAB_FILE), &corpus.vocab.to_text())?;
    write(&out.join(TRAIN_FILE), &train.to_text())?;
    write(&out.join(TEST_FILE), &test.to_text())?;
    if args.train_lm {
        let lm = NGramLm::train(&train.sentences, args.lm_order, args.lm_k, corpus.vocab.len())?;
        write(&out.join(LM_FILE), &lm.to_text())?;
    }
    manifest.save(&out)?;
    println!(
        "prepared {} train / {} test sentences, vocabulary {} -> {}",
        train.len(),
        test.len(),
        corpus.vocab.len(),
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hmm_settings_parsing() {
        let s = parse_hmm_settings(&["states=3".into(), "count=10".into()]).unwrap();
        assert_eq!((s.states, s.vocab, s.count), (3, 20, 10));
        assert!(parse_hmm_settings(&["states".into()]).is_err());
        assert!(parse_hmm_settings(&["colour=red".into()]).is_err());
        assert!(parse_hmm_settings(&["states=x".into()]).is_err());
    }
}
