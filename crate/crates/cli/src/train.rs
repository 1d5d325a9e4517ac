// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use araml_core::metrics::stability_from_records;
use araml_core::trainers::{pretrain, train_from, write_record, Record, TrainData, TrainRun, TrainingConfig, RUN_HEADER};

use crate::config::read_pairs;
use crate::data::Prepared;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{default_data_dir, ensure_fresh_dir, output_root};

pub const RUN_CSV: &str = "run.csv";
pub const STABILITY_CSV: &str = "stability.csv";
pub const FAILURE_FILE: &str = "failure.txt";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const DISCRIMINATOR_FILE: &str = "discriminator.ckpt";

/// Manifest keys that describe a run rather than configure one.
const MANIFEST_KEYS: [&str; 3] = ["command", "tool_version", "output_dir"];

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Prepared data directory (default `$ARAML_OUT_DIR/data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// araml, mle, raml, maligan or seqgan-pg.
    #[arg(long)]
    pub trainer: Option<String>,
    /// Comma-separated seed list, e.g. `1,2,3,4,5`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// `key = value` config file; a run manifest is accepted as well.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_g: Option<f64>,
    #[arg(long)]
    pub lr_d: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Augmented samples per sentence.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Replace the discriminator by a constant scorer.
    #[arg(long)]
    pub freeze_discriminator: bool,
    /// Draw the augmented samples once and reuse them.
    #[arg(long)]
    pub freeze_augmentation: bool,
    /// Output directory (default `$ARAML_OUT_DIR/runs/<trainer>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

/// Layers defaults, config file, `--set` and explicit flags, in that order.
pub fn resolve(args: &Args, data: &Prepared) -> CliResult<(TrainingConfig, Vec<u64>)> {
    let mut config = TrainingConfig {
        conditional: data.train.is_paired(),
        lm_order: data.lm_order,
        lm_k: data.lm_k,
        ..TrainingConfig::default()
    };
    let mut seeds = None;
    let apply = |config: &mut TrainingConfig, k: &str, v: &str| -> CliResult<()> {
        config.set(k, v).map_err(|e| CliError::usage(e.to_string()))
    };
    if let Some(path) = &args.config {
        for (k, v) in read_pairs(path)? {
            if MANIFEST_KEYS.contains(&k.as_str()) || k.starts_with("input.") {
                continue;
            }
            if k == "seeds" {
                seeds = Some(parse_seeds(&v)?);
                continue;
            }
            apply(&mut config, k.strip_prefix("config.").unwrap_or(&k), &v)?;
        }
    }
    for item in &args.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        apply(&mut config, k.trim(), v.trim())?;
    }
    let flags: [(&str, Option<String>); 10] = [
        ("trainer", args.trainer.clone()),
        ("iterations", args.iterations.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("lr_g", args.lr_g.map(|v| v.to_string())),
        ("lr_d", args.lr_d.map(|v| v.to_string())),
        ("tau", args.tau.map(|v| v.to_string())),
        ("strategy", args.strategy.clone()),
        ("samples_per_datum", args.k.map(|v| v.to_string())),
        ("hidden_dim", args.hidden_dim.map(|v| v.to_string())),
        ("embed_dim", args.embed_dim.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            apply(&mut config, k, &v)?;
        }
    }
    config.freeze_discriminator |= args.freeze_discriminator;
    config.freeze_augmentation |= args.freeze_augmentation;
    if let Some(s) = &args.seeds {
        seeds = Some(s.clone());
    }
    let seeds = seeds.unwrap_or_else(|| vec![config.seed]);
    if seeds.is_empty() {
        return Err(CliError::usage("--seeds must list at least one seed"));
    }
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    Ok((config, seeds))
}

fn parse_seeds(v: &str) -> CliResult<Vec<u64>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| CliError::usage(format!("bad seed {s:?}"))))
        .collect()
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn checkpoint_meta(data: &Prepared, config: &TrainingConfig, iteration: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("vocab_digest".to_string(), data.vocab.digest()),
        ("trainer".to_string(), config.trainer.as_str().to_string()),
        ("seed".to_string(), config.seed.to_string()),
        ("iteration".to_string(), iteration.to_string()),
    ])
}

/// Writes the diagnostic record and builds the exit-4 error.
fn failure(dir: &Path, iteration: usize, stage: &str, message: &str) -> CliError {
    let path = dir.join(FAILURE_FILE);
    let mut text = String::new();
    let _ = writeln!(text, "iteration = {iteration}");
    let _ = writeln!(text, "stage = {stage}");
    let _ = writeln!(text, "message = {message}");
    if let Err(e) = write(&path, &text) {
        return e;
    }
    CliError::Numeric(format!(
        "numeric failure at iteration {iteration} ({stage}): {message}; diagnostic record: {}",
        path.display()
    ))
}

fn run_seed(config: &TrainingConfig, data: &Prepared, train_data: &TrainData, dir: &Path) -> CliResult<TrainRun> {
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let csv_path = dir.join(RUN_CSV);
    let mut csv = format!("{RUN_HEADER}\n");
    write(&csv_path, &csv)?;
    let pre = match pretrain(config, train_data) {
        Ok(p) => p,
        Err(e) if e.is_numeric() => return Err(failure(dir, 0, "pretrain", &e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let mut observer = |r: &Record, g: &araml_core::models::Generator, _: Option<&araml_core::models::Discriminator>| {
        write_record(&mut csv, r, config.seed, config.trainer.as_str());
        fs::write(&csv_path, &csv)?;
        let path = ckpt_dir.join(format!("generator-{:06}.ckpt", r.iteration));
        g.save(&path, &checkpoint_meta(data, config, r.iteration))
    };
    let run = match train_from(config, train_data, pre, &mut observer) {
        Ok(run) => run,
        Err(e) if e.is_numeric() => return Err(failure(dir, 0, "train", &e.to_string())),
        Err(e) => return Err(e.into()),
    };
    if let Some(f) = &run.failure {
        return Err(failure(dir, f.iteration, f.stage, &f.message));
    }
    write(&csv_path, &run.to_csv())?;
    let last = run.records.last().map_or(0, |r| r.iteration);
    let meta = checkpoint_meta(data, config, last);
    run.generator.save(&dir.join(GENERATOR_FILE), &meta)?;
    if let Some(d) = &run.discriminator {
        d.save(&dir.join(DISCRIMINATOR_FILE), &meta)?;
    }
    for w in &run.warnings {
        eprintln!("warning (seed {}): {w}", config.seed);
    }
    Ok(run)
}

pub fn run(args: Args) -> CliResult<()> {
    let data_dir = args.data.clone().unwrap_or_else(default_data_dir);
    let data = Prepared::load(&data_dir)?;
    let (config, seeds) = resolve(&args, &data)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| output_root().join("runs").join(config.trainer.as_str()));
    let mut manifest = RunManifest::new("train", &out);
    manifest.config = config.to_pairs();
    manifest.config.retain(|(k, _)| k != "seed");
    manifest.seeds = seeds.clone();
    manifest.add_input("vocab", &data.file(crate::prepare::VOCAB_FILE))?;
    manifest.add_input("train", &data.file(crate::prepare::TRAIN_FILE))?;
    manifest.add_input("test", &data.file(crate::prepare::TEST_FILE))?;
    if args.dry_run {
        print!("{}", manifest.to_text());
        return Ok(());
    }
    ensure_fresh_dir(&out, args.force)?;
    manifest.save(&out)?;

    let train_data = TrainData::new(data.train.clone(), data.test.clone(), &config)?;
    let mut all_records: Vec<Vec<Record>> = Vec::new();
    for &seed in &seeds {
        let cfg = TrainingConfig { seed, ..config.clone() };
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let run = run_seed(&cfg, &data, &train_data, &dir)?;
        if let Some(r) = run.records.last() {
            println!(
                "seed {seed}: iter {} ppl_f {:.3} ppl_r {:.3} sbleu2 {:.4}",
                r.iteration, r.metrics.ppl_f, r.metrics.ppl_r, r.metrics.self_bleu[0]
            );
        }
        all_records.push(run.records);
    }
    if seeds.len() >= 2 {
        let refs: Vec<&[Record]> = all_records.iter().map(Vec::as_slice).collect();
        let report = stability_from_records(config.trainer.as_str(), &refs)?;
        write(&out.join(STABILITY_CSV), &report.to_csv())?;
        print!("{}", report.to_csv());
    }
    println!("output = {}", out.display());
    Ok(())
}
