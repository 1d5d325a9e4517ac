// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use araml_core::rng;
use araml_core::sampler::{augment_corpus, hamming_audit, write_augmented, SamplerConfig, Strategy};

use crate::data::Prepared;
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{default_data_dir, usage_error};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Prepared data directory (default `$ARAML_OUT_DIR/data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Temperature of the edit-distance distribution.
    #[arg(long, default_value_t = 0.85)]
    pub tau: f64,
    /// `constrained` (LM-guided substitutions) or `random`.
    #[arg(long, default_value = "constrained")]
    pub strategy: String,
    /// Samples drawn per training sentence.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Upper bound on the edit distance.
    #[arg(long)]
    pub max_edit_cap: Option<usize>,
    /// LM for constrained sampling (default: `lm.txt` in the data directory).
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output file (default: `augmented.tsv` in the data directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> CliResult<()> {
    let data_dir = args.data.clone().unwrap_or_else(default_data_dir);
    let strategy: Strategy = args
        .strategy
        .parse()
        .map_err(|_| usage_error(&format!("unknown strategy {:?}; use constrained or random", args.strategy), "augment"))?;
    let config = SamplerConfig {
        tau: args.tau,
        strategy,
        samples_per_datum: args.k,
        max_edit_cap: args.max_edit_cap,
    };
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let data = Prepared::load(&data_dir)?;
    let lm_path = args.lm.clone().or_else(|| Some(data.lm_path()).filter(|p| p.exists()));
    let lm = match (&lm_path, strategy) {
        (Some(p), _) => Some(data.load_lm(p)?),
        (None, Strategy::Constrained) => {
            return Err(CliError::usage(
                "constrained sampling needs a language model; run `araml prepare --train-lm` \
                 or pass --lm FILE (or use --strategy random)",
            ))
        }
        (None, Strategy::Random) => None,
    };
    let mut r = rng::stream(args.seed, rng::SAMPLER);
    let samples = augment_corpus(&data.train, &config, lm.as_ref(), &mut r)?;
    let out = args.out.clone().unwrap_or_else(|| data.file("augmented.tsv"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_augmented(&out, &samples, &data.vocab)?;

    let mut manifest = RunManifest::new("augment", &out);
    manifest.seeds = vec![args.seed];
    manifest.config = vec![
        ("tau".into(), args.tau.to_string()),
        ("strategy".into(), strategy.as_str().into()),
        ("k".into(), args.k.to_string()),
        ("max_edit_cap".into(), args.max_edit_cap.map_or("none".into(), |c| c.to_string())),
    ];
    manifest.add_input("train", &data.file(crate::prepare::TRAIN_FILE))?;
    if let Some(p) = &lm_path {
        manifest.add_input("lm", p)?;
    }
    let manifest_path = PathBuf::from(format!("{}.manifest.txt", out.display()));
    std::fs::write(&manifest_path, manifest.to_text())
        .map_err(|e| CliError::io(format!("{}: {e}", manifest_path.display())))?;

    let mean = samples.iter().map(|s| s.distance as f64).sum::<f64>() / samples.len() as f64;
    println!("samples = {}", samples.len());
    println!("mean_distance = {mean:.4}");
    println!("strategy = {}", strategy.as_str());
    println!("hamming_violations = {}", hamming_audit(&samples));
    println!("output = {}", out.display());
    Ok(())
}
