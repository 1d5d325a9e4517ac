// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use araml_core::corpus::Sentence;
use araml_core::metrics::{stability_from_records, MetricReport, StabilityReport, METRICS};
use araml_core::models::Generator;
use araml_core::ngram::NGramLm;
use araml_core::rng;
use araml_core::trainers::{read_run_csv, write_record, Record, RUN_HEADER};

use crate::data::Prepared;
use crate::error::{CliError, CliResult};
use crate::train::RUN_CSV;
use crate::{default_data_dir, usage_error};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Prepared data directory (default `$ARAML_OUT_DIR/data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// File of generated sentences, one per line.
    #[arg(long, conflicts_with_all = ["checkpoint", "compare"])]
    pub samples: Option<PathBuf>,
    /// Generator checkpoint to sample from.
    #[arg(long, conflicts_with = "compare")]
    pub checkpoint: Option<PathBuf>,
    /// Two run directories written by `araml train`.
    #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
    pub compare: Option<Vec<PathBuf>>,
    /// Sentences drawn from a checkpoint.
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Sentences used for Self-BLEU.
    #[arg(long, default_value_t = 200)]
    pub bleu_samples: usize,
    /// CSV the report row is appended to (default: `eval.csv` in the data directory).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// n-gram order (default: the value recorded at prepare time).
    #[arg(long)]
    pub lm_order: Option<usize>,
    #[arg(long)]
    pub lm_k: Option<f64>,
}

fn read_samples(path: &Path, data: &Prepared) -> CliResult<Vec<Sentence>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let resp = line.split_once('\t').map_or(line, |(_, r)| r);
            data.vocab.encode(resp).ok_or_else(|| {
                CliError::usage(format!(
                    "{} line {}: token outside the prepared vocabulary",
                    path.display(),
                    n + 1
                ))
            })
        })
        .collect()
}

fn sample_checkpoint(path: &Path, data: &Prepared, count: usize, seed: u64) -> CliResult<(Vec<Sentence>, String, usize)> {
    let (gen, meta) = Generator::load(path)?;
    let digest = data.vocab.digest();
    match meta.get("vocab_digest") {
        Some(d) if *d == digest => {}
        Some(d) => {
            return Err(CliError::usage(format!(
                "checkpoint vocabulary {d} does not match the corpus vocabulary {digest}"
            )))
        }
        None if gen.config.vocab_size != data.vocab.len() => {
            return Err(CliError::usage("checkpoint vocabulary size does not match the corpus"))
        }
        None => {}
    }
    let contexts: Option<Vec<Sentence>> = if gen.config.conditional {
        let ctx = data
            .test
            .contexts
            .as_ref()
            .ok_or_else(|| CliError::usage("conditional checkpoint needs a paired corpus"))?;
        Some((0..count).map(|i| ctx[i % ctx.len()].clone()).collect())
    } else {
        None
    };
    let mut r = rng::indexed_stream(seed, rng::EVAL, 0);
    let samples = gen.sample(count, data.longest_sentence(), contexts.as_deref(), &mut r)?;
    let trainer = meta.get("trainer").cloned().unwrap_or_else(|| "checkpoint".into());
    let iteration = meta.get("iteration").and_then(|v| v.parse().ok()).unwrap_or(0);
    Ok((samples, trainer, iteration))
}

fn load_run(dir: &Path) -> CliResult<StabilityReport> {
    let mut seeds: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed-")))
        .filter(|p| p.join(RUN_CSV).exists())
        .collect();
    seeds.sort();
    if seeds.is_empty() {
        return Err(CliError::io(format!("{} contains no seed-*/{RUN_CSV}", dir.display())));
    }
    let mut trainer = String::new();
    let mut runs: Vec<Vec<Record>> = Vec::new();
    for s in &seeds {
        let p = s.join(RUN_CSV);
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        let (t, records) = read_run_csv(&text)?;
        trainer = t;
        runs.push(records);
    }
    if runs.len() == 1 {
        runs.push(runs[0].clone());
    }
    let refs: Vec<&[Record]> = runs.iter().map(Vec::as_slice).collect();
    let mut report = stability_from_records(&trainer, &refs)?;
    report.n_seeds = seeds.len();
    Ok(report)
}

/// Side-by-side final-window statistics of two runs.
pub fn compare_table(a: &StabilityReport, b: &StabilityReport) -> String {
    let mut out = String::from("metric,trainer_a,mean_a,std_a,n_a,trainer_b,mean_b,std_b,n_b,delta_mean,delta_std\n");
    for metric in METRICS {
        if let (Some(x), Some(y)) = (a.summary(metric), b.summary(metric)) {
            let _ = writeln!(
                out,
                "{metric},{},{},{},{},{},{},{},{},{},{}",
                a.trainer,
                x.mean,
                x.std,
                a.n_seeds,
                b.trainer,
                y.mean,
                y.std,
                b.n_seeds,
                y.mean - x.mean,
                y.std - x.std
            );
        }
    }
    out
}

fn append_csv(path: &Path, row: &str) -> CliResult<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    if !fresh {
        let head = fs::read_to_string(path)?;
        if head.lines().next().map(str::trim) != Some(RUN_HEADER) {
            return Err(CliError::io(format!("{} has an unexpected header", path.display())));
        }
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    if fresh {
        writeln!(f, "{RUN_HEADER}")?;
    }
    f.write_all(row.as_bytes())?;
    Ok(())
}

pub fn run(args: Args) -> CliResult<()> {
    if let Some(dirs) = &args.compare {
        let a = load_run(&dirs[0])?;
        let b = load_run(&dirs[1])?;
        print!("{}", compare_table(&a, &b));
        return Ok(());
    }
    let data_dir = args.data.clone().unwrap_or_else(default_data_dir);
    let data = Prepared::load(&data_dir)?;
    let (generated, trainer, iteration) = match (&args.samples, &args.checkpoint) {
        (Some(p), None) => (read_samples(p, &data)?, "samples".to_string(), 0),
        (None, Some(p)) => sample_checkpoint(p, &data, args.count, args.seed)?,
        _ => return Err(usage_error("give one of --samples, --checkpoint or --compare", "eval")),
    };
    let order = args.lm_order.unwrap_or(data.lm_order);
    let k = args.lm_k.unwrap_or(data.lm_k);
    let lm = NGramLm::train(&data.train.sentences, order, k, data.vocab.len())
        .map_err(|e| CliError::usage(e.to_string()))?;
    let report = MetricReport::compute(&lm, &data.test.sentences, &generated, args.bleu_samples, args.seed, iteration)?;
    println!("samples = {}", report.samples);
    println!("ppl_f = {}", report.ppl_f);
    println!("ppl_r = {}", report.ppl_r);
    for (n, v) in report.self_bleu.iter().enumerate() {
        println!("sbleu{} = {v}", n + 2);
    }
    let record = Record { iteration, g_loss: f64::NAN, d_loss: f64::NAN, metrics: report, elapsed_secs: 0.0 };
    let mut row = String::new();
    write_record(&mut row, &record, args.seed, &trainer);
    let csv = args.csv.clone().unwrap_or_else(|| data.file("eval.csv"));
    append_csv(&csv, &row)?;
    println!("csv = {}", csv.display());
    Ok(())
}
