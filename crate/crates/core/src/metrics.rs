// SPDX-License-Identifier: Apache-2.0

//! Forward and reverse perplexity, Self-BLEU, and cross-seed stability
//! statistics.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::corpus::{Sentence, TokenId};
use crate::error::{Error, Result};
use crate::ngram::NGramLm;
use crate::trainers::{Record, TrainRun};

pub use crate::sampler::hamming_audit;

/// Smoothing constant for zero n-gram matches.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Minimum generated corpus size for a reverse-perplexity LM.
pub const MIN_REVERSE_SAMPLES: usize = 100;

/// n-gram LM hyper-parameters shared by both perplexity directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmSettings {
    pub order: usize,
    pub k: f64,
    pub vocab_size: usize,
}

impl LmSettings {
    pub fn train(&self, corpus: &[Sentence]) -> Result<NGramLm> {
        NGramLm::train(corpus, self.order, self.k, self.vocab_size)
    }
}

/// Perplexity of a real-data LM on generated text.
pub fn forward_perplexity(real_train: &[Sentence], generated: &[Sentence], lm: LmSettings) -> Result<f64> {
    if real_train.is_empty() || generated.is_empty() {
        return Err(Error::input("forward perplexity needs non-empty corpora"));
    }
    lm.train(real_train)?.perplexity(generated)
}

/// As [`forward_perplexity`] with an already trained real-data LM.
pub fn forward_perplexity_with(real_lm: &NGramLm, generated: &[Sentence]) -> Result<f64> {
    real_lm.perplexity(generated)
}

/// Perplexity on real test text of an LM trained on generated text.
pub fn reverse_perplexity(real_test: &[Sentence], generated: &[Sentence], lm: LmSettings) -> Result<f64> {
    if generated.len() < MIN_REVERSE_SAMPLES {
        return Err(Error::input(format!(
            "reverse perplexity needs at least {MIN_REVERSE_SAMPLES} generated sentences, got {}",
            generated.len()
        )));
    }
    if real_test.is_empty() {
        return Err(Error::input("reverse perplexity needs a non-empty test corpus"));
    }
    lm.train(generated)?.perplexity(real_test)
}

type Gram = Vec<TokenId>;

/// Per n-gram, the largest count in any one sentence, which sentence holds
/// it, and the runner-up count, so the maximum over "all but one" is O(1).
#[derive(Clone, Copy)]
struct TopTwo {
    best: usize,
    owner: usize,
    second: usize,
}

fn ngram_counts(s: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for g in s.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Mean over sentences of BLEU against every other sentence, for each
/// `n ∈ 2..=max_n` with uniform weights over orders `1..=n`.
pub fn self_bleu(corpus: &[Sentence], max_n: usize) -> Result<Vec<f64>> {
    if corpus.len() < 2 {
        return Err(Error::input("self-BLEU needs at least two sentences"));
    }
    if !(2..=4).contains(&max_n) {
        return Err(Error::contract(format!("max n must be 2, 3 or 4, got {max_n}")));
    }
    let mut tops: Vec<HashMap<Gram, TopTwo>> = vec![HashMap::new(); max_n + 1];
    for (i, s) in corpus.iter().enumerate() {
        for (n, top) in tops.iter_mut().enumerate().skip(1) {
            for (g, c) in ngram_counts(&s.0, n) {
                let e = top.entry(g.to_vec()).or_insert(TopTwo { best: 0, owner: usize::MAX, second: 0 });
                if c > e.best {
                    e.second = e.best;
                    e.best = c;
                    e.owner = i;
                } else if c > e.second {
                    e.second = c;
                }
            }
        }
    }
    let mut length_counts: HashMap<usize, usize> = HashMap::new();
    for s in corpus {
        *length_counts.entry(s.len()).or_insert(0) += 1;
    }
    let mut lengths: Vec<usize> = length_counts.keys().copied().collect();
    lengths.sort_unstable();

    let mut sums = vec![0.0; max_n - 1];
    for (i, s) in corpus.iter().enumerate() {
        let hyp_len = s.len();
        // Closest reference length, shorter on ties.
        let ref_len = lengths
            .iter()
            .copied()
            .filter(|&l| l != hyp_len || length_counts[&l] > 1)
            .min_by_key(|&l| (l.abs_diff(hyp_len), l))
            .expect("at least one other sentence");
        let mut log_p = Vec::with_capacity(max_n);
        let mut unigram_matches = 0;
        for n in 1..=max_n {
            let counts = ngram_counts(&s.0, n);
            let total: usize = counts.values().sum();
            let mut matched = 0;
            for (g, c) in counts {
                let t = tops[n][g];
                let other_max = if t.owner == i { t.second } else { t.best };
                matched += c.min(other_max);
            }
            if n == 1 {
                unigram_matches = matched;
            }
            let denom = total.max(1) as f64;
            let p = if matched == 0 { BLEU_EPSILON / denom } else { matched as f64 / denom };
            log_p.push(p.ln());
        }
        if unigram_matches == 0 {
            continue;
        }
        let bp = if hyp_len > ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        };
        for n in 2..=max_n {
            let mean_log = log_p[..n].iter().sum::<f64>() / n as f64;
            sums[n - 2] += bp * mean_log.exp();
        }
    }
    Ok(sums.into_iter().map(|s| s / corpus.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ppl_f: f64,
    pub ppl_r: f64,
    /// Self-BLEU for n = 2, 3, 4.
    pub self_bleu: [f64; 3],
    pub samples: usize,
    pub seed: u64,
    pub iteration: usize,
}

impl MetricReport {
    pub fn compute(
        real_lm: &NGramLm,
        real_test: &[Sentence],
        generated: &[Sentence],
        bleu_sample: usize,
        seed: u64,
        iteration: usize,
    ) -> Result<Self> {
        let settings = LmSettings {
            order: real_lm.order(),
            k: real_lm.smoothing(),
            vocab_size: real_lm.vocab_size(),
        };
        let ppl_f = forward_perplexity_with(real_lm, generated)?;
        let ppl_r = reverse_perplexity(real_test, generated, settings)?;
        let n = bleu_sample.clamp(2, generated.len().max(2));
        let sb = self_bleu(&generated[..n.min(generated.len())], 4)?;
        Ok(MetricReport {
            ppl_f,
            ppl_r,
            self_bleu: [sb[0], sb[1], sb[2]],
            samples: generated.len(),
            seed,
            iteration,
        })
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metric names in CSV order.
pub const METRICS: [&str; 7] = ["g_loss", "d_loss", "ppl_f", "ppl_r", "sbleu2", "sbleu3", "sbleu4"];

pub fn metric_value(r: &Record, metric: &str) -> Option<f64> {
    Some(match metric {
        "g_loss" => r.g_loss,
        "d_loss" => r.d_loss,
        "ppl_f" => r.metrics.ppl_f,
        "ppl_r" => r.metrics.ppl_r,
        "sbleu2" => r.metrics.self_bleu[0],
        "sbleu3" => r.metrics.self_bleu[1],
        "sbleu4" => r.metrics.self_bleu[2],
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub trainer: String,
    pub n_seeds: usize,
    /// Each seed's mean over its last [`FINAL_WINDOW`] records, then
    /// mean/std across seeds.
    pub final_window: Vec<Summary>,
    pub curves: Vec<CurvePoint>,
}

pub const FINAL_WINDOW: usize = 10;

pub const STABILITY_HEADER: &str = "trainer,metric,mean,std,n_seeds";

impl StabilityReport {
    pub fn summary(&self, metric: &str) -> Option<&Summary> {
        self.final_window.iter().find(|s| s.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(STABILITY_HEADER);
        out.push('\n');
        self.append_rows(&mut out);
        out
    }

    pub fn append_rows(&self, out: &mut String) {
        for s in &self.final_window {
            let _ = writeln!(out, "{},{},{},{},{}", self.trainer, s.metric, s.mean, s.std, self.n_seeds);
        }
    }
}

/// Cross-seed statistics over runs that differ only in their seed.
pub fn stability_stats(runs: &[TrainRun]) -> Result<StabilityReport> {
    if runs.len() < 2 {
        return Err(Error::input("stability statistics need at least two runs"));
    }
    let base = runs[0].config.without_seed();
    if runs.iter().any(|r| r.config.without_seed() != base) {
        return Err(Error::input("runs differ in more than their seed"));
    }
    let records: Vec<&[Record]> = runs.iter().map(|r| r.records.as_slice()).collect();
    stability_from_records(runs[0].config.trainer.as_str(), &records)
}

/// As [`stability_stats`] for record lists read back from CSV, where the
/// configurations are not available.
pub fn stability_from_records(trainer: &str, runs: &[&[Record]]) -> Result<StabilityReport> {
    if runs.len() < 2 {
        return Err(Error::input("stability statistics need at least two runs"));
    }
    let iters: Vec<usize> = runs[0].iter().map(|r| r.iteration).collect();
    if iters.is_empty() {
        return Err(Error::input("runs have no records"));
    }
    if runs.iter().any(|r| r.iter().map(|x| x.iteration).ne(iters.iter().copied())) {
        return Err(Error::input("runs were evaluated at different iterations"));
    }
    let window = FINAL_WINDOW.min(iters.len());
    let mut final_window = Vec::new();
    let mut curves = Vec::new();
    for metric in METRICS {
        let per_seed: Vec<f64> = runs
            .iter()
            .map(|r| {
                let tail = &r[r.len() - window..];
                tail.iter().map(|x| metric_value(x, metric).unwrap()).sum::<f64>() / window as f64
            })
            .collect();
        let (mean, std) = mean_std(&per_seed);
        final_window.push(Summary { metric, mean, std });
        for (j, &iteration) in iters.iter().enumerate() {
            let vals: Vec<f64> = runs.iter().map(|r| metric_value(&r[j], metric).unwrap()).collect();
            let (mean, std) = mean_std(&vals);
            curves.push(CurvePoint { iteration, metric, mean, std });
        }
    }
    Ok(StabilityReport {
        trainer: trainer.to_string(),
        n_seeds: runs.len(),
        final_window,
        curves,
    })
}
