// SPDX-License-Identifier: Apache-2.0

//! Pretraining, the ARAML loop, and the comparison trainers (MLE, static
//! RAML, MaliGAN, sentence-level policy gradient).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Adam, Tape};
use crate::corpus::{Corpus, Sentence};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::models::{
    discriminator_loss_var, maligan_weights, normalize_weights, policy_gradient_loss_var,
    weighted_mle_loss_var, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, SentenceBatch,
};
use crate::ngram::NGramLm;
use crate::rng::{self, RunRng};
use crate::sampler::{Sampler, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainerKind {
    Mle,
    Raml,
    Araml,
    Maligan,
    PolicyGradient,
}

impl TrainerKind {
    pub const ALL: [TrainerKind; 5] = [
        TrainerKind::Mle,
        TrainerKind::Raml,
        TrainerKind::Araml,
        TrainerKind::Maligan,
        TrainerKind::PolicyGradient,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainerKind::Mle => "mle",
            TrainerKind::Raml => "raml",
            TrainerKind::Araml => "araml",
            TrainerKind::Maligan => "maligan",
            TrainerKind::PolicyGradient => "seqgan-pg",
        }
    }

    pub fn uses_discriminator(self) -> bool {
        matches!(self, TrainerKind::Araml | TrainerKind::Maligan | TrainerKind::PolicyGradient)
    }

    pub fn uses_sampler(self) -> bool {
        matches!(self, TrainerKind::Raml | TrainerKind::Araml)
    }
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown trainer {s:?} (expected mle, raml, araml, maligan or seqgan-pg)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub trainer: TrainerKind,
    pub iterations: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// `None` picks `min(50, 10 · corpus kB)`.
    pub pretrain_g_epochs: Option<usize>,
    /// `None` picks `min(15, 10 · corpus kB)`.
    pub pretrain_d_epochs: Option<usize>,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub conditional: bool,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// `None` picks one layer, or two in conditional mode.
    pub layers: Option<usize>,
    /// `None` uses the longest training sentence.
    pub max_length: Option<usize>,
    pub eval_samples: usize,
    pub bleu_samples: usize,
    pub lm_order: usize,
    pub lm_k: f64,
    /// `None` evaluates every `max(1, iterations / 50)` iterations.
    pub eval_every: Option<usize>,
    /// Replace the discriminator by a zero-parameter constant and never train it.
    pub freeze_discriminator: bool,
    /// Draw the augmented pool once instead of per batch.
    pub freeze_augmentation: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            trainer: TrainerKind::Araml,
            iterations: 200,
            g_steps: 1,
            d_steps: 1,
            batch_size: 100,
            lr_g: 0.001,
            lr_d: 0.0001,
            pretrain_g_epochs: None,
            pretrain_d_epochs: None,
            sampler: SamplerConfig::default(),
            seed: 1,
            conditional: false,
            embed_dim: 128,
            hidden_dim: 128,
            layers: None,
            max_length: None,
            eval_samples: 500,
            bleu_samples: 200,
            lm_order: 3,
            lm_k: 0.1,
            eval_every: None,
            freeze_discriminator: false,
            freeze_augmentation: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("g_steps", self.g_steps),
            ("d_steps", self.d_steps),
            ("batch_size", self.batch_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::input(format!("{name} must be positive")));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::input("learning rates must be positive"));
        }
        if self.eval_samples < crate::metrics::MIN_REVERSE_SAMPLES {
            return Err(Error::input(format!(
                "eval_samples must be at least {}",
                crate::metrics::MIN_REVERSE_SAMPLES
            )));
        }
        if self.layers == Some(0) || self.max_length == Some(0) || self.eval_every == Some(0) {
            return Err(Error::input("layers, max_length and eval_every must be positive"));
        }
        if !(2..=3).contains(&self.lm_order) || !(self.lm_k > 0.0) {
            return Err(Error::input("lm_order must be 2 or 3 and lm_k positive"));
        }
        self.sampler.validate().map_err(|e| Error::input(e.to_string()))
    }

    pub fn layers(&self) -> usize {
        self.layers.unwrap_or(if self.conditional { 2 } else { 1 })
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every.unwrap_or((self.iterations / 50).max(1))
    }

    /// The same configuration with the seed zeroed, for comparing runs.
    pub fn without_seed(&self) -> Self {
        TrainingConfig { seed: 0, ..self.clone() }
    }

    pub fn generator_config(&self, vocab_size: usize) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            layers: self.layers(),
            conditional: self.conditional,
        }
    }

    pub fn discriminator_config(&self, vocab_size: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }

    /// `key = value` pairs, in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let opt = |o: Option<usize>| o.map_or_else(|| "auto".to_string(), |v| v.to_string());
        vec![
            ("trainer".into(), self.trainer.as_str().into()),
            ("iterations".into(), self.iterations.to_string()),
            ("g_steps".into(), self.g_steps.to_string()),
            ("d_steps".into(), self.d_steps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr_g".into(), self.lr_g.to_string()),
            ("lr_d".into(), self.lr_d.to_string()),
            ("pretrain_g_epochs".into(), opt(self.pretrain_g_epochs)),
            ("pretrain_d_epochs".into(), opt(self.pretrain_d_epochs)),
            ("tau".into(), self.sampler.tau.to_string()),
            ("strategy".into(), self.sampler.strategy.as_str().into()),
            ("samples_per_datum".into(), self.sampler.samples_per_datum.to_string()),
            ("max_edit_cap".into(), opt(self.sampler.max_edit_cap)),
            ("seed".into(), self.seed.to_string()),
            ("conditional".into(), self.conditional.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("hidden_dim".into(), self.hidden_dim.to_string()),
            ("layers".into(), opt(self.layers)),
            ("max_length".into(), opt(self.max_length)),
            ("eval_samples".into(), self.eval_samples.to_string()),
            ("bleu_samples".into(), self.bleu_samples.to_string()),
            ("lm_order".into(), self.lm_order.to_string()),
            ("lm_k".into(), self.lm_k.to_string()),
            ("eval_every".into(), opt(self.eval_every)),
            ("freeze_discriminator".into(), self.freeze_discriminator.to_string()),
            ("freeze_augmentation".into(), self.freeze_augmentation.to_string()),
        ]
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::input(format!("invalid value {v:?} for {key}")))
        }
        fn opt(key: &str, v: &str) -> Result<Option<usize>> {
            if v == "auto" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        match key {
            "trainer" => self.trainer = value.parse()?,
            "iterations" => self.iterations = num(key, value)?,
            "g_steps" => self.g_steps = num(key, value)?,
            "d_steps" => self.d_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_g" => self.lr_g = num(key, value)?,
            "lr_d" => self.lr_d = num(key, value)?,
            "pretrain_g_epochs" => self.pretrain_g_epochs = opt(key, value)?,
            "pretrain_d_epochs" => self.pretrain_d_epochs = opt(key, value)?,
            "tau" => self.sampler.tau = num(key, value)?,
            "strategy" => self.sampler.strategy = value.parse().map_err(|e: Error| Error::input(e.to_string()))?,
            "samples_per_datum" | "k" => self.sampler.samples_per_datum = num(key, value)?,
            "max_edit_cap" => self.sampler.max_edit_cap = opt(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "conditional" => self.conditional = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "layers" => self.layers = opt(key, value)?,
            "max_length" => self.max_length = opt(key, value)?,
            "eval_samples" => self.eval_samples = num(key, value)?,
            "bleu_samples" => self.bleu_samples = num(key, value)?,
            "lm_order" => self.lm_order = num(key, value)?,
            "lm_k" => self.lm_k = num(key, value)?,
            "eval_every" => self.eval_every = opt(key, value)?,
            "freeze_discriminator" => self.freeze_discriminator = num(key, value)?,
            "freeze_augmentation" => self.freeze_augmentation = num(key, value)?,
            _ => return Err(Error::input(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

/// Default pretraining length: the table value, capped at ten epochs per
/// kilobyte of training text.
pub fn scaled_epochs(table_value: usize, corpus: &Corpus) -> usize {
    let kb = corpus.to_text().len() as f64 / 1024.0;
    ((10.0 * kb).ceil() as usize).clamp(1, table_value)
}

/// Training and test splits plus the real-data LM used for constrained
/// sampling and forward perplexity.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Corpus,
    pub test: Corpus,
    pub lm: NGramLm,
}

impl TrainData {
    pub fn new(train: Corpus, test: Corpus, config: &TrainingConfig) -> Result<Self> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::input("training and test corpora must be non-empty"));
        }
        if train.vocab != test.vocab {
            return Err(Error::input("training and test corpora use different vocabularies"));
        }
        if config.conditional && !(train.is_paired() && test.is_paired()) {
            return Err(Error::input("conditional training needs paired corpora"));
        }
        let lm = NGramLm::train(&train.sentences, config.lm_order, config.lm_k, train.vocab.len())?;
        Ok(TrainData { train, test, lm })
    }

    pub fn vocab_size(&self) -> usize {
        self.train.vocab.len()
    }

    fn max_length(&self, config: &TrainingConfig) -> usize {
        config
            .max_length
            .unwrap_or_else(|| self.train.sentences.iter().map(Sentence::len).max().unwrap_or(1).max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub iteration: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub metrics: MetricReport,
    /// Seconds since the adversarial phase started; excluded from CSV.
    pub elapsed_secs: f64,
}

/// Counters that let tests confirm protocol properties of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Instrumentation {
    pub g_updates: u64,
    pub d_updates: u64,
    /// Sentences drawn from the generator to build generator updates.
    pub generator_samples_for_g: u64,
    /// Sentences drawn from the generator to build discriminator updates.
    pub generator_samples_for_d: u64,
    pub snapshot_checks: u64,
    pub snapshot_mismatches: u64,
    /// Largest `|Σ w − 1|` over all generator batches.
    pub max_weight_sum_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub iteration: usize,
    pub stage: &'static str,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: TrainingConfig,
    pub records: Vec<Record>,
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub pretrain_g_losses: Vec<EpochStats>,
    pub pretrain_d_losses: Vec<f64>,
    pub stats: Instrumentation,
    pub failure: Option<Failure>,
    pub warnings: Vec<String>,
}

pub const RUN_HEADER: &str = "iter,g_loss,d_loss,ppl_f,ppl_r,sbleu2,sbleu3,sbleu4,seed,trainer";

impl TrainRun {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RUN_HEADER);
        out.push('\n');
        for r in &self.records {
            write_record(&mut out, r, self.config.seed, self.config.trainer.as_str());
        }
        out
    }
}

pub fn write_record(out: &mut String, r: &Record, seed: u64, trainer: &str) {
    let m = &r.metrics;
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{}",
        r.iteration, r.g_loss, r.d_loss, m.ppl_f, m.ppl_r, m.self_bleu[0], m.self_bleu[1], m.self_bleu[2], seed, trainer
    );
}

/// Parses a run CSV back into (trainer, records).
pub fn read_run_csv(text: &str) -> Result<(String, Vec<Record>)> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RUN_HEADER) {
        return Err(Error::format("run csv", "unexpected header"));
    }
    let mut trainer = None;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::format("run csv", format!("line {} has {} fields", i + 2, f.len())));
        }
        let bad = || Error::format("run csv", format!("bad number on line {}", i + 2));
        let x = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
        let iteration = f[0].parse().map_err(|_| bad())?;
        let seed = f[8].parse().map_err(|_| bad())?;
        match &trainer {
            None => trainer = Some(f[9].to_string()),
            Some(t) if t != f[9] => return Err(Error::format("run csv", "mixed trainers in one file")),
            _ => {}
        }
        records.push(Record {
            iteration,
            g_loss: x(1)?,
            d_loss: x(2)?,
            metrics: MetricReport {
                ppl_f: x(3)?,
                ppl_r: x(4)?,
                self_bleu: [x(5)?, x(6)?, x(7)?],
                samples: 0,
                seed,
                iteration,
            },
            elapsed_secs: 0.0,
        });
    }
    let trainer = trainer.ok_or_else(|| Error::format("run csv", "no records"))?;
    Ok((trainer, records))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean per-sentence negative log-likelihood.
    pub loss: f64,
    /// Token-level perplexity including end markers.
    pub perplexity: f64,
}

/// One weighted row of a generator batch.
struct Row {
    context: Option<Sentence>,
    sentence: Sentence,
    weight: f64,
}

/// Folds duplicate (context, sentence) rows into one row carrying the sum
/// of their weights, keeping first-appearance order.
fn merge_rows(rows: Vec<Row>) -> Vec<Row> {
    let mut index: HashMap<(Option<Sentence>, Sentence), usize> = HashMap::new();
    let mut out: Vec<Row> = Vec::new();
    for r in rows {
        let key = (r.context, r.sentence);
        match index.get(&key) {
            Some(&i) => out[i].weight += r.weight,
            None => {
                index.insert(key.clone(), out.len());
                out.push(Row {
                    context: key.0,
                    sentence: key.1,
                    weight: r.weight,
                });
            }
        }
    }
    out
}

fn make_batch(contexts: Option<Vec<Sentence>>, sentences: Vec<Sentence>) -> Result<SentenceBatch> {
    match contexts {
        Some(c) => SentenceBatch::with_contexts(sentences, c),
        None => SentenceBatch::new(sentences),
    }
}

fn split_rows(rows: Vec<Row>, conditional: bool) -> (Option<Vec<Sentence>>, Vec<Sentence>, Vec<f64>) {
    let mut ctx = Vec::new();
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for r in rows {
        if let Some(c) = r.context {
            ctx.push(c);
        }
        xs.push(r.sentence);
        ws.push(r.weight);
    }
    (conditional.then_some(ctx), xs, ws)
}

/// Weighted-likelihood update on merged, self-normalized rows. Returns the
/// loss and `|Σ w − 1|`.
fn weighted_update(gen: &mut Generator, adam: &mut Adam, rows: Vec<Row>) -> Result<(f64, f64)> {
    let conditional = gen.config.conditional;
    let (ctx, xs, ws) = split_rows(merge_rows(rows), conditional);
    let ws = normalize_weights(ws)?;
    let err = (ws.iter().sum::<f64>() - 1.0).abs();
    let batch = make_batch(ctx, xs)?;
    let mut tape = Tape::new();
    let lp = gen.log_prob_var(&mut tape, &batch)?;
    let loss = weighted_mle_loss_var(&mut tape, lp, &ws)?;
    let value = tape.value(loss).item();
    gen.params.zero_grad();
    tape.backward(loss, &mut gen.params)?;
    adam.step(&mut gen.params)?;
    Ok((value, err))
}

fn context_of(corpus: &Corpus, i: usize) -> Option<Sentence> {
    corpus.context(i).cloned()
}

/// MLE on the corpus for `epochs` shuffled passes.
pub fn pretrain_generator(
    gen: &mut Generator,
    corpus: &Corpus,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut RunRng,
) -> Result<Vec<EpochStats>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    if gen.config.conditional && !corpus.is_paired() {
        return Err(Error::contract("conditional generator needs a paired corpus"));
    }
    let mut adam = Adam::new(lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut out = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for chunk in order.chunks(batch_size) {
            let rows: Vec<Row> = chunk
                .iter()
                .map(|&i| Row {
                    context: context_of(corpus, i),
                    sentence: corpus.sentences[i].clone(),
                    weight: 1.0,
                })
                .collect();
            let (loss, _) = weighted_update(gen, &mut adam, rows)?;
            nll += loss * chunk.len() as f64;
            tokens += chunk.iter().map(|&i| corpus.sentences[i].len() + 1).sum::<usize>();
        }
        out.push(EpochStats {
            loss: nll / corpus.len() as f64,
            perplexity: (nll / tokens as f64).exp(),
        });
    }
    Ok(out)
}

/// Draws fake sentences for the rows `idx` of `corpus`.
fn sample_fakes(
    gen: &Generator,
    corpus: &Corpus,
    idx: &[usize],
    max_length: usize,
    rng: &mut RunRng,
) -> Result<(Option<Vec<Sentence>>, Vec<Sentence>)> {
    let ctx: Option<Vec<Sentence>> = corpus
        .contexts
        .as_ref()
        .filter(|_| gen.config.conditional)
        .map(|c| idx.iter().map(|&i| c[i].clone()).collect());
    let fakes = gen.sample(idx.len(), max_length, ctx.as_deref(), rng)?;
    Ok((ctx, fakes))
}

fn discriminator_update(
    disc: &mut Discriminator,
    adam: &mut Adam,
    real: &SentenceBatch,
    fake: &SentenceBatch,
) -> Result<f64> {
    let mut tape = Tape::new();
    let r = disc.score_var(&mut tape, real)?;
    let f = disc.score_var(&mut tape, fake)?;
    let loss = discriminator_loss_var(&mut tape, r, f)?;
    let value = tape.value(loss).item();
    disc.params.zero_grad();
    tape.backward(loss, &mut disc.params)?;
    adam.step(&mut disc.params)?;
    Ok(value)
}

fn real_batch(corpus: &Corpus, idx: &[usize], conditional: bool) -> Result<SentenceBatch> {
    let xs = idx.iter().map(|&i| corpus.sentences[i].clone()).collect();
    let ctx = conditional.then(|| idx.iter().map(|&i| context_of(corpus, i).unwrap_or_default()).collect());
    make_batch(ctx, xs)
}

/// Least-squares training against samples of `gen`; returns per-epoch mean
/// losses.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_discriminator(
    disc: &mut Discriminator,
    gen: &Generator,
    corpus: &Corpus,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    max_length: usize,
    rng: &mut RunRng,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut adam = Adam::new(lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut out = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let real = real_batch(corpus, chunk, gen.config.conditional)?;
            let (ctx, fakes) = sample_fakes(gen, corpus, chunk, max_length, rng)?;
            let fake = make_batch(ctx, fakes)?;
            total += discriminator_update(disc, &mut adam, &real, &fake)?;
            batches += 1;
        }
        out.push(total / batches as f64);
    }
    Ok(out)
}

/// Models after Alg. 1 lines 1 to 3.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub generator: Generator,
    pub discriminator: Option<Discriminator>,
    pub g_losses: Vec<EpochStats>,
    pub d_losses: Vec<f64>,
}

/// Pretrains the generator and, when the trainer uses one, the discriminator.
pub fn pretrain(config: &TrainingConfig, data: &TrainData) -> Result<Pretrained> {
    config.validate()?;
    let v = data.vocab_size();
    let seed = config.seed;
    let mut gen = Generator::new(config.generator_config(v), &mut rng::stream(seed, rng::MODEL_INIT))?;
    let g_epochs = config.pretrain_g_epochs.unwrap_or_else(|| scaled_epochs(50, &data.train));
    let mut shuffle = rng::indexed_stream(seed, rng::DATA_SHUFFLE, 0);
    let g_losses = pretrain_generator(&mut gen, &data.train, g_epochs, config.batch_size, config.lr_g, &mut shuffle)?;
    let (discriminator, d_losses) = if !config.trainer.uses_discriminator() {
        (None, Vec::new())
    } else if config.freeze_discriminator {
        (Some(Discriminator::zeros(config.discriminator_config(v))?), Vec::new())
    } else {
        let mut d = Discriminator::new(config.discriminator_config(v), &mut rng::stream(seed, rng::DISC_INIT))?;
        let d_epochs = config.pretrain_d_epochs.unwrap_or_else(|| scaled_epochs(15, &data.train));
        let mut r = rng::indexed_stream(seed, rng::DISC_DATA, 0);
        let losses = pretrain_discriminator(
            &mut d,
            &gen,
            &data.train,
            d_epochs,
            config.batch_size,
            config.lr_d,
            data.max_length(config),
            &mut r,
        )?;
        (Some(d), losses)
    };
    Ok(Pretrained {
        generator: gen,
        discriminator,
        g_losses,
        d_losses,
    })
}

/// Pretrains, then runs the adversarial (or plain) phase.
pub fn train(config: &TrainingConfig, data: &TrainData) -> Result<TrainRun> {
    let pre = pretrain(config, data)?;
    train_from(config, data, pre, &mut |_, _, _| Ok(()))
}

pub fn araml_train(config: &TrainingConfig, data: &TrainData) -> Result<TrainRun> {
    train(&TrainingConfig { trainer: TrainerKind::Araml, ..config.clone() }, data)
}

pub fn raml_static_train(config: &TrainingConfig, data: &TrainData) -> Result<TrainRun> {
    train(&TrainingConfig { trainer: TrainerKind::Raml, ..config.clone() }, data)
}

pub fn maligan_train(config: &TrainingConfig, data: &TrainData) -> Result<TrainRun> {
    train(&TrainingConfig { trainer: TrainerKind::Maligan, ..config.clone() }, data)
}

pub fn policy_gradient_train(config: &TrainingConfig, data: &TrainData) -> Result<TrainRun> {
    train(&TrainingConfig { trainer: TrainerKind::PolicyGradient, ..config.clone() }, data)
}

/// Trains each seed independently, in parallel.
pub fn train_seeds(config: &TrainingConfig, data: &TrainData, seeds: &[u64]) -> Vec<Result<TrainRun>> {
    seeds
        .par_iter()
        .map(|&seed| train(&TrainingConfig { seed, ..config.clone() }, data))
        .collect()
}

/// Called after every evaluation point with the new record and the models.
pub type Observer<'a> = dyn FnMut(&Record, &Generator, Option<&Discriminator>) -> Result<()> + 'a;

struct Loop<'a> {
    config: &'a TrainingConfig,
    data: &'a TrainData,
    max_length: usize,
    gen: Generator,
    disc: Option<Discriminator>,
    adam_g: Adam,
    adam_d: Adam,
    batch_rng: RunRng,
    sampler_rng: RunRng,
    disc_rng: RunRng,
    gen_rng: RunRng,
    sampler: Option<Sampler<'a>>,
    pool: Option<Vec<Vec<Sentence>>>,
    stats: Instrumentation,
    warnings: Vec<String>,
}

impl<'a> Loop<'a> {
    fn draw_indices(&mut self) -> Vec<usize> {
        let n = self.data.train.len();
        (0..self.config.batch_size).map(|_| self.batch_rng.random_range(0..n)).collect()
    }

    fn perturbations(&mut self, i: usize) -> Result<Vec<Sentence>> {
        if let Some(pool) = &self.pool {
            return Ok(pool[i].clone());
        }
        let x = &self.data.train.sentences[i];
        let sampler = self.sampler.as_mut().expect("sampler present for augmenting trainers");
        (0..sampler.config().samples_per_datum)
            .map(|_| Ok(sampler.sample(i, x, &mut self.sampler_rng)?.perturbed))
            .collect()
    }

    fn scores(&self, rows: &[Row]) -> Result<Vec<f64>> {
        let disc = self.disc.as_ref().expect("discriminator present");
        let (ctx, xs, _) = split_rows(
            rows.iter()
                .map(|r| Row { context: r.context.clone(), sentence: r.sentence.clone(), weight: 1.0 })
                .collect(),
            self.config.conditional,
        );
        disc.score(&make_batch(ctx, xs)?)
    }

    fn generator_step(&mut self) -> Result<f64> {
        let kind = self.config.trainer;
        let idx = self.draw_indices();
        let train = &self.data.train;
        let (loss, err) = match kind {
            TrainerKind::Mle => {
                let rows = idx
                    .iter()
                    .map(|&i| Row { context: context_of(train, i), sentence: train.sentences[i].clone(), weight: 1.0 })
                    .collect();
                weighted_update(&mut self.gen, &mut self.adam_g, rows)?
            }
            TrainerKind::Raml | TrainerKind::Araml => {
                let mut rows = Vec::new();
                for &i in &idx {
                    for x in self.perturbations(i)? {
                        rows.push(Row { context: context_of(train, i), sentence: x, weight: 1.0 });
                    }
                }
                if kind == TrainerKind::Araml {
                    let w = araml_weights_unnormalized(&self.scores(&rows)?);
                    rows.iter_mut().zip(w).for_each(|(r, w)| r.weight = w);
                }
                weighted_update(&mut self.gen, &mut self.adam_g, rows)?
            }
            TrainerKind::Maligan => {
                return Err(Error::contract("MaliGAN steps run through maligan_iteration"));
            }
            TrainerKind::PolicyGradient => {
                let (ctx, xs) = sample_fakes(&self.gen, train, &idx, self.max_length, &mut self.gen_rng)?;
                self.stats.generator_samples_for_g += xs.len() as u64;
                let batch = make_batch(ctx, xs)?;
                let rewards = self.disc.as_ref().expect("discriminator present").score(&batch)?;
                let mut tape = Tape::new();
                let lp = self.gen.log_prob_var(&mut tape, &batch)?;
                let loss = policy_gradient_loss_var(&mut tape, lp, &rewards)?;
                let value = tape.value(loss).item();
                self.gen.params.zero_grad();
                tape.backward(loss, &mut self.gen.params)?;
                self.adam_g.step(&mut self.gen.params)?;
                (value, 0.0)
            }
        };
        self.stats.g_updates += 1;
        self.stats.max_weight_sum_error = self.stats.max_weight_sum_error.max(err);
        Ok(loss)
    }

    /// All generator steps of one MaliGAN iteration sample from a snapshot
    /// taken at its start.
    fn maligan_iteration(&mut self) -> Result<f64> {
        let snapshot = self.gen.clone();
        let before = snapshot.params.checksum();
        let mut last = 0.0;
        for _ in 0..self.config.g_steps {
            let idx = self.draw_indices();
            let (ctx, xs) = sample_fakes(&snapshot, &self.data.train, &idx, self.max_length, &mut self.gen_rng)?;
            self.stats.generator_samples_for_g += xs.len() as u64;
            let mut rows: Vec<Row> = match &ctx {
                Some(c) => c.iter().cloned().zip(xs).map(|(c, x)| Row { context: Some(c), sentence: x, weight: 1.0 }).collect(),
                None => xs.into_iter().map(|x| Row { context: None, sentence: x, weight: 1.0 }).collect(),
            };
            let scores = self.scores(&rows)?;
            if scores.iter().all(|&s| s == scores[0]) && self.warnings.is_empty() {
                self.warnings.push(
                    "constant discriminator scores: MaliGAN reduces to maximum likelihood on its own samples".into(),
                );
            }
            let w = maligan_weights(&scores)?;
            rows.iter_mut().zip(w).for_each(|(r, w)| r.weight = w);
            let (loss, err) = weighted_update(&mut self.gen, &mut self.adam_g, rows)?;
            self.stats.g_updates += 1;
            self.stats.max_weight_sum_error = self.stats.max_weight_sum_error.max(err);
            last = loss;
        }
        self.stats.snapshot_checks += 1;
        if snapshot.params.checksum() != before {
            self.stats.snapshot_mismatches += 1;
        }
        Ok(last)
    }

    fn discriminator_step(&mut self) -> Result<Option<f64>> {
        if self.config.freeze_discriminator || !self.config.trainer.uses_discriminator() {
            return Ok(None);
        }
        let n = self.data.train.len();
        let idx: Vec<usize> = (0..self.config.batch_size).map(|_| self.disc_rng.random_range(0..n)).collect();
        let real = real_batch(&self.data.train, &idx, self.config.conditional)?;
        let (ctx, fakes) = sample_fakes(&self.gen, &self.data.train, &idx, self.max_length, &mut self.gen_rng)?;
        self.stats.generator_samples_for_d += fakes.len() as u64;
        let fake = make_batch(ctx, fakes)?;
        let disc = self.disc.as_mut().expect("discriminator present");
        let loss = discriminator_update(disc, &mut self.adam_d, &real, &fake)?;
        self.stats.d_updates += 1;
        Ok(Some(loss))
    }

    fn evaluate(&self, iteration: usize) -> Result<MetricReport> {
        let mut r = rng::indexed_stream(self.config.seed, rng::EVAL, iteration as u64);
        let n = self.config.eval_samples;
        let test = &self.data.test;
        let ctx: Option<Vec<Sentence>> = test
            .contexts
            .as_ref()
            .filter(|_| self.config.conditional)
            .map(|c| (0..n).map(|i| c[i % c.len()].clone()).collect());
        let generated = self.gen.sample(n, self.max_length, ctx.as_deref(), &mut r)?;
        MetricReport::compute(
            &self.data.lm,
            &test.sentences,
            &generated,
            self.config.bleu_samples,
            self.config.seed,
            iteration,
        )
    }
}

/// `exp(D − max D)`: equal scores give exactly equal unit weights.
fn araml_weights_unnormalized(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().map(|s| (s - max).exp()).collect()
}

/// Runs the post-pretraining phase from given models.
pub fn train_from(
    config: &TrainingConfig,
    data: &TrainData,
    pre: Pretrained,
    observer: &mut Observer<'_>,
) -> Result<TrainRun> {
    config.validate()?;
    if config.trainer.uses_discriminator() && pre.discriminator.is_none() {
        return Err(Error::contract("trainer needs a pretrained discriminator"));
    }
    let seed = config.seed;
    let disc = if config.trainer.uses_discriminator() {
        if config.freeze_discriminator {
            Some(Discriminator::zeros(config.discriminator_config(data.vocab_size()))?)
        } else {
            pre.discriminator
        }
    } else {
        None
    };
    let sampler = if config.trainer.uses_sampler() {
        Some(Sampler::new(config.sampler.clone(), data.vocab_size(), Some(&data.lm))?)
    } else {
        None
    };
    let mut lp = Loop {
        config,
        data,
        max_length: data.max_length(config),
        gen: pre.generator,
        disc,
        adam_g: Adam::new(config.lr_g),
        adam_d: Adam::new(config.lr_d),
        batch_rng: rng::indexed_stream(seed, rng::DATA_SHUFFLE, 1),
        sampler_rng: rng::stream(seed, rng::SAMPLER),
        disc_rng: rng::indexed_stream(seed, rng::DISC_DATA, 1),
        gen_rng: rng::stream(seed, rng::GEN_SAMPLE),
        sampler,
        pool: None,
        stats: Instrumentation::default(),
        warnings: Vec::new(),
    };
    if config.freeze_augmentation && config.trainer.uses_sampler() {
        let pool = (0..data.train.len()).map(|i| lp.perturbations(i)).collect::<Result<Vec<_>>>()?;
        lp.pool = Some(pool);
    }

    let start = Instant::now();
    let mut records = Vec::new();
    let mut failure = None;
    let g0 = pre.g_losses.last().map_or(0.0, |e| e.loss);
    let d0 = pre.d_losses.last().copied().unwrap_or(0.0);
    let every = config.eval_interval();
    let mut g_loss = g0;
    let mut d_loss = d0;

    let mut record = |lp: &Loop, iteration: usize, g: f64, d: f64, records: &mut Vec<Record>| -> Result<()> {
        let metrics = lp.evaluate(iteration)?;
        let rec = Record {
            iteration,
            g_loss: g,
            d_loss: d,
            metrics,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        observer(&rec, &lp.gen, lp.disc.as_ref())?;
        records.push(rec);
        Ok(())
    };

    let mut outcome = record(&lp, 0, g0, d0, &mut records);
    for s in 1..=config.iterations {
        if outcome.is_err() {
            break;
        }
        outcome = (|| -> Result<()> {
            g_loss = if config.trainer == TrainerKind::Maligan {
                lp.maligan_iteration()?
            } else {
                let mut last = g_loss;
                for _ in 0..config.g_steps {
                    last = lp.generator_step()?;
                }
                last
            };
            if !g_loss.is_finite() {
                return Err(Error::NonFinite { op: "generator loss" });
            }
            for _ in 0..config.d_steps {
                if let Some(l) = lp.discriminator_step()? {
                    d_loss = l;
                }
            }
            if !d_loss.is_finite() {
                return Err(Error::NonFinite { op: "discriminator loss" });
            }
            if s % every == 0 || s == config.iterations {
                record(&lp, s, g_loss, d_loss, &mut records)?;
            }
            Ok(())
        })()
        .map_err(|e| {
            if e.is_numeric() {
                failure = Some(Failure { iteration: s, stage: "adversarial", message: e.to_string() });
            }
            e
        });
    }
    match outcome {
        Err(e) if !e.is_numeric() => return Err(e),
        Err(e) if failure.is_none() => {
            failure = Some(Failure { iteration: 0, stage: "evaluation", message: e.to_string() });
        }
        _ => {}
    }
    Ok(TrainRun {
        config: config.clone(),
        records,
        generator: lp.gen,
        discriminator: lp.disc,
        pretrain_g_losses: pre.g_losses,
        pretrain_d_losses: pre.d_losses,
        stats: lp.stats,
        failure,
        warnings: lp.warnings,
    })
}
