// SPDX-License-Identifier: Apache-2.0

//! Python bindings. Sentences are lists of token ids; ids below
//! `NUM_SPECIAL` are reserved and `vocab_size` counts them.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use araml_core::corpus::{Corpus, Sentence, TokenId, Vocabulary, END, NUM_SPECIAL, PAD, SEP, START};
use araml_core::hmm::{generate_hmm_corpus, HmmOracle};
use araml_core::metrics::{self, LmSettings};
use araml_core::models;
use araml_core::ngram::NGramLm;
use araml_core::rng;
use araml_core::sampler::{self, SamplerConfig, Strategy};
use araml_core::trainers::{self, TrainData, TrainingConfig};
use araml_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        _ if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for araml_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn sentences(tokens: Vec<Vec<TokenId>>) -> Vec<Sentence> {
    tokens.into_iter().map(Sentence).collect()
}

fn lists(s: Vec<Sentence>) -> Vec<Vec<TokenId>> {
    s.into_iter().map(|s| s.0).collect()
}

fn corpus(tokens: Vec<Vec<TokenId>>, contexts: Option<Vec<Vec<TokenId>>>, vocab_size: usize) -> PyResult<Corpus> {
    if vocab_size <= NUM_SPECIAL {
        return Err(PyValueError::new_err("vocab_size must exceed the number of special tokens"));
    }
    let vocab = Vocabulary::synthetic(vocab_size - NUM_SPECIAL);
    match contexts {
        Some(c) => Corpus::paired(sentences(c), sentences(tokens), vocab),
        None => Corpus::new(sentences(tokens), vocab),
    }
    .py()
}

/// Log number of sentences at Hamming distance `e` from a length-`m` sentence.
#[pyfunction]
fn count_sentences(e: usize, m: usize, content_vocab: usize) -> PyResult<f64> {
    sampler::count_sentences(e, m, content_vocab).py()
}

/// `P(d = e)` for `e = 0 .. min(m, cap)`.
#[pyfunction]
#[pyo3(signature = (m, content_vocab, tau, cap = None))]
fn edit_distance_distribution(m: usize, content_vocab: usize, tau: f64, cap: Option<usize>) -> PyResult<Vec<f64>> {
    Ok(sampler::EditDistanceDistribution::new(m, content_vocab, tau, cap).py()?.probs().to_vec())
}

#[pyfunction]
#[pyo3(signature = (corpus, max_n = 4))]
fn self_bleu(corpus: Vec<Vec<TokenId>>, max_n: usize) -> PyResult<Vec<f64>> {
    metrics::self_bleu(&sentences(corpus), max_n).py()
}

#[pyfunction]
#[pyo3(signature = (real_train, generated, vocab_size, order = 3, k = 0.1))]
fn forward_perplexity(
    real_train: Vec<Vec<TokenId>>,
    generated: Vec<Vec<TokenId>>,
    vocab_size: usize,
    order: usize,
    k: f64,
) -> PyResult<f64> {
    metrics::forward_perplexity(&sentences(real_train), &sentences(generated), LmSettings { order, k, vocab_size }).py()
}

#[pyfunction]
#[pyo3(signature = (real_test, generated, vocab_size, order = 3, k = 0.1))]
fn reverse_perplexity(
    real_test: Vec<Vec<TokenId>>,
    generated: Vec<Vec<TokenId>>,
    vocab_size: usize,
    order: usize,
    k: f64,
) -> PyResult<f64> {
    metrics::reverse_perplexity(&sentences(real_test), &sentences(generated), LmSettings { order, k, vocab_size }).py()
}

/// Add-k smoothed n-gram language model.
#[pyclass(name = "NGramLM", module = "araml", frozen, from_py_object)]
#[derive(Clone)]
struct PyNGramLm {
    inner: NGramLm,
}

#[pymethods]
impl PyNGramLm {
    #[new]
    #[pyo3(signature = (corpus, vocab_size, order = 3, k = 0.1))]
    fn new(corpus: Vec<Vec<TokenId>>, vocab_size: usize, order: usize, k: f64) -> PyResult<Self> {
        Ok(PyNGramLm { inner: NGramLm::train(&sentences(corpus), order, k, vocab_size).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNGramLm { inner: NGramLm::load(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn prob(&self, history: Vec<TokenId>, word: TokenId) -> f64 {
        self.inner.prob(&history, word)
    }

    fn perplexity(&self, corpus: Vec<Vec<TokenId>>) -> PyResult<f64> {
        self.inner.perplexity(&sentences(corpus)).py()
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
}

/// Draws perturbed copies of sentences.
#[pyclass(name = "Sampler", module = "araml", frozen)]
struct PySampler {
    config: SamplerConfig,
    vocab_size: usize,
    lm: Option<NGramLm>,
}

type Perturbation = (Vec<TokenId>, usize, Vec<usize>);

impl PySampler {
    fn draw(&self, items: &[Sentence], seed: u64) -> PyResult<Vec<Vec<Perturbation>>> {
        let mut s = sampler::Sampler::new(self.config.clone(), self.vocab_size, self.lm.as_ref()).py()?;
        let mut r = rng::stream(seed, rng::SAMPLER);
        items
            .iter()
            .enumerate()
            .map(|(i, x)| {
                (0..self.config.samples_per_datum)
                    .map(|_| s.sample(i, x, &mut r).map(|a| (a.perturbed.0, a.distance, a.positions)))
                    .collect::<araml_core::Result<Vec<_>>>()
                    .py()
            })
            .collect()
    }
}

#[pymethods]
impl PySampler {
    #[new]
    #[pyo3(signature = (vocab_size, tau = 0.85, strategy = "constrained", k = 5, max_edit_cap = None, lm = None))]
    fn new(
        vocab_size: usize,
        tau: f64,
        strategy: &str,
        k: usize,
        max_edit_cap: Option<usize>,
        lm: Option<PyNGramLm>,
    ) -> PyResult<Self> {
        let strategy: Strategy = strategy.parse().py()?;
        let config = SamplerConfig { tau, strategy, samples_per_datum: k, max_edit_cap };
        let lm = lm.map(|l| l.inner);
        sampler::Sampler::new(config.clone(), vocab_size, lm.as_ref()).py()?;
        Ok(PySampler { config, vocab_size, lm })
    }

    /// `k` draws of `(perturbed, distance, positions)` for one sentence.
    #[pyo3(signature = (sentence, seed = 1))]
    fn sample(&self, sentence: Vec<TokenId>, seed: u64) -> PyResult<Vec<Perturbation>> {
        Ok(self.draw(&[Sentence(sentence)], seed)?.remove(0))
    }

    /// `k` draws per sentence, flattened in corpus order.
    #[pyo3(signature = (corpus, seed = 1))]
    fn augment(&self, corpus: Vec<Vec<TokenId>>, seed: u64) -> PyResult<Vec<Perturbation>> {
        Ok(self.draw(&sentences(corpus), seed)?.into_iter().flatten().collect())
    }
}

/// Random hidden Markov model with exact likelihoods.
#[pyclass(name = "HmmOracle", module = "araml", frozen)]
struct PyHmm {
    inner: HmmOracle,
}

#[pymethods]
impl PyHmm {
    #[staticmethod]
    #[pyo3(signature = (states, symbols, mean_length = 7.0, seed = 7))]
    fn random(states: usize, symbols: usize, mean_length: f64, seed: u64) -> PyResult<Self> {
        Ok(PyHmm { inner: HmmOracle::random(states, symbols, mean_length, seed).py()? })
    }

    /// Total vocabulary size including the special tokens.
    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.num_symbols() + NUM_SPECIAL
    }

    #[pyo3(signature = (count, max_length = 12, seed = 1))]
    fn corpus(&self, count: usize, max_length: usize, seed: u64) -> PyResult<Vec<Vec<TokenId>>> {
        Ok(lists(generate_hmm_corpus(&self.inner, count, max_length, seed).py()?.sentences))
    }

    fn log_prob(&self, sentence: Vec<TokenId>) -> PyResult<f64> {
        self.inner.log_prob(&Sentence(sentence)).py()
    }
}

/// Recurrent sequence generator.
#[pyclass(name = "Generator", module = "araml", frozen)]
struct PyGenerator {
    inner: models::Generator,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (vocab_size, embed_dim = 32, hidden_dim = 32, layers = 1, conditional = false, seed = 1))]
    fn new(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        layers: usize,
        conditional: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = models::GeneratorConfig { vocab_size, embed_dim, hidden_dim, layers, conditional };
        let inner = models::Generator::new(config, &mut rng::stream(seed, rng::MODEL_INIT)).py()?;
        Ok(PyGenerator { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, BTreeMap<String, String>)> {
        let (inner, meta) = models::Generator::load(&path).py()?;
        Ok((PyGenerator { inner }, meta))
    }

    #[pyo3(signature = (path, meta = None))]
    fn save(&self, path: PathBuf, meta: Option<BTreeMap<String, String>>) -> PyResult<()> {
        self.inner.save(&path, &meta.unwrap_or_default()).py()
    }

    /// Sentence log-probabilities, including the end token.
    #[pyo3(signature = (sentences, contexts = None))]
    fn log_prob(&self, sentences: Vec<Vec<TokenId>>, contexts: Option<Vec<Vec<TokenId>>>) -> PyResult<Vec<f64>> {
        let responses = self::sentences(sentences);
        let batch = match contexts {
            Some(c) => models::SentenceBatch::with_contexts(self::sentences(c), responses),
            None => models::SentenceBatch::new(responses),
        }
        .py()?;
        self.inner.log_prob(&batch).py()
    }

    #[pyo3(signature = (count, max_length, seed = 1, contexts = None))]
    fn sample(
        &self,
        count: usize,
        max_length: usize,
        seed: u64,
        contexts: Option<Vec<Vec<TokenId>>>,
    ) -> PyResult<Vec<Vec<TokenId>>> {
        let ctx = contexts.map(sentences);
        let mut r = rng::stream(seed, rng::GEN_SAMPLE);
        Ok(lists(self.inner.sample(count, max_length, ctx.as_deref(), &mut r).py()?))
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }
}

/// Finished training run.
#[pyclass(name = "TrainRun", module = "araml", frozen)]
struct PyTrainRun {
    inner: trainers::TrainRun,
}

#[pymethods]
impl PyTrainRun {
    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    /// One dict per evaluation point.
    fn records(&self) -> Vec<HashMap<&'static str, f64>> {
        self.inner
            .records
            .iter()
            .map(|r| {
                let mut m: HashMap<&'static str, f64> =
                    metrics::METRICS.iter().map(|&k| (k, metrics::metric_value(r, k).unwrap())).collect();
                m.insert("iter", r.iteration as f64);
                m
            })
            .collect()
    }

    /// Resolved configuration as `key -> value` strings.
    fn config(&self) -> BTreeMap<String, String> {
        self.inner.config.to_pairs().into_iter().collect()
    }

    #[getter]
    fn generator(&self) -> PyGenerator {
        PyGenerator { inner: self.inner.generator.clone() }
    }

    #[getter]
    fn failure(&self) -> Option<String> {
        self.inner.failure.as_ref().map(|f| format!("iteration {} ({}): {}", f.iteration, f.stage, f.message))
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }
}

/// Trains one run. `config` holds `key -> value` settings as accepted by
/// the CLI's config files (values may be str, int, float or bool).
#[pyfunction]
#[pyo3(signature = (train, test, vocab_size, config = None, train_contexts = None, test_contexts = None))]
fn train(
    py: Python<'_>,
    train: Vec<Vec<TokenId>>,
    test: Vec<Vec<TokenId>>,
    vocab_size: usize,
    config: Option<BTreeMap<String, Bound<'_, PyAny>>>,
    train_contexts: Option<Vec<Vec<TokenId>>>,
    test_contexts: Option<Vec<Vec<TokenId>>>,
) -> PyResult<PyTrainRun> {
    let mut cfg = TrainingConfig { conditional: train_contexts.is_some(), ..TrainingConfig::default() };
    for (k, v) in config.unwrap_or_default() {
        let text = if v.is_instance_of::<pyo3::types::PyBool>() {
            v.extract::<bool>()?.to_string()
        } else {
            v.str()?.to_string()
        };
        cfg.set(&k, &text).py()?;
    }
    let train = corpus(train, train_contexts, vocab_size)?;
    let test = corpus(test, test_contexts, vocab_size)?;
    let data = TrainData::new(train, test, &cfg).py()?;
    let run = py.detach(|| trainers::train(&cfg, &data)).py()?;
    Ok(PyTrainRun { inner: run })
}

/// Cross-seed stability CSV for runs differing only in their seed.
#[pyfunction]
fn stability_csv(runs: Vec<PyRef<'_, PyTrainRun>>) -> PyResult<String> {
    let runs: Vec<trainers::TrainRun> = runs.iter().map(|r| r.inner.clone()).collect();
    Ok(metrics::stability_stats(&runs).py()?.to_csv())
}

#[pymodule]
fn araml(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PAD", PAD)?;
    m.add("START", START)?;
    m.add("END", END)?;
    m.add("SEP", SEP)?;
    m.add("NUM_SPECIAL", NUM_SPECIAL)?;
    m.add("RUN_HEADER", trainers::RUN_HEADER)?;
    m.add("STABILITY_HEADER", metrics::STABILITY_HEADER)?;
    m.add_function(wrap_pyfunction!(count_sentences, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(forward_perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(reverse_perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(stability_csv, m)?)?;
    m.add_class::<PyNGramLm>()?;
    m.add_class::<PySampler>()?;
    m.add_class::<PyHmm>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyTrainRun>()?;
    Ok(())
}
