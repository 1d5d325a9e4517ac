// SPDX-License-Identifier: Apache-2.0

//! Stationary perturbation distribution around real sentences.
//!
//! A perturbed sentence is drawn in three stages: an edit distance `d`
//! from the exponentially damped count distribution, a uniformly random
//! set of `d` positions, then left-to-right substitution of a new word at
//! each position. The new word always differs from the current one, so the
//! Hamming distance to the original is exactly `d`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::corpus::{is_special, Corpus, Sentence, TokenId, Vocabulary, END, NUM_SPECIAL, START};
use crate::error::{Error, Result};
use crate::ngram::NGramLm;
use crate::rng::categorical;

/// `ln[C(m, e) · (V-1)^e]`, the log number of sentences at Hamming
/// distance `e` from a length-`m` sentence over `vocab_size` words.
pub fn count_sentences(e: usize, m: usize, vocab_size: usize) -> Result<f64> {
    if e > m {
        return Err(Error::contract(format!("edit distance {e} exceeds length {m}")));
    }
    if vocab_size < 2 {
        return Err(Error::contract("vocabulary must have at least two words"));
    }
    Ok(ln_binomial(m, e) + e as f64 * ((vocab_size - 1) as f64).ln())
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `P(d = e) ∝ exp(-e/τ) · c(e, m)` for `e = 0 … min(m, cap)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EditDistanceDistribution {
    pub length: usize,
    pub vocab_size: usize,
    probs: Vec<f64>,
}

impl EditDistanceDistribution {
    pub fn new(length: usize, vocab_size: usize, tau: f64, cap: Option<usize>) -> Result<Self> {
        if length == 0 {
            return Err(Error::contract("sentence length must be at least 1"));
        }
        if !(tau > 0.0) {
            return Err(Error::contract(format!("temperature must be > 0, got {tau}")));
        }
        let top = cap.map_or(length, |c| c.min(length));
        let logits: Vec<f64> = if vocab_size < 2 {
            // Nothing to substitute with.
            (0..=top).map(|e| if e == 0 { 0.0 } else { f64::NEG_INFINITY }).collect()
        } else {
            (0..=top)
                .map(|e| count_sentences(e, length, vocab_size).map(|c| c - e as f64 / tau))
                .collect::<Result<_>>()?
        };
        let lse = log_sum_exp(&logits);
        let probs = logits.iter().map(|l| (l - lse).exp()).collect();
        Ok(EditDistanceDistribution {
            length,
            vocab_size,
            probs,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn expectation(&self) -> f64 {
        self.probs.iter().enumerate().map(|(e, p)| e as f64 * p).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        categorical(rng, &self.probs)
    }
}

/// Uniformly random `d`-subset of `0..m`, ascending.
pub fn sample_positions<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Result<Vec<usize>> {
    if d > m {
        return Err(Error::contract(format!("cannot choose {d} positions out of {m}")));
    }
    let mut p = index::sample(rng, m, d).into_vec();
    p.sort_unstable();
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// New word uniform over the content vocabulary minus the current word.
    Random,
    /// New word drawn from the language model's two-sided slot score.
    Constrained,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Constrained => "constrained",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "constrained" => Ok(Strategy::Constrained),
            other => Err(Error::input(format!("unknown sampling strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub tau: f64,
    pub strategy: Strategy,
    pub samples_per_datum: usize,
    pub max_edit_cap: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            tau: 0.85,
            strategy: Strategy::Constrained,
            samples_per_datum: 5,
            max_edit_cap: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::contract(format!("temperature must be > 0, got {}", self.tau)));
        }
        if self.samples_per_datum == 0 {
            return Err(Error::contract("samples per datum must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    /// Index of the source sentence in the corpus that was augmented.
    pub source: usize,
    pub original: Sentence,
    pub perturbed: Sentence,
    pub distance: usize,
    pub positions: Vec<usize>,
    pub strategy: Strategy,
}

/// Sequentially replaces the words at `positions` (ascending); each draw
/// conditions on the sentence as already modified.
pub fn substitute_words<R: Rng + ?Sized>(
    x: &Sentence,
    positions: &[usize],
    strategy: Strategy,
    vocab_size: usize,
    lm: Option<&NGramLm>,
    rng: &mut R,
) -> Result<Sentence> {
    if vocab_size < NUM_SPECIAL + 2 && !positions.is_empty() {
        return Err(Error::contract("substitution needs at least two content words"));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("positions must be strictly ascending"));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= x.len()) {
        return Err(Error::contract(format!("position {p} out of range for length {}", x.len())));
    }
    let lm = match (strategy, lm) {
        (Strategy::Constrained, None) => {
            return Err(Error::contract("constrained sampling requires a language model"))
        }
        (Strategy::Constrained, Some(lm)) => {
            if lm.vocab_size() != vocab_size {
                return Err(Error::contract("language model vocabulary size mismatch"));
            }
            Some(lm)
        }
        (Strategy::Random, _) => None,
    };
    let mut out = x.0.clone();
    for &p in positions {
        let current = out[p];
        if is_special(current) {
            return Err(Error::contract(format!("position {p} holds a special token")));
        }
        let new = match lm {
            None => {
                // Uniform over content ids other than `current`.
                let k = rng.random_range(0..vocab_size - NUM_SPECIAL - 1);
                let cand = (NUM_SPECIAL + k) as TokenId;
                if cand >= current {
                    cand + 1
                } else {
                    cand
                }
            }
            Some(lm) => {
                let mut left = vec![START; lm.order() - 1];
                left.extend_from_slice(&out[..p]);
                let mut right = out[p + 1..].to_vec();
                right.push(END);
                let mut w = lm.word_distribution(&left, &right);
                w[..NUM_SPECIAL].iter_mut().for_each(|v| *v = 0.0);
                w[current as usize] = 0.0;
                categorical(rng, &w) as TokenId
            }
        };
        out[p] = new;
    }
    Ok(Sentence(out))
}

/// Draws from the full perturbation distribution.
pub struct Sampler<'a> {
    config: SamplerConfig,
    vocab_size: usize,
    lm: Option<&'a NGramLm>,
    by_length: HashMap<usize, EditDistanceDistribution>,
}

impl<'a> Sampler<'a> {
    pub fn new(config: SamplerConfig, vocab_size: usize, lm: Option<&'a NGramLm>) -> Result<Self> {
        config.validate()?;
        if config.strategy == Strategy::Constrained && lm.is_none() {
            return Err(Error::contract("constrained sampling requires a language model"));
        }
        if vocab_size <= NUM_SPECIAL {
            return Err(Error::contract("vocabulary has no content words"));
        }
        Ok(Sampler {
            config,
            vocab_size,
            lm,
            by_length: HashMap::new(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn distance_distribution(&mut self, m: usize) -> Result<&EditDistanceDistribution> {
        if !self.by_length.contains_key(&m) {
            let d = EditDistanceDistribution::new(
                m,
                self.vocab_size - NUM_SPECIAL,
                self.config.tau,
                self.config.max_edit_cap,
            )?;
            self.by_length.insert(m, d);
        }
        Ok(&self.by_length[&m])
    }

    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        source: usize,
        x: &Sentence,
        rng: &mut R,
    ) -> Result<AugmentedSample> {
        let strategy = self.config.strategy;
        if x.is_empty() {
            return Ok(AugmentedSample {
                source,
                original: x.clone(),
                perturbed: x.clone(),
                distance: 0,
                positions: Vec::new(),
                strategy,
            });
        }
        let d = self.distance_distribution(x.len())?.sample(rng);
        let positions = sample_positions(x.len(), d, rng)?;
        let perturbed = substitute_words(x, &positions, strategy, self.vocab_size, self.lm, rng)?;
        Ok(AugmentedSample {
            source,
            original: x.clone(),
            perturbed,
            distance: d,
            positions,
            strategy,
        })
    }

    /// `samples_per_datum` independent draws for each listed sentence.
    pub fn augment<R: Rng + ?Sized>(
        &mut self,
        sentences: &[(usize, &Sentence)],
        rng: &mut R,
    ) -> Result<Vec<AugmentedSample>> {
        let k = self.config.samples_per_datum;
        let mut out = Vec::with_capacity(sentences.len() * k);
        for &(source, s) in sentences {
            for _ in 0..k {
                out.push(self.sample(source, s, rng)?);
            }
        }
        Ok(out)
    }
}

/// Augments every sentence of `corpus`.
pub fn augment_corpus<R: Rng + ?Sized>(
    corpus: &Corpus,
    config: &SamplerConfig,
    lm: Option<&NGramLm>,
    rng: &mut R,
) -> Result<Vec<AugmentedSample>> {
    if corpus.is_empty() {
        return Err(Error::input("cannot augment an empty corpus"));
    }
    let mut sampler = Sampler::new(config.clone(), corpus.vocab.len(), lm)?;
    let items: Vec<(usize, &Sentence)> = corpus.sentences.iter().enumerate().collect();
    sampler.augment(&items, rng)
}

/// One line per sample: original, perturbed, distance, positions, all
/// tab separated; positions are 0-based and comma separated.
pub fn write_augmented(path: &Path, samples: &[AugmentedSample], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let pos: Vec<String> = s.positions.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            vocab.decode(&s.original),
            vocab.decode(&s.perturbed),
            s.distance,
            pos.join(",")
        );
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_augmented(path: &Path, vocab: &Vocabulary, strategy: Strategy) -> Result<Vec<AugmentedSample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |d: &str| Error::format("augmented corpus", format!("line {}: {d}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [orig, pert, dist, pos] = fields[..] else {
            return Err(bad("expected 4 fields"));
        };
        let original = vocab.encode(orig).ok_or_else(|| bad("unknown token"))?;
        let perturbed = vocab.encode(pert).ok_or_else(|| bad("unknown token"))?;
        let distance = dist.parse().map_err(|_| bad("bad distance"))?;
        let positions = if pos.is_empty() {
            Vec::new()
        } else {
            pos.split(',')
                .map(|p| p.parse().map_err(|_| bad("bad position")))
                .collect::<Result<_>>()?
        };
        out.push(AugmentedSample {
            source: n,
            original,
            perturbed,
            distance,
            positions,
            strategy,
        });
    }
    Ok(out)
}

/// Number of samples whose Hamming distance differs from the recorded
/// edit distance (or whose lengths disagree).
pub fn hamming_audit(samples: &[AugmentedSample]) -> usize {
    samples
        .iter()
        .filter(|s| s.original.hamming(&s.perturbed) != Some(s.distance) || s.positions.len() != s.distance)
        .count()
}
