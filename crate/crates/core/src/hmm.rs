// SPDX-License-Identifier: Apache-2.0

//! Hidden Markov model used as a synthetic data source with exact likelihoods.

use rand::Rng;

use crate::corpus::{Corpus, Sentence, TokenId, Vocabulary, NUM_SPECIAL};
use crate::error::{Error, Result};
use crate::rng::{self, categorical};

/// Emits one content token per state visit and stops after each emission
/// with a state-independent probability.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmOracle {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
    pub termination: f64,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!("{what} is not a probability row (sum {sum})")));
    }
    Ok(())
}

fn normalized(mut row: Vec<f64>) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
    row
}

impl HmmOracle {
    pub fn new(
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
        emission: Vec<Vec<f64>>,
        termination: f64,
    ) -> Result<Self> {
        let hmm = HmmOracle {
            initial,
            transition,
            emission,
            termination,
        };
        hmm.validate()?;
        Ok(hmm)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.initial.len();
        if s == 0 {
            return Err(Error::input("HMM needs at least one state"));
        }
        if self.transition.len() != s || self.emission.len() != s {
            return Err(Error::input("HMM matrices disagree on the state count"));
        }
        check_row(&self.initial, "initial distribution")?;
        let v = self.emission[0].len();
        if v == 0 {
            return Err(Error::input("HMM needs at least one emission symbol"));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != s {
                return Err(Error::input(format!("transition row {i} has wrong width")));
            }
            check_row(row, "transition row")?;
        }
        for row in &self.emission {
            if row.len() != v {
                return Err(Error::input("emission rows have unequal widths"));
            }
            check_row(row, "emission row")?;
        }
        if !(self.termination > 0.0 && self.termination <= 1.0) {
            return Err(Error::input(format!(
                "termination probability must lie in (0, 1], got {}",
                self.termination
            )));
        }
        Ok(())
    }

    /// Random peaked HMM: each row is a normalized vector of `u^4` draws,
    /// which concentrates mass on a few entries so the corpus has structure.
    pub fn random(states: usize, vocab: usize, mean_length: f64, seed: u64) -> Result<Self> {
        if states == 0 || vocab == 0 {
            return Err(Error::input("HMM needs states ≥ 1 and vocab ≥ 1"));
        }
        if !(mean_length >= 1.0) {
            return Err(Error::input("mean length must be at least 1"));
        }
        let mut r = rng::stream(seed, "hmm-oracle");
        let mut peaked = |n: usize| -> Vec<f64> {
            normalized((0..n).map(|_| r.random::<f64>().powi(4) + 1e-3).collect())
        };
        let initial = peaked(states);
        let transition = (0..states).map(|_| peaked(states)).collect();
        let emission = (0..states).map(|_| peaked(vocab)).collect();
        Self::new(initial, transition, emission, 1.0 / mean_length)
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn num_symbols(&self) -> usize {
        self.emission[0].len()
    }

    /// Unconditional draw; may be arbitrarily long.
    pub fn sample_unbounded<R: Rng + ?Sized>(&self, rng: &mut R) -> Sentence {
        let mut state = categorical(rng, &self.initial);
        let mut out = Vec::new();
        loop {
            let sym = categorical(rng, &self.emission[state]);
            out.push((NUM_SPECIAL + sym) as TokenId);
            if rng.random::<f64>() < self.termination {
                return Sentence(out);
            }
            state = categorical(rng, &self.transition[state]);
        }
    }

    /// Draw conditioned on length ≤ `max_length` (rejection).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_length: usize) -> Sentence {
        assert!(max_length >= 1);
        loop {
            let s = self.sample_unbounded(rng);
            if s.len() <= max_length {
                return s;
            }
        }
    }

    /// Exact log-probability of a sentence under the unbounded model,
    /// by the scaled forward algorithm.
    pub fn log_prob(&self, sentence: &Sentence) -> Result<f64> {
        if sentence.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let sym = |t: TokenId| -> Result<usize> {
            let k = (t as usize)
                .checked_sub(NUM_SPECIAL)
                .filter(|&k| k < self.num_symbols())
                .ok_or_else(|| Error::input(format!("token {t} is not an HMM symbol")))?;
            Ok(k)
        };
        let s = self.num_states();
        let first = sym(sentence.0[0])?;
        let mut alpha: Vec<f64> = (0..s).map(|i| self.initial[i] * self.emission[i][first]).collect();
        let mut log_scale = 0.0;
        for &t in &sentence.0[1..] {
            let k = sym(t)?;
            let norm: f64 = alpha.iter().sum();
            if norm == 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            log_scale += norm.ln();
            let mut next = vec![0.0; s];
            for (i, &a) in alpha.iter().enumerate() {
                let a = a / norm * (1.0 - self.termination);
                for (j, n) in next.iter_mut().enumerate() {
                    *n += a * self.transition[i][j];
                }
            }
            for (j, n) in next.iter_mut().enumerate() {
                *n *= self.emission[j][k];
            }
            alpha = next;
        }
        let total: f64 = alpha.iter().sum::<f64>() * self.termination;
        Ok(log_scale + total.ln())
    }

    /// Log-probability conditioned on length ≤ `max_length`, matching
    /// [`HmmOracle::sample`].
    pub fn log_prob_bounded(&self, sentence: &Sentence, max_length: usize) -> Result<f64> {
        if sentence.len() > max_length {
            return Ok(f64::NEG_INFINITY);
        }
        let accept = 1.0 - (1.0 - self.termination).powi(max_length as i32);
        Ok(self.log_prob(sentence)? - accept.ln())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::synthetic(self.num_symbols())
    }
}

/// `count` i.i.d. sentences of length ≤ `max_length`.
pub fn generate_hmm_corpus(
    oracle: &HmmOracle,
    count: usize,
    max_length: usize,
    seed: u64,
) -> Result<Corpus> {
    oracle.validate()?;
    if count == 0 || max_length == 0 {
        return Err(Error::contract("count and max length must be positive"));
    }
    let mut r = rng::stream(seed, "hmm-corpus");
    let sentences = (0..count).map(|_| oracle.sample(&mut r, max_length)).collect();
    Corpus::new(sentences, oracle.vocabulary())
}

/// Mean negative log-likelihood per sentence under the bounded oracle.
pub fn oracle_nll(oracle: &HmmOracle, sentences: &[Sentence], max_length: usize) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::input("empty sentence list"));
    }
    let mut total = 0.0;
    for s in sentences {
        total -= oracle.log_prob_bounded(s, max_length)?;
    }
    Ok(total / sentences.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_prob(h: &HmmOracle, s: &Sentence) -> f64 {
        let n = h.num_states();
        let m = s.len();
        let syms: Vec<usize> = s.0.iter().map(|&t| t as usize - NUM_SPECIAL).collect();
        let mut total = 0.0;
        for code in 0..n.pow(m as u32) {
            let mut path = Vec::with_capacity(m);
            let mut c = code;
            for _ in 0..m {
                path.push(c % n);
                c /= n;
            }
            let mut p = h.initial[path[0]] * h.emission[path[0]][syms[0]];
            for t in 1..m {
                p *= (1.0 - h.termination) * h.transition[path[t - 1]][path[t]] * h.emission[path[t]][syms[t]];
            }
            total += p * h.termination;
        }
        total
    }

    #[test]
    fn forward_matches_path_enumeration() {
        let h = HmmOracle::random(3, 4, 3.0, 5).unwrap();
        let mut r = rng::stream(2, "t");
        for len in 1..=6 {
            for _ in 0..5 {
                let s = Sentence((0..len).map(|_| (NUM_SPECIAL + r.random_range(0..4)) as TokenId).collect());
                let exact = brute_force_prob(&h, &s).ln();
                let fwd = h.log_prob(&s).unwrap();
                assert!((exact - fwd).abs() <= 1e-9 * exact.abs(), "{exact} vs {fwd}");
            }
        }
    }

    #[test]
    fn single_state_deterministic_emission_repeats() {
        let h = HmmOracle::new(vec![1.0], vec![vec![1.0]], vec![vec![0.0, 1.0]], 0.25).unwrap();
        let c = generate_hmm_corpus(&h, 50, 1, 3).unwrap();
        assert!(c.sentences.iter().all(|s| s == &Sentence(vec![5])));
    }

    #[test]
    fn invalid_rows_are_rejected() {
        assert!(HmmOracle::new(vec![0.5, 0.4], vec![vec![1.0, 0.0]; 2], vec![vec![1.0]; 2], 0.5).is_err());
        assert!(HmmOracle::new(vec![1.0], vec![vec![1.0]], vec![vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn sampled_lengths_respect_bound() {
        let h = HmmOracle::random(5, 20, 7.0, 7).unwrap();
        let c = generate_hmm_corpus(&h, 500, 12, 1).unwrap();
        assert!(c.sentences.iter().all(|s| (1..=12).contains(&s.len())));
        assert_eq!(c.vocab.len(), 24);
    }

    #[test]
    fn bounded_probabilities_normalize_over_short_sentences() {
        // Σ over all sentences of length ≤ 3 with 2 symbols.
        let h = HmmOracle::random(2, 2, 2.0, 9).unwrap();
        let mut total = 0.0;
        for len in 1..=3u32 {
            for code in 0..2usize.pow(len) {
                let s = Sentence((0..len).map(|i| (NUM_SPECIAL + (code >> i & 1)) as TokenId).collect());
                total += h.log_prob_bounded(&s, 3).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }
}
