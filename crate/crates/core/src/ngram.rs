// SPDX-License-Identifier: Apache-2.0

//! Add-k smoothed n-gram language model with lower-order interpolation.
//!
//! For context `h` of length `l` and its suffix `h'` of length `l-1`:
//!
//! ```text
//! P_0(w)   = (c(w) + k) / (N + k|V|)
//! P_l(w|h) = (c(h, w) + k|V| P_{l-1}(w|h')) / (c(h) + k|V|)
//! ```
//!
//! so every conditional is a proper distribution with full support, it
//! falls back to the lower order for unseen contexts, large `k` tends to
//! uniform and `k → 0⁺` tends to relative frequencies.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{Sentence, TokenId, END, START};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<TokenId, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NGramLm {
    order: usize,
    k: f64,
    vocab_size: usize,
    /// `tables[l]` maps contexts of length `l` to continuation counts.
    tables: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

fn check_params(order: usize, k: f64, vocab_size: usize) -> Result<()> {
    if !(2..=3).contains(&order) {
        return Err(Error::contract(format!("n-gram order must be 2 or 3, got {order}")));
    }
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::contract(format!("smoothing constant must be > 0, got {k}")));
    }
    if vocab_size < 2 {
        return Err(Error::contract("vocabulary must have at least two entries"));
    }
    Ok(())
}

impl NGramLm {
    /// Model with no counts: every conditional is exactly uniform.
    pub fn uniform(order: usize, k: f64, vocab_size: usize) -> Result<Self> {
        check_params(order, k, vocab_size)?;
        Ok(NGramLm {
            order,
            k,
            vocab_size,
            tables: vec![HashMap::new(); order],
        })
    }

    pub fn train(corpus: &[Sentence], order: usize, k: f64, vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::input("cannot train a language model on an empty corpus"));
        }
        let mut lm = Self::uniform(order, k, vocab_size)?;
        for s in corpus {
            if let Some(&t) = s.0.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::input(format!("token id {t} outside vocabulary of {vocab_size}")));
            }
            let padded = lm.pad(s);
            for i in (order - 1)..padded.len() {
                let w = padded[i];
                for l in 0..order {
                    let ctx = padded[i - l..i].to_vec();
                    let entry = lm.tables[l].entry(ctx).or_default();
                    entry.total += 1;
                    *entry.next.entry(w).or_default() += 1;
                }
            }
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn pad(&self, s: &Sentence) -> Vec<TokenId> {
        let mut out = vec![START; self.order - 1];
        out.extend_from_slice(&s.0);
        out.push(END);
        out
    }

    /// `P(w | history)`, using at most the last `order-1` history tokens.
    pub fn prob(&self, history: &[TokenId], w: TokenId) -> f64 {
        let kv = self.k * self.vocab_size as f64;
        let mut p = match self.tables[0].get(&[][..]) {
            Some(c) => (c.next.get(&w).copied().unwrap_or(0) as f64 + self.k) / (c.total as f64 + kv),
            None => 1.0 / self.vocab_size as f64,
        };
        let max_l = (self.order - 1).min(history.len());
        for l in 1..=max_l {
            let ctx = &history[history.len() - l..];
            if let Some(c) = self.tables[l].get(ctx) {
                let hits = c.next.get(&w).copied().unwrap_or(0) as f64;
                p = (hits + kv * p) / (c.total as f64 + kv);
            }
        }
        p
    }

    /// Full conditional distribution over the vocabulary.
    pub fn distribution(&self, history: &[TokenId]) -> Vec<f64> {
        let v = self.vocab_size;
        let kv = self.k * v as f64;
        let mut p = match self.tables[0].get(&[][..]) {
            Some(c) => {
                let mut row = vec![self.k / (c.total as f64 + kv); v];
                for (&w, &n) in &c.next {
                    row[w as usize] = (n as f64 + self.k) / (c.total as f64 + kv);
                }
                row
            }
            None => vec![1.0 / v as f64; v],
        };
        let max_l = (self.order - 1).min(history.len());
        for l in 1..=max_l {
            let ctx = &history[history.len() - l..];
            if let Some(c) = self.tables[l].get(ctx) {
                let denom = c.total as f64 + kv;
                for (w, pw) in p.iter_mut().enumerate() {
                    let hits = c.next.get(&(w as TokenId)).copied().unwrap_or(0) as f64;
                    *pw = (hits + kv * *pw) / denom;
                }
            }
        }
        p
    }

    /// Local two-sided score for filling one slot.
    ///
    /// Proportional to `P(w | left) · Π_j P(right_j | …, w, right_<j)` over
    /// the right-context tokens whose n-gram window contains `w`. Under the
    /// Markov assumption these are the only factors of the sentence score
    /// that depend on the slot, so the ranking equals full-sentence
    /// rescoring. Callers pass `<s>`/`</s>` explicitly when the slot is at
    /// a sentence boundary; empty contexts give the unigram distribution.
    pub fn word_distribution(&self, left: &[TokenId], right: &[TokenId]) -> Vec<f64> {
        let mut scores = self.distribution(left);
        let span = right.len().min(self.order - 1);
        if span > 0 {
            let keep = left.len().min(self.order - 1);
            let mut window: Vec<TokenId> = Vec::with_capacity(keep + 1 + span);
            for (w, score) in scores.iter_mut().enumerate() {
                window.clear();
                window.extend_from_slice(&left[left.len() - keep..]);
                window.push(w as TokenId);
                for j in 0..span {
                    *score *= self.prob(&window, right[j]);
                    window.push(right[j]);
                }
            }
        }
        let total: f64 = scores.iter().sum();
        scores.iter_mut().for_each(|s| *s /= total);
        scores
    }

    /// Sum of `log P` over the tokens and end marker of one sentence.
    pub fn sentence_log_prob(&self, s: &Sentence) -> f64 {
        let padded = self.pad(s);
        (self.order - 1..padded.len())
            .map(|i| self.prob(&padded[i + 1 - self.order..i], padded[i]).ln())
            .sum()
    }

    /// `exp(-Σ log P / T)` with `T` counting every token plus one end
    /// marker per sentence.
    pub fn perplexity(&self, corpus: &[Sentence]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::input("cannot evaluate perplexity on an empty corpus"));
        }
        let mut log_sum = 0.0;
        let mut count = 0usize;
        for s in corpus {
            if let Some(&t) = s.0.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::input(format!("token id {t} outside vocabulary")));
            }
            log_sum += self.sentence_log_prob(s);
            count += s.len() + 1;
        }
        Ok((-log_sum / count as f64).exp())
    }

    /// Text form: a header, then one `context token count` line per
    /// n-gram, with `-` for the empty context and `,` between context ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "araml-ngram 1");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "k {}", self.k);
        let _ = writeln!(out, "vocab {}", self.vocab_size);
        for table in &self.tables {
            let mut rows: Vec<(&Vec<TokenId>, TokenId, u64)> = table
                .iter()
                .flat_map(|(ctx, c)| c.next.iter().map(move |(&w, &n)| (ctx, w, n)))
                .collect();
            rows.sort();
            for (ctx, w, n) in rows {
                let ctx = if ctx.is_empty() {
                    "-".to_string()
                } else {
                    ctx.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
                };
                let _ = writeln!(out, "{ctx} {w} {n}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("n-gram model", d);
        let mut lines = text.lines();
        if lines.next() != Some("araml-ngram 1") {
            return Err(bad("missing header".into()));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {name}")))?;
            line.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected {name}, got {line:?}")))
        };
        let order: usize = field("order")?.parse().map_err(|e| bad(format!("order: {e}")))?;
        let k: f64 = field("k")?.parse().map_err(|e| bad(format!("k: {e}")))?;
        let vocab: usize = field("vocab")?.parse().map_err(|e| bad(format!("vocab: {e}")))?;
        let mut lm = Self::uniform(order, k, vocab)?;
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            let [ctx, w, n] = parts[..] else {
                return Err(bad(format!("bad line {line:?}")));
            };
            let ctx: Vec<TokenId> = if ctx == "-" {
                Vec::new()
            } else {
                ctx.split(',')
                    .map(|t| t.parse().map_err(|e| bad(format!("{e}"))))
                    .collect::<Result<_>>()?
            };
            if ctx.len() >= order {
                return Err(bad(format!("context too long in {line:?}")));
            }
            let w: TokenId = w.parse().map_err(|e| bad(format!("{e}")))?;
            let n: u64 = n.parse().map_err(|e| bad(format!("{e}")))?;
            let entry = lm.tables[ctx.len()].entry(ctx).or_default();
            entry.total += n;
            entry.next.insert(w, n);
        }
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: TokenId = 4;
    const B: TokenId = 5;
    const C: TokenId = 6;

    fn s(t: &[TokenId]) -> Sentence {
        Sentence(t.to_vec())
    }

    #[test]
    fn single_continuation_with_tiny_k() {
        let lm = NGramLm::train(&[s(&[A, B])], 2, 1e-9, 7).unwrap();
        assert!(lm.prob(&[A], B) > 1.0 - 1e-6);
        let ppl = lm.perplexity(&[s(&[A, B])]).unwrap();
        assert!((ppl - 1.0).abs() < 1e-6);
    }

    #[test]
    fn huge_k_is_uniform() {
        let lm = NGramLm::train(&[s(&[A, B]), s(&[A, C])], 3, 1e9, 7).unwrap();
        for p in lm.distribution(&[START, A]) {
            assert!((p - 1.0 / 7.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_model_has_vocabulary_perplexity() {
        let lm = NGramLm::uniform(2, 0.5, 9).unwrap();
        let ppl = lm.perplexity(&[s(&[A, B, C]), s(&[C])]).unwrap();
        assert!((ppl - 9.0).abs() < 1e-9);
    }

    #[test]
    fn hand_computed_bigram_perplexity() {
        // Corpus {AB, AB, AC}, V = 7, k = 0.01. Independent evaluation of
        // the smoothing formula, written out term by term.
        let (k, v) = (0.01_f64, 7.0_f64);
        let kv = k * v;
        // Unigram targets: A×3, B×2, C×1, </s>×3 over N = 9.
        let uni = |c: f64| (c + k) / (9.0 + kv);
        let (pa, pb, pc, pe) = (uni(3.0), uni(2.0), uni(1.0), uni(3.0));
        // <s> → A three times; A → B twice, A → C once; B → </s>, C → </s>.
        let p_a_s = (3.0 + kv * pa) / (3.0 + kv);
        let p_b_a = (2.0 + kv * pb) / (3.0 + kv);
        let p_c_a = (1.0 + kv * pc) / (3.0 + kv);
        let p_e_b = (2.0 + kv * pe) / (2.0 + kv);
        let p_e_c = (1.0 + kv * pe) / (1.0 + kv);
        let log_sum = 2.0 * (p_a_s.ln() + p_b_a.ln() + p_e_b.ln()) + p_a_s.ln() + p_c_a.ln() + p_e_c.ln();
        let expected = (-log_sum / 9.0).exp();

        let corpus = [s(&[A, B]), s(&[A, B]), s(&[A, C])];
        let lm = NGramLm::train(&corpus, 2, k, 7).unwrap();
        let ppl = lm.perplexity(&corpus).unwrap();
        assert!((ppl - expected).abs() < 1e-12, "{ppl} vs {expected}");
        // Frozen value of the same expression, as a guard against edits.
        assert!((expected - 1.261_676_972_439_340_8).abs() < 1e-12, "{expected}");
    }

    #[test]
    fn empty_contexts_give_unigram_distribution() {
        let lm = NGramLm::train(&[s(&[A, B]), s(&[A, A])], 2, 0.1, 7).unwrap();
        let d = lm.word_distribution(&[], &[]);
        for (w, p) in d.iter().enumerate() {
            assert!((p - lm.prob(&[], w as TokenId)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_sided_score_follows_bigram_structure() {
        // A is always followed by B.
        let corpus = [s(&[A, B, C]), s(&[C, A, B]), s(&[A, B])];
        let lm = NGramLm::train(&corpus, 2, 0.01, 7).unwrap();
        let d = lm.word_distribution(&[START, A], &[]);
        let best = d.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert_eq!(best.0, B as usize);
        assert!(best.1 > 0.9);
        // Right context alone: the slot before B is almost surely A.
        let d = lm.word_distribution(&[START, C], &[B, END]);
        assert_eq!(d.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0, A as usize);
    }

    #[test]
    fn two_sided_score_matches_sentence_rescoring() {
        let corpus = [s(&[A, B, C]), s(&[C, A, B]), s(&[A, B]), s(&[B, C, C, A])];
        for order in [2, 3] {
            let lm = NGramLm::train(&corpus, order, 0.05, 7).unwrap();
            let base = [A, C, B, C];
            let slot = 2;
            let mut left = vec![START; order - 1];
            left.extend_from_slice(&base[..slot]);
            let mut right = base[slot + 1..].to_vec();
            right.push(END);
            let local = lm.word_distribution(&left, &right);
            let full: Vec<f64> = (0..7)
                .map(|w| {
                    let mut x = base.to_vec();
                    x[slot] = w as TokenId;
                    lm.sentence_log_prob(&Sentence(x)).exp()
                })
                .collect();
            let z: f64 = full.iter().sum();
            for (a, b) in local.iter().zip(&full) {
                assert!((a - b / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(matches!(NGramLm::train(&[], 2, 0.1, 5), Err(Error::Input(_))));
        assert!(NGramLm::train(&[s(&[A])], 4, 0.1, 7).is_err());
        assert!(NGramLm::train(&[s(&[A])], 2, 0.0, 7).is_err());
        let lm = NGramLm::uniform(2, 0.1, 7).unwrap();
        assert!(lm.perplexity(&[]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let corpus = [s(&[A, B, C]), s(&[C, A, B])];
        let lm = NGramLm::train(&corpus, 3, 0.25, 7).unwrap();
        let text = lm.to_text();
        let back = NGramLm::from_text(&text).unwrap();
        assert_eq!(back, lm);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn larger_k_moves_training_perplexity_toward_vocab_size() {
        let corpus = [s(&[A, B, C]), s(&[C, A, B]), s(&[A, B])];
        let mut prev = 0.0;
        for k in [0.001, 0.01, 0.1, 1.0, 10.0, 1000.0] {
            let ppl = NGramLm::train(&corpus, 2, k, 7).unwrap().perplexity(&corpus).unwrap();
            assert!(ppl > prev && ppl <= 7.0 + 1e-9);
            prev = ppl;
        }
    }

    proptest! {
        #[test]
        fn conditionals_normalize(
            sents in proptest::collection::vec(proptest::collection::vec(4u32..9, 1..6), 1..8),
            hist in proptest::collection::vec(0u32..9, 0..4),
            k in 0.001f64..5.0,
            order in 2usize..=3,
        ) {
            let corpus: Vec<Sentence> = sents.into_iter().map(Sentence).collect();
            let lm = NGramLm::train(&corpus, order, k, 9).unwrap();
            let d = lm.distribution(&hist);
            let total: f64 = d.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(d.iter().all(|&p| p > 0.0));
            let w = lm.word_distribution(&hist, &[5, 6]);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn duplicated_evaluation_corpus_keeps_perplexity(
            sents in proptest::collection::vec(proptest::collection::vec(4u32..9, 1..6), 1..8),
        ) {
            let corpus: Vec<Sentence> = sents.into_iter().map(Sentence).collect();
            let lm = NGramLm::train(&corpus, 2, 0.1, 9).unwrap();
            let mut doubled = corpus.clone();
            doubled.extend(corpus.iter().cloned());
            let a = lm.perplexity(&corpus).unwrap();
            let b = lm.perplexity(&doubled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }
    }
}
