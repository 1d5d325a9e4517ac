// SPDX-License-Identifier: Apache-2.0

//! Tokenized corpora, vocabularies and train/test splitting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const START: TokenId = 1;
pub const END: TokenId = 2;
pub const SEP: TokenId = 3;
/// Number of reserved ids; content tokens start here.
pub const NUM_SPECIAL: usize = 4;

pub fn is_special(t: TokenId) -> bool {
    (t as usize) < NUM_SPECIAL
}

const SPECIAL_NAMES: [&str; NUM_SPECIAL] = ["<pad>", "<s>", "</s>", "<sep>"];

/// A token-id sequence without start/end markers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Sentence(pub Vec<TokenId>);

impl Sentence {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Sentence(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    /// Number of positions where two equal-length sentences differ.
    pub fn hamming(&self, other: &Sentence) -> Option<usize> {
        (self.len() == other.len())
            .then(|| self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count())
    }
}

impl From<Vec<TokenId>> for Sentence {
    fn from(v: Vec<TokenId>) -> Self {
        Sentence(v)
    }
}

/// Bidirectional token ↔ id map with the special tokens in ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials followed by `content` in the given order.
    pub fn from_tokens<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(content.into_iter().map(Into::into));
        Self::from_full_list(tokens)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::input(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::input(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Vocabulary of `n` synthetic content tokens `w0 … w{n-1}`.
    pub fn synthetic(n: usize) -> Self {
        Self::from_tokens((0..n).map(|i| format!("w{i}"))).expect("synthetic names are valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens eligible for substitution (everything except the specials).
    pub fn content_size(&self) -> usize {
        self.tokens.len() - NUM_SPECIAL
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, line: &str) -> Option<Sentence> {
        line.split_whitespace()
            .map(|t| self.id(t))
            .collect::<Option<Vec<_>>>()
            .map(Sentence)
    }

    pub fn decode(&self, s: &Sentence) -> String {
        s.0.iter()
            .map(|&t| self.token(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_NAMES {
            return Err(Error::format("vocabulary", "missing reserved special tokens"));
        }
        Self::from_full_list(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// FNV-1a digest of the vocabulary file contents, hex encoded.
    pub fn digest(&self) -> String {
        let mut hash = 0xcbf2_9ce4_8422_2325_u64;
        for b in self.to_text().bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{hash:016x}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

/// Sentences over a shared vocabulary, optionally paired with contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub contexts: Option<Vec<Sentence>>,
    pub vocab: Vocabulary,
    pub split: Split,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>, vocab: Vocabulary) -> Result<Self> {
        let c = Corpus {
            sentences,
            contexts: None,
            vocab,
            split: Split::All,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn paired(contexts: Vec<Sentence>, responses: Vec<Sentence>, vocab: Vocabulary) -> Result<Self> {
        if contexts.len() != responses.len() {
            return Err(Error::input(format!(
                "{} contexts for {} responses",
                contexts.len(),
                responses.len()
            )));
        }
        let c = Corpus {
            sentences: responses,
            contexts: Some(contexts),
            vocab,
            split: Split::All,
        };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let v = self.vocab.len();
        let all = self.sentences.iter().chain(self.contexts.iter().flatten());
        for s in all {
            if let Some(&t) = s.0.iter().find(|&&t| t as usize >= v) {
                return Err(Error::input(format!("token id {t} outside vocabulary of {v}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn is_paired(&self) -> bool {
        self.contexts.is_some()
    }

    pub fn context(&self, i: usize) -> Option<&Sentence> {
        self.contexts.as_ref().map(|c| &c[i])
    }

    fn subset(&self, idx: &[usize], split: Split) -> Corpus {
        Corpus {
            sentences: idx.iter().map(|&i| self.sentences[i].clone()).collect(),
            contexts: self
                .contexts
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i].clone()).collect()),
            vocab: self.vocab.clone(),
            split,
        }
    }

    /// Text form: one sentence per line, `context\tresponse` when paired.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if let Some(c) = self.context(i) {
                let _ = write!(out, "{}\t", self.vocab.decode(c));
            }
            out.push_str(&self.vocab.decode(s));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Reads a corpus written with [`Corpus::save`] against a fixed vocabulary.
    pub fn load_with_vocab(path: &Path, vocab: &Vocabulary) -> Result<Corpus> {
        let text = fs::read_to_string(path)?;
        let mut sentences = Vec::new();
        let mut contexts = Vec::new();
        let mut paired = None;
        for (n, line) in text.lines().enumerate() {
            let is_pair = line.contains('\t');
            if *paired.get_or_insert(is_pair) != is_pair {
                return Err(Error::format("corpus", format!("line {}: mixed paired/unpaired", n + 1)));
            }
            let (ctx, resp) = match line.split_once('\t') {
                Some((c, r)) => (Some(c), r),
                None => (None, line),
            };
            let encode = |s: &str| {
                vocab
                    .encode(s)
                    .ok_or_else(|| Error::format("corpus", format!("line {}: unknown token", n + 1)))
            };
            sentences.push(encode(resp)?);
            if let Some(c) = ctx {
                contexts.push(encode(c)?);
            }
        }
        let mut corpus = if paired == Some(true) {
            Corpus::paired(contexts, sentences, vocab.clone())?
        } else {
            Corpus::new(sentences, vocab.clone())?
        };
        corpus.split = Split::All;
        Ok(corpus)
    }
}

/// Loads a raw corpus, building the vocabulary by frequency.
///
/// Tokens below `min_freq`, or beyond the `max_vocab` most frequent, are
/// out of vocabulary and any sentence (or pair) containing one is dropped.
/// Ids are assigned by descending frequency, ties broken lexicographically.
pub fn load_corpus(path: &Path, min_freq: usize, max_vocab: Option<usize>) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let paired = lines.first().is_some_and(|l| l.contains('\t'));
    let mut rows: Vec<(Option<Vec<&str>>, Vec<&str>)> = Vec::with_capacity(lines.len());
    for (n, line) in lines.iter().enumerate() {
        match (paired, line.split_once('\t')) {
            (true, Some((c, r))) => rows.push((
                Some(c.split_whitespace().collect()),
                r.split_whitespace().collect(),
            )),
            (false, None) => rows.push((None, line.split_whitespace().collect())),
            _ => {
                return Err(Error::format(
                    "corpus",
                    format!("line {}: mixed paired/unpaired lines", n + 1),
                ))
            }
        }
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for (c, r) in &rows {
        for t in c.iter().flatten().chain(r) {
            if SPECIAL_NAMES.contains(t) {
                return Err(Error::input(format!("corpus uses reserved token {t}")));
            }
            *freq.entry(t).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, f)| f >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    if let Some(cap) = max_vocab {
        ranked.truncate(cap);
    }
    let vocab = Vocabulary::from_tokens(ranked.iter().map(|(t, _)| *t))?;
    let encode = |toks: &[&str]| -> Option<Sentence> {
        toks.iter().map(|t| vocab.id(t)).collect::<Option<Vec<_>>>().map(Sentence)
    };
    let mut sentences = Vec::new();
    let mut contexts = Vec::new();
    for (c, r) in &rows {
        let Some(resp) = encode(r) else { continue };
        if resp.is_empty() {
            continue;
        }
        match c {
            Some(c) => {
                let Some(ctx) = encode(c) else { continue };
                contexts.push(ctx);
            }
            None => {}
        }
        sentences.push(resp);
    }
    if sentences.is_empty() {
        return Err(Error::input(format!(
            "no sentences left in {} after vocabulary filtering",
            path.display()
        )));
    }
    if paired {
        Corpus::paired(contexts, sentences, vocab)
    } else {
        Corpus::new(sentences, vocab)
    }
}

/// Shuffled, disjoint split; the test side gets `round(fraction · n)` items.
pub fn train_test_split(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::contract(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = corpus.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, rng::DATA_SHUFFLE));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let (test, train) = idx.split_at(n_test.min(n));
    Ok((corpus.subset(train, Split::Train), corpus.subset(test, Split::Test)))
}
