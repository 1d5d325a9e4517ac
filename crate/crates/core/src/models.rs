// SPDX-License-Identifier: Apache-2.0

//! Recurrent generator and discriminator, and the losses that train them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::corpus::{Sentence, TokenId, END, PAD, SEP, START};
use crate::error::{Error, Result};
use crate::rng::categorical;

/// Padded token matrix plus optional contexts for conditional models.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceBatch {
    pub sentences: Vec<Sentence>,
    pub contexts: Option<Vec<Sentence>>,
    width: usize,
}

impl SentenceBatch {
    pub fn new(sentences: Vec<Sentence>) -> Result<Self> {
        Self::build(sentences, None)
    }

    pub fn with_contexts(sentences: Vec<Sentence>, contexts: Vec<Sentence>) -> Result<Self> {
        if contexts.len() != sentences.len() {
            return Err(Error::contract(format!(
                "{} contexts for {} sentences",
                contexts.len(),
                sentences.len()
            )));
        }
        Self::build(sentences, Some(contexts))
    }

    fn build(sentences: Vec<Sentence>, contexts: Option<Vec<Sentence>>) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let width = sentences.iter().map(Sentence::len).max().unwrap_or(0);
        Ok(SentenceBatch {
            sentences,
            contexts,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Padded width (longest sentence).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sentences.iter().map(Sentence::len).collect()
    }

    /// Row-major `len × width` ids, right padded with `<pad>`.
    pub fn padded(&self) -> Vec<TokenId> {
        let mut out = vec![PAD; self.len() * self.width];
        for (i, s) in self.sentences.iter().enumerate() {
            out[i * self.width..i * self.width + s.len()].copy_from_slice(&s.0);
        }
        out
    }

    fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        let all = self.sentences.iter().chain(self.contexts.iter().flatten());
        for s in all {
            if let Some(&t) = s.0.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::input(format!("token id {t} outside vocabulary of {vocab_size}")));
            }
        }
        Ok(())
    }
}

/// Gated recurrent unit:
/// `r = σ(xWr + hUr + br)`, `z = σ(xWz + hUz + bz)`,
/// `n = tanh(xWn + bn + r ⊙ hUn)`, `h' = n + z ⊙ (h − n)`.
#[derive(Clone, Debug)]
struct GruCell {
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

impl GruCell {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut mk = |name: &str, rows: usize, cols: usize, s: f64| {
            store.insert_uniform(&format!("{prefix}.{name}"), rows, cols, s, rng)
        };
        let w = [mk("w_r", input, hidden, scale), mk("w_z", input, hidden, scale), mk("w_n", input, hidden, scale)];
        let u = [mk("u_r", hidden, hidden, scale), mk("u_z", hidden, hidden, scale), mk("u_n", hidden, hidden, scale)];
        let b = [mk("b_r", 1, hidden, 0.0), mk("b_z", 1, hidden, 0.0), mk("b_n", 1, hidden, 0.0)];
        GruCell { w, u, b }
    }

    fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let mut p = |id| tape.param(store, id);
        let (wr, wz, wn) = (p(self.w[0]), p(self.w[1]), p(self.w[2]));
        let (ur, uz, un) = (p(self.u[0]), p(self.u[1]), p(self.u[2]));
        let (br, bz, bn) = (p(self.b[0]), p(self.b[1]), p(self.b[2]));
        let gate = |tape: &mut Tape, w: Var, u: Var, b: Var| -> Result<Var> {
            let xw = tape.matmul(x, w)?;
            let hu = tape.matmul(h, u)?;
            let s = tape.add(xw, hu)?;
            let s = tape.add(s, b)?;
            tape.sigmoid(s)
        };
        let r = gate(tape, wr, ur, br)?;
        let z = gate(tape, wz, uz, bz)?;
        let xw = tape.matmul(x, wn)?;
        let xw = tape.add(xw, bn)?;
        let hu = tape.matmul(h, un)?;
        let rhu = tape.mul(r, hu)?;
        let pre = tape.add(xw, rhu)?;
        let n = tape.tanh(pre)?;
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}

/// `h_prev + mask ⊙ (h_new − h_prev)` with a constant 0/1 column mask.
fn masked_update(tape: &mut Tape, h_prev: Var, h_new: Var, mask: &[f64]) -> Result<Var> {
    if mask.iter().all(|&m| m == 1.0) {
        return Ok(h_new);
    }
    let m = tape.constant(Tensor::column(mask.to_vec())?);
    let diff = tape.sub(h_new, h_prev)?;
    let md = tape.mul(m, diff)?;
    tape.add(h_prev, md)
}

/// Runs a GRU stack over rows of different lengths; returns the state of
/// every layer after each row's last token.
fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    embedding: ParamId,
    layers: &[GruCell],
    hidden: usize,
    rows: &[Vec<TokenId>],
) -> Result<Vec<Var>> {
    let b = rows.len();
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut states: Vec<Var> = (0..layers.len())
        .map(|_| tape.constant(Tensor::zeros(b, hidden)))
        .collect();
    let emb = tape.param(store, embedding);
    for t in 0..width {
        let ids: Vec<usize> = rows.iter().map(|r| r.get(t).map_or(PAD, |&x| x) as usize).collect();
        let mask: Vec<f64> = rows.iter().map(|r| if t < r.len() { 1.0 } else { 0.0 }).collect();
        let mut x = tape.embedding(emb, ids)?;
        for (l, cell) in layers.iter().enumerate() {
            let h_new = cell.step(tape, store, x, states[l])?;
            states[l] = masked_update(tape, states[l], h_new, &mask)?;
            x = states[l];
        }
    }
    Ok(states)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub conditional: bool,
}

impl GeneratorConfig {
    fn to_meta(self, meta: &mut BTreeMap<String, String>) {
        meta.insert("vocab_size".into(), self.vocab_size.to_string());
        meta.insert("embed_dim".into(), self.embed_dim.to_string());
        meta.insert("hidden_dim".into(), self.hidden_dim.to_string());
        meta.insert("layers".into(), self.layers.to_string());
        meta.insert("conditional".into(), self.conditional.to_string());
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, k: &str) -> Result<T> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("checkpoint", format!("missing or bad {k}")))
        }
        Ok(GeneratorConfig {
            vocab_size: get(meta, "vocab_size")?,
            embed_dim: get(meta, "embed_dim")?,
            hidden_dim: get(meta, "hidden_dim")?,
            layers: get(meta, "layers")?,
            conditional: get(meta, "conditional")?,
        })
    }
}

/// Recurrent language model `P(x_t | x_<t [, C])` with an optional
/// context encoder whose final states seed the decoder.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    embedding: ParamId,
    decoder: Vec<GruCell>,
    encoder: Option<Vec<GruCell>>,
    out_w: ParamId,
    out_b: ParamId,
}

const INIT_SCALE: f64 = 0.1;

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        Self::with_scale(config, INIT_SCALE, rng)
    }

    /// Every parameter zero: the output distribution is uniform.
    pub fn zeros(config: GeneratorConfig) -> Result<Self> {
        Self::with_scale(config, 0.0, &mut crate::rng::stream(0, "unused"))
    }

    fn with_scale<R: Rng + ?Sized>(config: GeneratorConfig, scale: f64, rng: &mut R) -> Result<Self> {
        if config.vocab_size < 2 || config.embed_dim == 0 || config.hidden_dim == 0 || config.layers == 0 {
            return Err(Error::contract(format!("invalid generator config {config:?}")));
        }
        let mut params = ParamStore::new();
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let embedding = params.insert_uniform("gen.embedding", v, e, scale, rng);
        let stack = |params: &mut ParamStore, name: &str, rng: &mut R| -> Vec<GruCell> {
            (0..config.layers)
                .map(|l| GruCell::new(params, &format!("{name}.{l}"), if l == 0 { e } else { h }, h, scale, rng))
                .collect()
        };
        let encoder = config.conditional.then(|| stack(&mut params, "gen.encoder", rng));
        let decoder = stack(&mut params, "gen.decoder", rng);
        let out_w = params.insert_uniform("gen.out_w", h, v, scale, rng);
        let out_b = params.insert_uniform("gen.out_b", 1, v, 0.0, rng);
        Ok(Generator {
            config,
            params,
            embedding,
            decoder,
            encoder,
            out_w,
            out_b,
        })
    }

    fn initial_states(&self, tape: &mut Tape, contexts: Option<&[Sentence]>, b: usize) -> Result<Vec<Var>> {
        let h = self.config.hidden_dim;
        match (&self.encoder, contexts) {
            (Some(enc), Some(ctx)) => {
                let rows: Vec<Vec<TokenId>> = ctx.iter().map(|c| c.0.clone()).collect();
                encode(tape, &self.params, self.embedding, enc, h, &rows)
            }
            (Some(_), None) => Err(Error::contract("conditional generator needs contexts")),
            (None, _) => Ok((0..self.config.layers).map(|_| tape.constant(Tensor::zeros(b, h))).collect()),
        }
    }

    /// One decoder step; returns log-probabilities over the vocabulary.
    fn decode_step(&self, tape: &mut Tape, states: &mut [Var], inputs: Vec<usize>) -> Result<Var> {
        let emb = tape.param(&self.params, self.embedding);
        let mut x = tape.embedding(emb, inputs)?;
        for (l, cell) in self.decoder.iter().enumerate() {
            states[l] = cell.step(tape, &self.params, x, states[l])?;
            x = states[l];
        }
        let w = tape.param(&self.params, self.out_w);
        let b = tape.param(&self.params, self.out_b);
        let logits = tape.matmul(x, w)?;
        let logits = tape.add(logits, b)?;
        tape.log_softmax(logits)
    }

    /// Per-sentence `Σ_t log P(x_t | x_<t [, C])` including the end token,
    /// as an n×1 node.
    pub fn log_prob_var(&self, tape: &mut Tape, batch: &SentenceBatch) -> Result<Var> {
        batch.check_vocab(self.config.vocab_size)?;
        let n = batch.len();
        let mut states = self.initial_states(tape, batch.contexts.as_deref(), n)?;
        let mut total: Option<Var> = None;
        for t in 0..=batch.width() {
            let inputs: Vec<usize> = batch
                .sentences
                .iter()
                .map(|s| if t == 0 { START } else { s.0.get(t - 1).copied().unwrap_or(PAD) } as usize)
                .collect();
            let targets: Vec<usize> = batch
                .sentences
                .iter()
                .map(|s| match t.cmp(&s.len()) {
                    std::cmp::Ordering::Less => s.0[t],
                    std::cmp::Ordering::Equal => END,
                    std::cmp::Ordering::Greater => PAD,
                } as usize)
                .collect();
            let lsm = self.decode_step(tape, &mut states, inputs)?;
            let mut picked = tape.gather(lsm, targets)?;
            if batch.sentences.iter().any(|s| t > s.len()) {
                let mask: Vec<f64> = batch.sentences.iter().map(|s| if t <= s.len() { 1.0 } else { 0.0 }).collect();
                let m = tape.constant(Tensor::column(mask)?);
                picked = tape.mul(picked, m)?;
            }
            total = Some(match total {
                None => picked,
                Some(acc) => tape.add(acc, picked)?,
            });
        }
        Ok(total.expect("at least one step"))
    }

    pub fn log_prob(&self, batch: &SentenceBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.log_prob_var(&mut tape, batch)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Next-token distributions after consuming each prefix (teacher forced).
    pub fn step_distributions(&self, batch: &SentenceBatch) -> Result<Vec<Vec<Vec<f64>>>> {
        batch.check_vocab(self.config.vocab_size)?;
        let mut tape = Tape::new();
        let mut states = self.initial_states(&mut tape, batch.contexts.as_deref(), batch.len())?;
        let mut out = vec![Vec::new(); batch.len()];
        for t in 0..=batch.width() {
            let inputs: Vec<usize> = batch
                .sentences
                .iter()
                .map(|s| if t == 0 { START } else { s.0.get(t - 1).copied().unwrap_or(PAD) } as usize)
                .collect();
            let lsm = self.decode_step(&mut tape, &mut states, inputs)?;
            let v = tape.value(lsm);
            for (i, s) in batch.sentences.iter().enumerate() {
                if t <= s.len() {
                    out[i].push(v.row_slice(i).iter().map(|x| x.exp()).collect());
                }
            }
        }
        Ok(out)
    }

    /// Ancestral sampling until `</s>` or `max_length` tokens.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        count: usize,
        max_length: usize,
        contexts: Option<&[Sentence]>,
        rng: &mut R,
    ) -> Result<Vec<Sentence>> {
        if count == 0 || max_length == 0 {
            return Err(Error::contract("count and max length must be at least 1"));
        }
        if let Some(c) = contexts {
            if c.len() != count {
                return Err(Error::contract("one context per sample required"));
            }
            SentenceBatch::with_contexts(c.to_vec(), c.to_vec())?.check_vocab(self.config.vocab_size)?;
        }
        let mut tape = Tape::new();
        let mut states = self.initial_states(&mut tape, contexts, count)?;
        let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); count];
        let mut done = vec![false; count];
        let mut inputs = vec![START as usize; count];
        for _ in 0..max_length {
            let lsm = self.decode_step(&mut tape, &mut states, inputs.clone())?;
            let probs: Vec<f64> = tape.value(lsm).data().iter().map(|x| x.exp()).collect();
            let v = self.config.vocab_size;
            for i in 0..count {
                if done[i] {
                    inputs[i] = PAD as usize;
                    continue;
                }
                let tok = categorical(rng, &probs[i * v..(i + 1) * v]) as TokenId;
                if tok == END {
                    done[i] = true;
                    inputs[i] = PAD as usize;
                } else {
                    out[i].push(tok);
                    inputs[i] = tok as usize;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out.into_iter().map(Sentence).collect())
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("kind".into(), "generator".into());
        self.config.to_meta(&mut meta);
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let (store, meta) = ParamStore::load(path)?;
        if meta.get("kind").map(String::as_str) != Some("generator") {
            return Err(Error::format("checkpoint", "not a generator checkpoint"));
        }
        let config = GeneratorConfig::from_meta(&meta)?;
        let mut g = Generator::zeros(config)?;
        g.params.assign_from(&store)?;
        Ok((g, meta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

/// GRU encoder with a sigmoid scoring head, `D(X) ∈ (0, 1)`.
///
/// Conditional inputs are scored as the single sequence `C <sep> X`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
    embedding: ParamId,
    cell: GruCell,
    head_w: ParamId,
    head_b: ParamId,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        Self::with_scale(config, INIT_SCALE, rng)
    }

    /// Every parameter zero: scores are exactly 0.5.
    pub fn zeros(config: DiscriminatorConfig) -> Result<Self> {
        Self::with_scale(config, 0.0, &mut crate::rng::stream(0, "unused"))
    }

    fn with_scale<R: Rng + ?Sized>(config: DiscriminatorConfig, scale: f64, rng: &mut R) -> Result<Self> {
        if config.vocab_size < 2 || config.embed_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::contract(format!("invalid discriminator config {config:?}")));
        }
        let mut params = ParamStore::new();
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let embedding = params.insert_uniform("disc.embedding", v, e, scale, rng);
        let cell = GruCell::new(&mut params, "disc.gru", e, h, scale, rng);
        let head_w = params.insert_uniform("disc.head_w", h, 1, scale, rng);
        let head_b = params.insert_uniform("disc.head_b", 1, 1, 0.0, rng);
        Ok(Discriminator {
            config,
            params,
            embedding,
            cell,
            head_w,
            head_b,
        })
    }

    fn rows(batch: &SentenceBatch) -> Vec<Vec<TokenId>> {
        match &batch.contexts {
            None => batch.sentences.iter().map(|s| s.0.clone()).collect(),
            Some(ctx) => batch
                .sentences
                .iter()
                .zip(ctx)
                .map(|(s, c)| {
                    let mut r = c.0.clone();
                    r.push(SEP);
                    r.extend_from_slice(&s.0);
                    r
                })
                .collect(),
        }
    }

    /// n×1 node of scores.
    pub fn score_var(&self, tape: &mut Tape, batch: &SentenceBatch) -> Result<Var> {
        batch.check_vocab(self.config.vocab_size)?;
        let rows = Self::rows(batch);
        let cells = std::slice::from_ref(&self.cell);
        let states = encode(tape, &self.params, self.embedding, cells, self.config.hidden_dim, &rows)?;
        let w = tape.param(&self.params, self.head_w);
        let b = tape.param(&self.params, self.head_b);
        let s = tape.matmul(states[0], w)?;
        let s = tape.add(s, b)?;
        tape.sigmoid(s)
    }

    pub fn score(&self, batch: &SentenceBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.score_var(&mut tape, batch)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("kind".into(), "discriminator".into());
        meta.insert("vocab_size".into(), self.config.vocab_size.to_string());
        meta.insert("embed_dim".into(), self.config.embed_dim.to_string());
        meta.insert("hidden_dim".into(), self.config.hidden_dim.to_string());
        self.params.save(path, &meta)
    }
}

/// Least-squares objective `½·mean[(D(real) − 1)²] + ½·mean[D(fake)²]`.
pub fn discriminator_loss_var(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let neg_one = tape.constant(Tensor::scalar(-1.0));
    let r = tape.add(real, neg_one)?;
    let r2 = tape.mul(r, r)?;
    let r_mean = tape.mean(r2)?;
    let f2 = tape.mul(fake, fake)?;
    let f_mean = tape.mean(f2)?;
    let total = tape.add(r_mean, f_mean)?;
    tape.scale(total, 0.5)
}

pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::contract("discriminator loss needs non-empty score vectors"));
    }
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::column(real.to_vec())?);
    let f = tape.constant(Tensor::column(fake.to_vec())?);
    let l = discriminator_loss_var(&mut tape, r, f)?;
    Ok(tape.value(l).item())
}

fn check_weights(weights: &[f64]) -> Result<f64> {
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::contract("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract("weights sum to zero"));
    }
    Ok(total)
}

/// Self-normalized weighted likelihood `−Σ w_i log p_i / Σ w_i`.
pub fn weighted_mle_loss_var(tape: &mut Tape, log_probs: Var, weights: &[f64]) -> Result<Var> {
    let n = tape.value(log_probs).rows();
    if weights.len() != n || tape.value(log_probs).cols() != 1 {
        return Err(Error::contract(format!(
            "{} weights for {:?} log-probabilities",
            weights.len(),
            tape.value(log_probs).shape()
        )));
    }
    let total = check_weights(weights)?;
    let w = tape.constant(Tensor::column(weights.to_vec())?);
    let wl = tape.mul(log_probs, w)?;
    let s = tape.sum(wl)?;
    tape.scale(s, -1.0 / total)
}

/// Plain maximum likelihood: unit weights.
pub fn mle_loss_var(tape: &mut Tape, log_probs: Var) -> Result<Var> {
    let n = tape.value(log_probs).rows();
    weighted_mle_loss_var(tape, log_probs, &vec![1.0; n])
}

/// REINFORCE surrogate `−(1/n) Σ (r_i − b_i) log p_i`, where `b_i` is the
/// mean reward of the other samples in the batch. Equivalently the batch
/// mean baseline scaled by `n/(n−1)`, which keeps the estimator unbiased.
pub fn policy_gradient_loss_var(tape: &mut Tape, log_probs: Var, rewards: &[f64]) -> Result<Var> {
    let n = tape.value(log_probs).rows();
    if rewards.len() != n || tape.value(log_probs).cols() != 1 {
        return Err(Error::contract("one reward per sample required"));
    }
    if n < 2 {
        return Err(Error::contract("policy gradient needs at least two samples per batch"));
    }
    // Shifted mean, so identical rewards give an exactly zero advantage.
    let r0 = rewards[0];
    let baseline = r0 + rewards.iter().map(|r| r - r0).sum::<f64>() / n as f64;
    let scale = n as f64 / (n - 1) as f64;
    let adv: Vec<f64> = rewards.iter().map(|r| (r - baseline) * scale).collect();
    let a = tape.constant(Tensor::column(adv)?);
    let al = tape.mul(log_probs, a)?;
    let s = tape.sum(al)?;
    tape.scale(s, -1.0 / n as f64)
}

/// `w_i ∝ exp(D_i)`, normalized to sum to one. Computed relative to the
/// batch maximum, so equal scores give exactly equal weights.
pub fn araml_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    normalize_weights(scores.iter().map(|s| (s - max).exp()).collect())
}

/// `w_i ∝ D_i / (1 − D_i)` with scores clamped to `[1e-6, 1 − 1e-6]`.
pub fn maligan_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    const EPS: f64 = 1e-6;
    normalize_weights(
        scores
            .iter()
            .map(|&d| {
                let d = d.clamp(EPS, 1.0 - EPS);
                d / (1.0 - d)
            })
            .collect(),
    )
}

pub fn normalize_weights(mut w: Vec<f64>) -> Result<Vec<f64>> {
    let total = check_weights(&w)?;
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}
