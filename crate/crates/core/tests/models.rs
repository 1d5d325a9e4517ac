// SPDX-License-Identifier: Apache-2.0

mod common;

use araml_core::autodiff::Tensor;
use araml_core::corpus::{Corpus, Sentence, TokenId, Vocabulary, END};
use araml_core::models::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, SentenceBatch};
use araml_core::rng;
use araml_core::trainers::{pretrain_discriminator, pretrain_generator};
use common::{sents, total_variation};

fn small_generator(vocab: usize, seed: u64) -> Generator {
    let cfg = GeneratorConfig { vocab_size: vocab, embed_dim: 8, hidden_dim: 16, layers: 1, conditional: false };
    Generator::new(cfg, &mut rng::stream(seed, rng::MODEL_INIT)).unwrap()
}

#[test]
fn overfitting_one_sentence() {
    let vocab = Vocabulary::synthetic(4);
    let target = Sentence(vec![4, 5, 6]);
    let corpus = Corpus::new(vec![target.clone()], vocab).unwrap();
    let mut g = small_generator(8, 1);
    let before = g.log_prob(&SentenceBatch::new(vec![target.clone()]).unwrap()).unwrap()[0];
    pretrain_generator(&mut g, &corpus, 200, 1, 0.01, &mut rng::stream(1, rng::DATA_SHUFFLE)).unwrap();
    let after = g.log_prob(&SentenceBatch::new(vec![target.clone()]).unwrap()).unwrap()[0];
    assert!(after > before);
    assert!(after < 0.0 && after > -0.1, "log-prob {after}");
    let samples = g.sample(1000, 6, None, &mut rng::stream(2, rng::GEN_SAMPLE)).unwrap();
    let hits = samples.iter().filter(|s| **s == target).count();
    assert!(hits > 900, "{hits} of 1000");
}

/// Exact expected emission counts per token (including the end marker) by
/// enumerating every prefix up to the length cap.
fn expected_unigrams(g: &Generator, max_len: usize) -> Vec<f64> {
    let v = g.config.vocab_size;
    let mut counts = vec![0.0; v];
    let mut frontier: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    for _ in 0..max_len {
        let prefixes: Vec<Sentence> = frontier.iter().map(|(p, _)| Sentence(p.clone())).collect();
        let dists = g.step_distributions(&SentenceBatch::new(prefixes).unwrap()).unwrap();
        let mut next = Vec::new();
        for ((p, mass), d) in frontier.iter().zip(dists) {
            let step = d.last().unwrap();
            for (tok, &q) in step.iter().enumerate() {
                counts[tok] += mass * q;
                if tok as TokenId != END {
                    let mut np = p.clone();
                    np.push(tok as TokenId);
                    next.push((np, mass * q));
                }
            }
        }
        frontier = next;
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

#[test]
fn sampled_unigrams_match_exact_marginals() {
    let g = small_generator(6, 4);
    let max_len = 3;
    let exact = expected_unigrams(&g, max_len);
    let samples = g.sample(100_000, max_len, None, &mut rng::stream(5, rng::GEN_SAMPLE)).unwrap();
    let mut counts = vec![0.0; 6];
    for s in &samples {
        for &t in &s.0 {
            counts[t as usize] += 1.0;
        }
        if s.len() < max_len {
            counts[END as usize] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let empirical: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let tv = total_variation(&exact, &empirical);
    assert!(tv < 0.02, "total variation {tv}");
}

#[test]
fn separable_data_is_learned_by_the_discriminator() {
    let vocab = Vocabulary::synthetic(2);
    let real = Corpus::new(vec![Sentence(vec![4; 4]); 100], vocab).unwrap();
    // A generator whose logits force token 5 at every step.
    let gcfg = GeneratorConfig { vocab_size: 6, embed_dim: 2, hidden_dim: 2, layers: 1, conditional: false };
    let mut g = Generator::zeros(gcfg).unwrap();
    let b = g.params.find("gen.out_b").unwrap();
    let mut bias = vec![-50.0; 6];
    bias[5] = 50.0;
    *g.params.value_mut(b) = Tensor::row(bias).unwrap();

    let dcfg = DiscriminatorConfig { vocab_size: 6, embed_dim: 4, hidden_dim: 8 };
    let mut d = Discriminator::new(dcfg, &mut rng::stream(1, rng::DISC_INIT)).unwrap();
    let losses =
        pretrain_discriminator(&mut d, &g, &real, 10, 10, 0.01, 4, &mut rng::stream(1, rng::DISC_DATA)).unwrap();
    assert!(*losses.last().unwrap() < 0.05, "{losses:?}");
    let r = d.score(&SentenceBatch::new(sents(&[&[4, 4, 4, 4]])).unwrap()).unwrap()[0];
    let f = d.score(&SentenceBatch::new(sents(&[&[5, 5, 5, 5]])).unwrap()).unwrap()[0];
    assert!(r > 0.9 && f < 0.1, "real {r}, fake {f}");
}

#[test]
fn models_are_shareable_across_threads() {
    fn assert_sync<T: Send + Sync>() {}
    assert_sync::<Generator>();
    assert_sync::<Discriminator>();
}
