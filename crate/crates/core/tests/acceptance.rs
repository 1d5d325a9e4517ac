// SPDX-License-Identifier: Apache-2.0

//! Acceptance criteria at pinned tolerances. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails. `ARAML_ACCEPTANCE=1,5` runs a
//! subset.

mod common;

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use araml_core::corpus::{train_test_split, Corpus, Sentence, TokenId, NUM_SPECIAL};
use araml_core::hmm::{generate_hmm_corpus, HmmOracle};
use araml_core::metrics::{reverse_perplexity, self_bleu, stability_stats, LmSettings, StabilityReport};
use araml_core::models::{
    discriminator_loss_var, mle_loss_var, policy_gradient_loss_var, weighted_mle_loss_var, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig, SentenceBatch,
};
use araml_core::rng;
use araml_core::sampler::{
    count_sentences, hamming_audit, EditDistanceDistribution, Sampler, SamplerConfig, Strategy,
};
use araml_core::trainers::{pretrain, train, train_from, Pretrained, TrainData, TrainRun, TrainerKind, TrainingConfig};
use common::{bleu_fixtures, gradient_errors, sents, total_variation, worst};
use num_bigint::BigUint;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// Criterion 1.

const C1_DRAWS: usize = 1_000_000;

/// Exact perturbation distribution by enumerating all `V^m` sentences.
fn enumerate_perturbations(x: &[usize], v: usize, tau: f64) -> Vec<f64> {
    let m = x.len();
    let n = v.pow(m as u32);
    let mut p: Vec<f64> = (0..n)
        .map(|code| {
            let mut c = code;
            let mut d = 0;
            for &xi in x {
                if c % v != xi {
                    d += 1;
                }
                c /= v;
            }
            (-(d as f64) / tau).exp()
        })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|q| *q /= z);
    p
}

fn criterion_1() -> Outcome {
    let mut worst_tv: f64 = 0.0;
    let mut worst_case = String::new();
    let mut cases = 0;
    for m in 1..=3usize {
        for v in 2..=4usize {
            for tau in [0.5, 0.85, 2.0] {
                let x: Vec<usize> = (0..m).map(|i| (i * 7 + 1) % v).collect();
                let source = Sentence(x.iter().map(|&k| (NUM_SPECIAL + k) as TokenId).collect());
                let exact = enumerate_perturbations(&x, v, tau);
                let cfg = SamplerConfig { tau, strategy: Strategy::Random, samples_per_datum: 1, max_edit_cap: None };
                let mut sampler = Sampler::new(cfg, NUM_SPECIAL + v, None).unwrap();
                let mut r = rng::indexed_stream(1, "acceptance-sampler", cases);
                let mut counts = vec![0usize; exact.len()];
                for _ in 0..C1_DRAWS {
                    let s = sampler.sample(0, &source, &mut r).unwrap();
                    let code = s.perturbed.0.iter().rev().fold(0, |acc, &t| acc * v + (t as usize - NUM_SPECIAL));
                    counts[code] += 1;
                }
                let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / C1_DRAWS as f64).collect();
                let tv = total_variation(&exact, &empirical);
                if tv > worst_tv {
                    worst_tv = tv;
                    worst_case = format!("m={m} |V|={v} tau={tau}");
                }
                cases += 1;
            }
        }
    }
    outcome(
        worst_tv <= 0.01,
        format!("worst TV {worst_tv:.5} ({worst_case}) over {cases} cases, {C1_DRAWS} draws each, tolerance 0.01"),
    )
}

// Criterion 2.

fn binomial(n: u64, k: u64) -> u64 {
    (1..=k).fold(1, |acc, i| acc * (n - k + i) / i)
}

fn direct_distance_distribution(m: usize, v: usize, tau: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..=m)
        .map(|e| binomial(m as u64, e as u64) as f64 * ((v - 1) as f64).powi(e as i32) * (-(e as f64) / tau).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

fn criterion_2() -> Outcome {
    let hand = [(1, 2, 1.0, vec![0.7311, 0.2689]), (2, 3, 0.85, vec![0.3826, 0.4719, 0.1455])];
    let mut hand_err: f64 = 0.0;
    let mut direct_err: f64 = 0.0;
    for (m, v, tau, want) in &hand {
        let got = EditDistanceDistribution::new(*m, *v, *tau, None).unwrap();
        let direct = direct_distance_distribution(*m, *v, *tau);
        for ((g, w), d) in got.probs().iter().zip(want).zip(&direct) {
            hand_err = hand_err.max((g - w).abs()).max((d - w).abs());
            direct_err = direct_err.max((g - d).abs());
        }
    }
    for m in 1..=12 {
        for v in [2, 3, 5, 20] {
            for tau in [0.3, 0.85, 1.0, 4.0] {
                let got = EditDistanceDistribution::new(m, v, tau, None).unwrap();
                let direct = direct_distance_distribution(m, v, tau);
                for (g, d) in got.probs().iter().zip(&direct) {
                    direct_err = direct_err.max((g - d).abs());
                }
            }
        }
    }
    let mut count_err: f64 = 0.0;
    for m in 0..=20usize {
        for v in [2usize, 3, 7, 20, 100, 5000] {
            for e in 0..=m {
                let choose = (1..=e).fold(BigUint::from(1u32), |acc, i| acc * BigUint::from(m - e + i) / BigUint::from(i));
                let exact = choose * BigUint::from(v - 1).pow(e as u32);
                let exact: f64 = exact.to_string().parse().unwrap();
                let got = count_sentences(e, m, v).unwrap().exp();
                count_err = count_err.max((got - exact).abs() / exact);
            }
        }
    }
    outcome(
        hand_err <= 1e-4 && direct_err <= 1e-4 && count_err <= 1e-9,
        format!(
            "hand cases max error {hand_err:.2e}, direct recomputation max error {direct_err:.2e} (tol 1e-4), \
             c(e,m) vs big integers max relative error {count_err:.2e} for m <= 20 (tol 1e-9)"
        ),
    )
}

// Criterion 3.

fn criterion_3() -> Outcome {
    let hmm = HmmOracle::random(5, 20, 7.0, 3).unwrap();
    let corpus = generate_hmm_corpus(&hmm, 10_000, 12, 3).unwrap();
    let lm = araml_core::ngram::NGramLm::train(&corpus.sentences, 3, 0.1, corpus.vocab.len()).unwrap();
    let mut r = rng::stream(3, "acceptance-audit");
    let random_corpus: Vec<Sentence> = (0..10_000)
        .map(|_| {
            let len = r.random_range(0..=15);
            Sentence((0..len).map(|_| r.random_range(NUM_SPECIAL as TokenId..24)).collect())
        })
        .collect();
    let mut total = 0usize;
    let mut violations = 0usize;
    let jobs: [(&[Sentence], Strategy, f64); 4] = [
        (&corpus.sentences, Strategy::Constrained, 0.85),
        (&corpus.sentences, Strategy::Random, 0.5),
        (&random_corpus, Strategy::Random, 2.0),
        (&random_corpus, Strategy::Constrained, 1.2),
    ];
    for (sentences, strategy, tau) in jobs {
        let cfg = SamplerConfig { tau, strategy, samples_per_datum: 25, max_edit_cap: None };
        let mut sampler = Sampler::new(cfg, 24, Some(&lm)).unwrap();
        let items: Vec<(usize, &Sentence)> = sentences.iter().enumerate().collect();
        let samples = sampler.augment(&items, &mut r).unwrap();
        violations += hamming_audit(&samples);
        total += samples.len();
    }
    outcome(violations == 0 && total >= 1_000_000, format!("{violations} violations over {total} augmented samples"))
}

// Criterion 4.

fn scaled<M>(mut model: M, store: impl Fn(&mut M) -> &mut araml_core::autodiff::ParamStore) -> M {
    let s = store(&mut model);
    for id in s.ids().collect::<Vec<_>>() {
        s.value_mut(id).data_mut().iter_mut().for_each(|x| *x *= 5.0);
    }
    model
}

fn criterion_4() -> Outcome {
    let mut results: Vec<(String, f64)> = Vec::new();
    let mut push = |label: &str, errs: Vec<(String, f64)>| {
        let (name, e) = worst(&errs);
        results.push((format!("{label}/{name}"), e));
    };
    for (conditional, layers) in [(false, 1), (false, 2), (true, 2)] {
        let cfg = GeneratorConfig { vocab_size: 10, embed_dim: 5, hidden_dim: 8, layers, conditional };
        let g = scaled(Generator::new(cfg, &mut rng::stream(40 + layers as u64, "acceptance-fd")).unwrap(), |g| {
            &mut g.params
        });
        let responses = sents(&[&[4, 5, 6, 9], &[7], &[8, 8, 4], &[]]);
        let batch = if conditional {
            SentenceBatch::with_contexts(sents(&[&[4, 9], &[5, 6, 7], &[], &[8]]), responses).unwrap()
        } else {
            SentenceBatch::new(responses).unwrap()
        };
        let tag = format!("{}{layers}", if conditional { "cond" } else { "uncond" });
        push(
            &format!("mle-{tag}"),
            gradient_errors(&g, |g| &mut g.params, |g, t| {
                let lp = g.log_prob_var(t, &batch)?;
                mle_loss_var(t, lp)
            }),
        );
        push(
            &format!("weighted-mle-{tag}"),
            gradient_errors(&g, |g| &mut g.params, |g, t| {
                let lp = g.log_prob_var(t, &batch)?;
                weighted_mle_loss_var(t, lp, &[0.1, 0.4, 0.3, 0.2])
            }),
        );
        push(
            &format!("policy-gradient-{tag}"),
            gradient_errors(&g, |g| &mut g.params, |g, t| {
                let lp = g.log_prob_var(t, &batch)?;
                policy_gradient_loss_var(t, lp, &[0.9, 0.1, 0.5, 0.3])
            }),
        );
    }
    let dcfg = DiscriminatorConfig { vocab_size: 10, embed_dim: 5, hidden_dim: 8 };
    let d = scaled(Discriminator::new(dcfg, &mut rng::stream(44, "acceptance-fd")).unwrap(), |d| &mut d.params);
    let real = SentenceBatch::new(sents(&[&[4, 5, 6], &[9, 9]])).unwrap();
    let fake = SentenceBatch::new(sents(&[&[7, 7, 7, 7], &[4], &[]])).unwrap();
    push(
        "discriminator",
        gradient_errors(&d, |d| &mut d.params, |d, t| {
            let r = d.score_var(t, &real)?;
            let f = d.score_var(t, &fake)?;
            discriminator_loss_var(t, r, f)
        }),
    );
    let (name, e) = results.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    outcome(
        e <= 1e-4,
        format!("{} loss/model combinations, worst relative error {e:.2e} ({name}), tolerance 1e-4, hidden 8", results.len()),
    )
}

// Criterion 5.

fn small_data(config: &TrainingConfig) -> TrainData {
    let h = HmmOracle::random(3, 6, 4.0, 3).unwrap();
    let c = generate_hmm_corpus(&h, 300, 6, 5).unwrap();
    let (train, test) = train_test_split(&c, 0.2, 1).unwrap();
    TrainData::new(train, test, config).unwrap()
}

fn criterion_5() -> Outcome {
    let base = TrainingConfig {
        iterations: 50,
        batch_size: 10,
        lr_g: 0.01,
        lr_d: 0.01,
        pretrain_g_epochs: Some(2),
        pretrain_d_epochs: Some(2),
        embed_dim: 8,
        hidden_dim: 8,
        eval_samples: 100,
        bleu_samples: 30,
        eval_every: Some(10),
        seed: 5,
        ..TrainingConfig::default()
    };
    let data = small_data(&base);
    let run = |cfg: TrainingConfig| train(&cfg, &data).unwrap();
    let frozen = run(TrainingConfig { trainer: TrainerKind::Araml, freeze_discriminator: true, ..base.clone() });
    let raml = run(TrainingConfig { trainer: TrainerKind::Raml, ..base.clone() });
    let cold = run(TrainingConfig {
        trainer: TrainerKind::Raml,
        sampler: SamplerConfig { tau: 1e-3, ..base.sampler.clone() },
        ..base.clone()
    });
    let mle = run(TrainingConfig { trainer: TrainerKind::Mle, ..base.clone() });
    let a = frozen.generator.params.max_abs_diff(&raml.generator.params);
    let b = cold.generator.params.max_abs_diff(&mle.generator.params);
    let updates = [&frozen, &raml, &cold, &mle].iter().map(|r| r.stats.g_updates).min().unwrap();
    outcome(
        a <= 1e-12 && b <= 1e-12 && updates >= 50,
        format!(
            "after {updates} updates: frozen-D ARAML vs RAML max |diff| {a:.1e}, RAML(tau=1e-3) vs MLE max |diff| {b:.1e}, tolerance 1e-12"
        ),
    )
}

// Criteria 6 to 9 share the oracle corpus and per-seed pretraining.

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Shared {
    data: TrainData,
    base: TrainingConfig,
    pretrained: HashMap<u64, Pretrained>,
    araml: Vec<TrainRun>,
}

fn shared() -> Shared {
    let hmm = HmmOracle::random(5, 20, 7.0, 7).unwrap();
    let corpus: Corpus = generate_hmm_corpus(&hmm, 10_000, 12, 1).unwrap();
    let (train_split, test_split) = train_test_split(&corpus, 0.1, 1).unwrap();
    let base = TrainingConfig {
        trainer: TrainerKind::Araml,
        iterations: 200,
        embed_dim: 32,
        hidden_dim: 32,
        pretrain_g_epochs: Some(10),
        pretrain_d_epochs: Some(15),
        ..TrainingConfig::default()
    };
    let data = TrainData::new(train_split, test_split, &base).unwrap();
    let t = Instant::now();
    let pretrained: HashMap<u64, Pretrained> =
        SEEDS.iter().map(|&s| (s, pretrain(&TrainingConfig { seed: s, ..base.clone() }, &data).unwrap())).collect();
    println!("  (pretrained {} seeds in {:.0}s)", SEEDS.len(), t.elapsed().as_secs_f64());
    let mut s = Shared { data, base, pretrained, araml: Vec::new() };
    s.araml = s.runs(&s.base.clone());
    s
}

impl Shared {
    fn runs(&self, config: &TrainingConfig) -> Vec<TrainRun> {
        SEEDS
            .iter()
            .map(|&seed| {
                let cfg = TrainingConfig { seed, ..config.clone() };
                let run = train_from(&cfg, &self.data, self.pretrained[&seed].clone(), &mut |_, _, _| Ok(())).unwrap();
                assert!(run.failure.is_none(), "{:?}", run.failure);
                run
            })
            .collect()
    }
}

fn per_seed_final(run: &TrainRun, metric: &str) -> f64 {
    let w = araml_core::metrics::FINAL_WINDOW.min(run.records.len());
    let tail = &run.records[run.records.len() - w..];
    tail.iter().map(|r| araml_core::metrics::metric_value(r, metric).unwrap()).sum::<f64>() / w as f64
}

fn criterion_6(s: &Shared) -> Outcome {
    let pg = s.runs(&TrainingConfig { trainer: TrainerKind::PolicyGradient, ..s.base.clone() });
    let a: StabilityReport = stability_stats(&s.araml).unwrap();
    let p: StabilityReport = stability_stats(&pg).unwrap();
    let get = |r: &StabilityReport, m: &str| {
        let x = r.summary(m).unwrap();
        (x.mean, x.std)
    };
    let (af, ar, pf, pr) = (get(&a, "ppl_f"), get(&a, "ppl_r"), get(&p, "ppl_f"), get(&p, "ppl_r"));
    outcome(
        af.1 < pf.1 && ar.1 < pr.1,
        format!(
            "final-window std PPL-F araml {:.3} vs seqgan-pg {:.3}; PPL-R araml {:.3} vs seqgan-pg {:.3} \
             (means: PPL-F {:.2} vs {:.2}, PPL-R {:.2} vs {:.2}; {} seeds, {} iterations)",
            af.1,
            pf.1,
            ar.1,
            pr.1,
            af.0,
            pf.0,
            ar.0,
            pr.0,
            SEEDS.len(),
            s.base.iterations
        ),
    )
}

fn criterion_7(s: &Shared) -> Outcome {
    let gen = &s.pretrained[&SEEDS[0]].generator;
    let max_len = s.data.train.sentences.iter().map(Sentence::len).max().unwrap();
    let samples = gen.sample(500, max_len, None, &mut rng::stream(7, "acceptance-collapse")).unwrap();
    let collapsed = vec![samples[0].clone(); samples.len()];
    let settings = LmSettings { order: s.base.lm_order, k: s.base.lm_k, vocab_size: s.data.vocab_size() };
    let diverse = reverse_perplexity(&s.data.test.sentences, &samples, settings).unwrap();
    let single = reverse_perplexity(&s.data.test.sentences, &collapsed, settings).unwrap();
    let sb = self_bleu(&collapsed[..50], 2).unwrap()[0];
    outcome(
        single > diverse,
        format!("PPL-R collapsed {single:.2} vs pretrained MLE generator {diverse:.2} (collapsed Self-BLEU-2 {sb})"),
    )
}

fn criterion_8(s: &Shared) -> Outcome {
    let taus = [0.8, 0.9, 0.95];
    let mut sbleu = Vec::new();
    let mut pplf = Vec::new();
    let mut edits = Vec::new();
    let content = s.data.vocab_size() - NUM_SPECIAL;
    for tau in taus {
        edits.push(EditDistanceDistribution::new(7, content, tau, None).unwrap().expectation() / 7.0);
        let cfg = TrainingConfig { sampler: SamplerConfig { tau, ..s.base.sampler.clone() }, ..s.base.clone() };
        let report = stability_stats(&s.runs(&cfg)).unwrap();
        sbleu.push(report.summary("sbleu2").unwrap().mean);
        pplf.push(report.summary("ppl_f").unwrap().mean);
    }
    let mut violations = 0;
    for i in 0..2 {
        if sbleu[i + 1] > sbleu[i] {
            violations += 1;
        }
        if pplf[i + 1] < pplf[i] {
            violations += 1;
        }
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    outcome(
        violations <= 1,
        format!(
            "tau 0.8/0.9/0.95: mean Self-BLEU-2 [{}], mean PPL-F [{}]; {violations} of 4 pairs violate, 1 allowed \
             (expected fraction of words edited at length 7: [{}])",
            fmt(&sbleu),
            fmt(&pplf),
            fmt(&edits)
        ),
    )
}

fn criterion_9(s: &Shared) -> Outcome {
    let cfg =
        TrainingConfig { sampler: SamplerConfig { strategy: Strategy::Random, ..s.base.sampler.clone() }, ..s.base.clone() };
    let random = s.runs(&cfg);
    let pairs: Vec<(f64, f64)> =
        s.araml.iter().zip(&random).map(|(c, r)| (per_seed_final(c, "ppl_f"), per_seed_final(r, "ppl_f"))).collect();
    let wins = pairs.iter().filter(|(c, r)| c < r).count();
    let fmt = pairs.iter().map(|(c, r)| format!("{c:.2}/{r:.2}")).collect::<Vec<_>>().join(", ");
    outcome(
        wins * 2 > SEEDS.len(),
        format!("constrained beats random on PPL-F in {wins} of {} seeds (constrained/random: {fmt})", SEEDS.len()),
    )
}

// Criterion 10.

/// `P(x)` summed over every hidden state path.
fn path_enumeration(h: &HmmOracle, x: &[usize]) -> f64 {
    let s = h.num_states();
    let n = x.len();
    let mut total = 0.0;
    for code in 0..s.pow(n as u32) {
        let path: Vec<usize> = (0..n).map(|i| (code / s.pow(i as u32)) % s).collect();
        let mut p = h.initial[path[0]] * h.emission[path[0]][x[0]];
        for i in 1..n {
            p *= (1.0 - h.termination) * h.transition[path[i - 1]][path[i]] * h.emission[path[i]][x[i]];
        }
        total += p * h.termination;
    }
    total
}

fn criterion_10() -> Outcome {
    let mut bleu_err: f64 = 0.0;
    let fixtures = bleu_fixtures();
    for (_, corpus, want) in &fixtures {
        let got = self_bleu(corpus, 4).unwrap();
        for n in 0..3 {
            bleu_err = bleu_err.max((got[n] - want[n]).abs());
        }
    }
    let mut nll_err: f64 = 0.0;
    let mut checked = 0;
    for (states, symbols, seed) in [(2, 3, 1), (3, 4, 2), (4, 5, 3), (5, 6, 4)] {
        let h = HmmOracle::random(states, symbols, 3.0, seed).unwrap();
        let mut r = rng::stream(seed, "acceptance-forward");
        for len in 1..=6 {
            for _ in 0..5 {
                let x: Vec<usize> = (0..len).map(|_| r.random_range(0..symbols)).collect();
                let s = Sentence(x.iter().map(|&k| (NUM_SPECIAL + k) as TokenId).collect());
                let forward = -h.log_prob(&s).unwrap();
                let exact = -path_enumeration(&h, &x).ln();
                nll_err = nll_err.max((forward - exact).abs());
                checked += 1;
            }
        }
    }
    outcome(
        bleu_err <= 1e-6 && nll_err <= 1e-9,
        format!(
            "Self-BLEU vs NLTK max error {bleu_err:.1e} on {} fixtures (tol 1e-6); forward NLL vs path \
             enumeration max error {nll_err:.1e} on {checked} sentences of length <= 6 (tol 1e-9)",
            fixtures.len()
        ),
    )
}

fn main() -> ExitCode {
    let selected: Option<Vec<usize>> = std::env::var("ARAML_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));
    let names = [
        "sampler exactness",
        "edit-distance distribution",
        "hamming audit",
        "gradient integrity",
        "degeneracy equivalences",
        "stability reproduction",
        "mode-collapse discrimination",
        "temperature trend",
        "sampling-strategy ablation",
        "metric oracles",
    ];
    let mut shared_state: Option<Shared> = None;
    let mut failed = 0;
    let mut ran = 0;
    for n in 1..=10 {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        if (6..=9).contains(&n) && shared_state.is_none() {
            shared_state = Some(shared());
        }
        let s = shared_state.as_ref();
        let o = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(s.unwrap()),
            7 => criterion_7(s.unwrap()),
            8 => criterion_8(s.unwrap()),
            9 => criterion_9(s.unwrap()),
            _ => criterion_10(),
        };
        ran += 1;
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {:<30} {}: {} [{:.1}s]",
            names[n - 1],
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
