// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

use araml_core::autodiff::{ParamStore, Tape, Var};
use araml_core::corpus::{Sentence, TokenId};
use araml_core::Result;

pub const FD_STEP: f64 = 1e-3;

/// Per parameter tensor: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// with central differences of step [`FD_STEP`].
pub fn gradient_errors<M: Clone>(
    model: &M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M, &mut Tape) -> Result<Var>,
) -> Vec<(String, f64)> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let root = loss(&m, &mut tape).unwrap();
    store(&mut m).zero_grad();
    tape.backward(root, store(&mut m)).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = {
        let s = store(&mut m);
        s.ids()
            .map(|id| (s.name(id).to_string(), s.grad(id).unwrap().data().to_vec()))
            .collect()
    };
    let eval = |m: &M| {
        let mut t = Tape::new();
        let v = loss(m, &mut t).unwrap();
        t.value(v).item()
    };
    let mut work = model.clone();
    let ids: Vec<_> = store(&mut work).ids().collect();
    let mut out = Vec::new();
    for (k, id) in ids.into_iter().enumerate() {
        let len = store(&mut work).value(id).len();
        let mut numeric = vec![0.0; len];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = store(&mut work).value(id).data()[j];
            store(&mut work).value_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            store(&mut work).value_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            store(&mut work).value_mut(id).data_mut()[j] = orig;
            *n = (up - down) / (2.0 * FD_STEP);
        }
        let (name, a) = &analytic[k];
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(&numeric));
        let err = if scale < 1e-9 { norm(&diff) } else { norm(&diff) / scale };
        out.push((name.clone(), err));
    }
    out
}

pub fn worst(errors: &[(String, f64)]) -> (String, f64) {
    errors
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |acc, e| if e.1 > acc.1 { e } else { acc })
}

pub fn sents(rows: &[&[TokenId]]) -> Vec<Sentence> {
    rows.iter().map(|r| Sentence(r.to_vec())).collect()
}

/// Total variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `(name, corpus, [bleu2, bleu3, bleu4])` computed with NLTK.
pub fn bleu_fixtures() -> Vec<(String, Vec<Sentence>, [f64; 3])> {
    let text = include_str!("../fixtures/self_bleu.txt");
    let mut out = Vec::new();
    let mut name = String::new();
    let mut corpus = Vec::new();
    for line in text.lines() {
        let (tag, rest) = line.split_once(' ').unwrap();
        match tag {
            "corpus" => name = rest.to_string(),
            "s" => corpus.push(Sentence(rest.split(' ').map(|t| t.parse().unwrap()).collect())),
            "bleu" => {
                let v: Vec<f64> = rest.split(' ').map(|t| t.parse().unwrap()).collect();
                out.push((name.clone(), std::mem::take(&mut corpus), [v[0], v[1], v[2]]));
            }
            _ => panic!("bad fixture line {line}"),
        }
    }
    out
}
