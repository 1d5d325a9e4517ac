// SPDX-License-Identifier: Apache-2.0

//! Adversarial reward augmented maximum likelihood (ARAML) for discrete
//! sequence generators, with the baseline trainers and evaluation metrics
//! used to compare them.

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod hmm;
pub mod metrics;
pub mod models;
pub mod ngram;
pub mod rng;
pub mod sampler;
pub mod trainers;

pub use error::{Error, Result};
