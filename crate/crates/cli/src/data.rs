// SPDX-License-Identifier: Apache-2.0

//! Loading a directory written by `araml prepare`.

use std::path::{Path, PathBuf};

use araml_core::corpus::{Corpus, Vocabulary};
use araml_core::ngram::NGramLm;

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::prepare::{LM_FILE, TEST_FILE, TRAIN_FILE, VOCAB_FILE};

pub struct Prepared {
    pub dir: PathBuf,
    pub vocab: Vocabulary,
    pub train: Corpus,
    pub test: Corpus,
    pub lm_order: usize,
    pub lm_k: f64,
}

impl Prepared {
    pub fn load(dir: &Path) -> CliResult<Self> {
        if !dir.join(VOCAB_FILE).exists() {
            return Err(CliError::io(format!(
                "{} is not a prepared data directory; run `araml prepare` first",
                dir.display()
            )));
        }
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let train = Corpus::load_with_vocab(&dir.join(TRAIN_FILE), &vocab)?;
        let test = Corpus::load_with_vocab(&dir.join(TEST_FILE), &vocab)?;
        let manifest = RunManifest::load(dir).ok();
        let lookup = |key: &str| manifest.as_ref().and_then(|m| m.config_value(key).map(str::to_string));
        let lm_order = lookup("lm_order").and_then(|v| v.parse().ok()).unwrap_or(3);
        let lm_k = lookup("lm_k").and_then(|v| v.parse().ok()).unwrap_or(0.1);
        Ok(Prepared { dir: dir.to_path_buf(), vocab, train, test, lm_order, lm_k })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn lm_path(&self) -> PathBuf {
        self.file(LM_FILE)
    }

    /// Loads an LM and checks it covers this vocabulary.
    pub fn load_lm(&self, path: &Path) -> CliResult<NGramLm> {
        let lm = NGramLm::load(path)?;
        if lm.vocab_size() != self.vocab.len() {
            return Err(CliError::usage(format!(
                "{} was trained over {} tokens but the vocabulary has {}",
                path.display(),
                lm.vocab_size(),
                self.vocab.len()
            )));
        }
        Ok(lm)
    }

    pub fn longest_sentence(&self) -> usize {
        self.train.sentences.iter().map(|s| s.len()).max().unwrap_or(1).max(1)
    }
}
