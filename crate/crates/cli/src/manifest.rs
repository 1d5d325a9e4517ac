// SPDX-License-Identifier: Apache-2.0

//! Run manifests: everything needed to reproduce an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config;
use crate::error::{CliError, CliResult};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    /// (file name, sha256 hex) of every input read.
    pub inputs: Vec<(String, String)>,
    pub output_dir: PathBuf,
    pub tool_version: String,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, output_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            output_dir: output_dir.to_path_buf(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            ..Default::default()
        }
    }

    pub fn add_input(&mut self, name: &str, path: &Path) -> CliResult<()> {
        let digest = sha256_file(path)?;
        self.inputs.push((name.to_string(), digest));
        Ok(())
    }

    /// `key = value` text; config keys carry a `config.` prefix so the file
    /// can be passed back as `--config`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "tool_version = {}", self.tool_version);
        let _ = writeln!(out, "output_dir = {}", self.output_dir.display());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "seeds = {}", seeds.join(","));
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k} = {v}");
        }
        for (k, v) in &self.inputs {
            let _ = writeln!(out, "input.{k} = sha256:{v}");
        }
        out
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let pairs = config::parse_pairs(text)?;
        let mut m = RunManifest::default();
        for (k, v) in pairs {
            match k.as_str() {
                "command" => m.command = v,
                "tool_version" => m.tool_version = v,
                "output_dir" => m.output_dir = PathBuf::from(v),
                "seeds" => {
                    m.seeds = v
                        .split(',')
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse().map_err(|_| CliError::io(format!("bad seed {s:?} in manifest"))))
                        .collect::<CliResult<_>>()?
                }
                _ => {
                    if let Some(c) = k.strip_prefix("config.") {
                        m.config.push((c.to_string(), v));
                    } else if let Some(i) = k.strip_prefix("input.") {
                        let d = v.strip_prefix("sha256:").unwrap_or(&v).to_string();
                        m.inputs.push((i.to_string(), d));
                    } else {
                        return Err(CliError::io(format!("unknown manifest key {k:?}")));
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let p = dir.join(FILE_NAME);
        fs::write(&p, self.to_text()).map_err(|e| CliError::io(format!("{}: {e}", p.display())))
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let p = dir.join(FILE_NAME);
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        Self::from_text(&text)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        config::lookup(&self.config, key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut m = RunManifest::new("train", Path::new("/tmp/x"));
        m.seeds = vec![1, 5];
        m.config = vec![("tau".into(), "0.85".into())];
        m.inputs = vec![("train.txt".into(), "ab12".into())];
        let back = RunManifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config_value("tau"), Some("0.85"));
    }

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
