// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Named trainable tensors, each with an optional gradient slot.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform(-scale, scale) initialisation.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = if scale > 0.0 {
            (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect()
        } else {
            vec![0.0; rows * cols]
        };
        self.insert(name, Tensor::from_raw(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    /// Sets every gradient slot to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.rows(), p.value.cols()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        let slot = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.rows(), p.value.cols()));
        for (s, &x) in slot.data_mut().iter_mut().zip(g) {
            *s += x;
        }
    }

    /// Every parameter value concatenated, in insertion order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Every gradient concatenated; missing slots read as zero.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| match &p.grad {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; p.value.len()],
            })
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// FNV-1a over the bit patterns of every value; used to prove that a
    /// parameter snapshot was not touched.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325_u64;
        for v in self.params.iter().flat_map(|p| p.value.data()) {
            for b in v.to_bits().to_le_bytes() {
                hash ^= u64::from(b);
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.flat_values()
            .iter()
            .zip(other.flat_values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes the store plus string metadata.
    ///
    /// Layout (little endian): magic `ARAMLCKP`, u32 version, u32 metadata
    /// count, then `(u32 len, key bytes, u32 len, value bytes)` pairs, u32
    /// parameter count, then per parameter `u32 len, name, u64 rows, u64
    /// cols, rows*cols f64`.
    pub fn write_checkpoint<W: Write>(
        &self,
        mut out: W,
        meta: &BTreeMap<String, String>,
    ) -> Result<()> {
        fn put_str<W: Write>(out: &mut W, s: &str) -> std::io::Result<()> {
            out.write_all(&(s.len() as u32).to_le_bytes())?;
            out.write_all(s.as_bytes())
        }
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(meta.len() as u32).to_le_bytes())?;
        for (k, v) in meta {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            put_str(&mut out, &p.name)?;
            out.write_all(&(p.value.rows() as u64).to_le_bytes())?;
            out.write_all(&(p.value.cols() as u64).to_le_bytes())?;
            for v in p.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ParamStore, BTreeMap<String, String>)> {
        fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        fn get_str<R: Read>(r: &mut R) -> Result<String> {
            let len = get_u32(r)? as usize;
            let mut b = vec![0u8; len];
            r.read_exact(&mut b)?;
            String::from_utf8(b).map_err(|e| Error::format("checkpoint", e.to_string()))
        }
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = get_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..get_u32(&mut input)? {
            let k = get_str(&mut input)?;
            let v = get_str(&mut input)?;
            meta.insert(k, v);
        }
        let mut store = ParamStore::new();
        for _ in 0..get_u32(&mut input)? {
            let name = get_str(&mut input)?;
            let rows = get_u64(&mut input)? as usize;
            let cols = get_u64(&mut input)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 8];
                input.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let t = Tensor::new(rows, cols, data)
                .map_err(|e| Error::format("checkpoint", e.to_string()))?;
            if store.find(&name).is_some() {
                return Err(Error::format("checkpoint", format!("duplicate parameter {name}")));
            }
            store.insert(&name, t);
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, meta)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(bytes.as_slice())
    }

    /// Copies values from `other` by name; shapes must agree.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::input(format!("checkpoint lacks parameter {}", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "assign",
                    lhs: p.value.shape(),
                    rhs: src.shape(),
                });
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ARAMLCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn without_clipping(mut self) -> Self {
        self.clip_norm = None;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One Adam update of every parameter; gradients are cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::contract(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::contract(format!("missing gradient for {}", p.name)));
        }
        if self.m.is_empty() {
            self.m = store.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.params.len() {
            return Err(Error::contract("optimizer state does not match parameter store"));
        }
        let mut scale = 1.0;
        if let Some(max_norm) = self.clip_norm {
            let sq: f64 = store
                .params
                .iter()
                .flat_map(|p| p.grad.as_ref().unwrap().data())
                .map(|g| g * g)
                .sum();
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params.iter_mut().enumerate() {
            let g = p.grad.take().unwrap();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = one_param(0.75);
        let mut adam = Adam::new(0.001);
        s.zero_grad();
        adam.step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 0.75);
        assert!(s.grad(id).is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = one_param(0.0);
        let mut adam = Adam::new(0.001);
        s.zero_grad();
        s.accumulate_grad(id, &[1.0]);
        adam.step(&mut s).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let (mut s, _) = one_param(1.0);
        let mut adam = Adam::new(0.001);
        assert!(matches!(adam.step(&mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn identical_states_step_identically() {
        let run = || {
            let (mut s, id) = one_param(0.3);
            let mut adam = Adam::new(0.01);
            for k in 0..5 {
                s.zero_grad();
                s.accumulate_grad(id, &[0.5 + k as f64]);
                adam.step(&mut s).unwrap();
            }
            s.value(id).item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::zeros(1, 2));
        s.zero_grad();
        s.accumulate_grad(a, &[30.0, 40.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut s).unwrap();
        // With clipping the first Adam step is still ±lr per component.
        let v = s.value(a).data();
        assert!((v[0] + 0.1).abs() < 1e-6 && (v[1] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut s = ParamStore::new();
        s.insert("emb", Tensor::new(2, 3, vec![0.1, -2.5, 1e-300, 3.0, f64::MIN_POSITIVE, 7.0]).unwrap());
        s.insert("bias", Tensor::row(vec![0.1 + 0.2]).unwrap());
        let mut meta = BTreeMap::new();
        meta.insert("vocab_digest".to_string(), "abc".to_string());
        let mut first = Vec::new();
        s.write_checkpoint(&mut first, &meta).unwrap();
        let (loaded, meta2) = ParamStore::read_checkpoint(first.as_slice()).unwrap();
        let mut second = Vec::new();
        loaded.write_checkpoint(&mut second, &meta2).unwrap();
        assert_eq!(first, second);
        assert_eq!(loaded.checksum(), s.checksum());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        assert!(ParamStore::read_checkpoint(&b"NOTACKPT...."[..]).is_err());
    }
}
