// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable operations the tape can record.
#[derive(Clone, Debug)]
pub enum OpKind {
    MatMul,
    /// Elementwise sum with broadcasting over unit dimensions.
    Add,
    /// Elementwise product with broadcasting over unit dimensions.
    Mul,
    Sigmoid,
    Tanh,
    /// Row-wise softmax.
    Softmax,
    /// Row-wise log-softmax, fused for numerical range.
    LogSoftmax,
    Log,
    /// Row lookup: `inputs[0]` is the table, output row `i` is `table[ids[i]]`.
    Embedding(Vec<usize>),
    /// Column-wise concatenation of two tensors with equal row counts.
    Concat,
    Sum,
    Mean,
    ScalarMul(f64),
    /// Picks `input[i, cols[i]]` into an n×1 column.
    Gather(Vec<usize>),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Log => "log",
            OpKind::Embedding(_) => "embedding",
            OpKind::Concat => "concat",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ScalarMul(_) => "scalar_mul",
            OpKind::Gather(_) => "gather",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::Concat => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Source {
    Constant,
    Param(ParamId),
    Op(OpKind, [usize; 2]),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    source: Source,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so every input precedes its
/// consumers and the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

fn broadcast(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

#[inline]
fn bidx(shape: (usize, usize), i: usize, j: usize) -> usize {
    let r = if shape.0 == 1 { 0 } else { i };
    let c = if shape.1 == 1 { 0 } else { j };
    r * shape.1 + c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, source: Source) -> Var {
        self.nodes.push(Node { value, source });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Source::Constant)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&idx) = self.params.get(&id) {
            return Var(idx);
        }
        let v = self.push(store.value(id).clone(), Source::Param(id));
        self.params.insert(id, v.0);
        v
    }

    /// Records `kind` applied to `inputs` and returns the output node.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = kind.name();
        if inputs.len() != kind.arity() {
            return Err(Error::contract(format!(
                "{name} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        let a = &self.nodes[inputs[0].0].value;
        let out = match &kind {
            OpKind::MatMul => {
                let b = &self.nodes[inputs[1].0].value;
                if a.cols() != b.rows() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: a.shape(),
                        rhs: b.shape(),
                    });
                }
                let data = matmul_raw(a.data(), b.data(), a.rows(), a.cols(), b.cols());
                Tensor::from_raw(a.rows(), b.cols(), data)
            }
            OpKind::Add | OpKind::Mul => {
                let b = &self.nodes[inputs[1].0].value;
                let (sa, sb) = (a.shape(), b.shape());
                let (r, c) = broadcast(name, sa, sb)?;
                let (ad, bd) = (a.data(), b.data());
                let mut data = Vec::with_capacity(r * c);
                let add = matches!(kind, OpKind::Add);
                if sa == sb {
                    if add {
                        data.extend(ad.iter().zip(bd).map(|(x, y)| x + y));
                    } else {
                        data.extend(ad.iter().zip(bd).map(|(x, y)| x * y));
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            let (x, y) = (ad[bidx(sa, i, j)], bd[bidx(sb, i, j)]);
                            data.push(if add { x + y } else { x * y });
                        }
                    }
                }
                Tensor::from_raw(r, c, data)
            }
            OpKind::Sigmoid => map(a, sigmoid),
            OpKind::Tanh => map(a, f64::tanh),
            OpKind::Log => map(a, f64::ln),
            OpKind::ScalarMul(s) => {
                let s = *s;
                map(a, |x| x * s)
            }
            OpKind::Softmax | OpKind::LogSoftmax => {
                let mut data = vec![0.0; a.len()];
                for i in 0..a.rows() {
                    let out = &mut data[i * a.cols()..(i + 1) * a.cols()];
                    if matches!(kind, OpKind::Softmax) {
                        softmax_row(a.row_slice(i), out);
                    } else {
                        log_softmax_row(a.row_slice(i), out);
                    }
                }
                Tensor::from_raw(a.rows(), a.cols(), data)
            }
            OpKind::Embedding(ids) => {
                if ids.is_empty() {
                    return Err(Error::contract("embedding lookup with no ids"));
                }
                let mut data = Vec::with_capacity(ids.len() * a.cols());
                for &id in ids {
                    if id >= a.rows() {
                        return Err(Error::input(format!(
                            "token id {id} out of range for vocabulary of {}",
                            a.rows()
                        )));
                    }
                    data.extend_from_slice(a.row_slice(id));
                }
                Tensor::from_raw(ids.len(), a.cols(), data)
            }
            OpKind::Concat => {
                let b = &self.nodes[inputs[1].0].value;
                if a.rows() != b.rows() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: a.shape(),
                        rhs: b.shape(),
                    });
                }
                let cols = a.cols() + b.cols();
                let mut data = Vec::with_capacity(a.rows() * cols);
                for i in 0..a.rows() {
                    data.extend_from_slice(a.row_slice(i));
                    data.extend_from_slice(b.row_slice(i));
                }
                Tensor::from_raw(a.rows(), cols, data)
            }
            OpKind::Sum => Tensor::scalar(a.data().iter().sum()),
            OpKind::Mean => Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64),
            OpKind::Gather(cols) => {
                if cols.len() != a.rows() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: a.shape(),
                        rhs: (cols.len(), 1),
                    });
                }
                let mut data = Vec::with_capacity(cols.len());
                for (i, &c) in cols.iter().enumerate() {
                    if c >= a.cols() {
                        return Err(Error::input(format!(
                            "gather index {c} out of range for {} columns",
                            a.cols()
                        )));
                    }
                    data.push(a.get(i, c));
                }
                Tensor::from_raw(cols.len(), 1, data)
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut idx = [inputs[0].0, 0];
        if inputs.len() > 1 {
            idx[1] = inputs[1].0;
        }
        Ok(self.push(out, Source::Op(kind, idx)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    /// `a - b`, recorded as `a + (-1)·b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Tanh, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::LogSoftmax, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Log, &[a])
    }

    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.forward_op(OpKind::Embedding(ids), &[table])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Concat, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Mean, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.forward_op(OpKind::ScalarMul(s), &[a])
    }

    pub fn gather(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        self.forward_op(OpKind::Gather(cols), &[a])
    }

    /// Reverse sweep from a scalar `root`; adds `∂root/∂param` into the
    /// gradient slot of every parameter reached.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let root_shape = self.nodes[root.0].value.shape();
        if root_shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward root must be scalar, got {root_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.source {
                Source::Constant => {}
                Source::Param(id) => {
                    store.accumulate_grad(*id, &g);
                }
                Source::Op(kind, inputs) => {
                    self.backprop_op(kind, *inputs, &node.value, &g, &mut grads);
                }
            }
        }
        Ok(())
    }

    fn backprop_op(
        &self,
        kind: &OpKind,
        inputs: [usize; 2],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let a = &self.nodes[inputs[0]].value;
        match kind {
            OpKind::MatMul => {
                let b = &self.nodes[inputs[1]].value;
                let (n, k, m) = (a.rows(), a.cols(), b.cols());
                matmul_a_bt(g, b.data(), n, m, k, accumulate(&mut grads[inputs[0]], n * k));
                matmul_at_b(a.data(), g, n, k, m, accumulate(&mut grads[inputs[1]], k * m));
            }
            OpKind::Add | OpKind::Mul => {
                let b = &self.nodes[inputs[1]].value;
                let (sa, sb) = (a.shape(), b.shape());
                let (r, c) = out.shape();
                let add = matches!(kind, OpKind::Add);
                {
                    let ga = accumulate(&mut grads[inputs[0]], a.len());
                    for i in 0..r {
                        for j in 0..c {
                            let gi = g[i * c + j];
                            let d = if add { gi } else { gi * b.data()[bidx(sb, i, j)] };
                            ga[bidx(sa, i, j)] += d;
                        }
                    }
                }
                let gb = accumulate(&mut grads[inputs[1]], b.len());
                for i in 0..r {
                    for j in 0..c {
                        let gi = g[i * c + j];
                        let d = if add { gi } else { gi * a.data()[bidx(sa, i, j)] };
                        gb[bidx(sb, i, j)] += d;
                    }
                }
            }
            OpKind::Sigmoid => {
                let ga = accumulate(&mut grads[inputs[0]], a.len());
                for ((x, &y), &gi) in ga.iter_mut().zip(out.data()).zip(g) {
                    *x += gi * y * (1.0 - y);
                }
            }
            OpKind::Tanh => {
                let ga = accumulate(&mut grads[inputs[0]], a.len());
                for ((x, &y), &gi) in ga.iter_mut().zip(out.data()).zip(g) {
                    *x += gi * (1.0 - y * y);
                }
            }
            OpKind::Log => {
                let ga = accumulate(&mut grads[inputs[0]], a.len());
                for ((x, &v), &gi) in ga.iter_mut().zip(a.data()).zip(g) {
                    *x += gi / v;
                }
            }
            OpKind::ScalarMul(s) => {
                let ga = accumulate(&mut grads[inputs[0]], a.len());
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi * s;
                }
            }
            OpKind::Softmax => {
                let cols = a.cols();
                let ga = accumulate(&mut grads[inputs[0]], a.len());
                for i in 0..a.rows() {
                    let y = out.row_slice(i);
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        ga[i * cols + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            OpKind::LogSoftmax => {
                let cols = a.cols();
                let ga = accumulate(&mut grads[inputs[0]], a.len());
                for i in 0..a.rows() {
                    let y = out.row_slice(i);
                    let gr = &g[i * cols..(i + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        ga[i * cols + j] += gr[j] - y[j].exp() * total;
                    }
                }
            }
            OpKind::Embedding(ids) => {
                let d = a.cols();
                let ga = accumulate(&mut grads[inputs[0]], a.len());
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g[row * d..(row + 1) * d];
                    for (x, &gi) in ga[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *x += gi;
                    }
                }
            }
            OpKind::Concat => {
                let b = &self.nodes[inputs[1]].value;
                let (ca, cb) = (a.cols(), b.cols());
                let cols = ca + cb;
                {
                    let ga = accumulate(&mut grads[inputs[0]], a.len());
                    for i in 0..a.rows() {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * cols + j];
                        }
                    }
                }
                let gb = accumulate(&mut grads[inputs[1]], b.len());
                for i in 0..b.rows() {
                    for j in 0..cb {
                        gb[i * cb + j] += g[i * cols + ca + j];
                    }
                }
            }
            OpKind::Sum | OpKind::Mean => {
                let scale = if matches!(kind, OpKind::Mean) {
                    1.0 / a.len() as f64
                } else {
                    1.0
                };
                let ga = accumulate(&mut grads[inputs[0]], a.len());
                for x in ga.iter_mut() {
                    *x += g[0] * scale;
                }
            }
            OpKind::Gather(cols) => {
                let width = a.cols();
                let ga = accumulate(&mut grads[inputs[0]], a.len());
                for (i, &c) in cols.iter().enumerate() {
                    ga[i * width + c] += g[i];
                }
            }
        }
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_raw(a.rows(), a.cols(), a.data().iter().map(|&x| f(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| store.insert(n, t.clone()))
            .collect();
        (store, ids)
    }

    #[test]
    fn matmul_shape_rule() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(2, 3, 1.0));
        let b = tape.constant(Tensor::filled(3, 1, 2.0));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), (2, 1));
        assert_eq!(tape.value(c).data(), &[6.0, 6.0]);
        let err = tape.matmul(b, b).unwrap_err();
        match err {
            Error::Shape { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, (3, 1));
                assert_eq!(rhs, (3, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(1, 2));
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![0.0, 800.0, -800.0]).unwrap());
        let s = tape.sigmoid(a).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[0], 0.5);
        assert_eq!(v[1], 1.0);
        assert!(v[2] >= 0.0 && v[2] < 1e-300);
    }

    #[test]
    fn log_of_zero_is_a_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(1, 1));
        let err = tape.log(a).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(tape.embedding(t, vec![3]), Err(Error::Input(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let (mut store, ids) = store_with(&[("w", Tensor::new(2, 2, vec![1., 2., 3., 4.]).unwrap())]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ids[0]);
        let s = tape.sum(w).unwrap();
        store.zero_grad();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn product_rule() {
        let (mut store, ids) =
            store_with(&[("x", Tensor::scalar(2.0)), ("y", Tensor::scalar(3.0))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let y = tape.param(&store, ids[1]);
        let p = tape.mul(x, y).unwrap();
        store.zero_grad();
        tape.backward(p, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).unwrap().item(), 3.0);
        assert_eq!(store.grad(ids[1]).unwrap().item(), 2.0);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let (mut store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        let x2 = tape.mul(x, x).unwrap();
        let y = tape.add(x2, x).unwrap();
        store.zero_grad();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let (mut store, ids) = store_with(&[("x", Tensor::zeros(2, 1))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, ids[0]);
        assert!(matches!(tape.backward(x, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let (mut store, ids) = store_with(&[
            ("a", Tensor::zeros(3, 2)),
            ("bias", Tensor::row(vec![1.0, -1.0]).unwrap()),
        ]);
        let mut tape = Tape::new();
        let a = tape.param(&store, ids[0]);
        let b = tape.param(&store, ids[1]);
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).shape(), (3, 2));
        let t = tape.sum(s).unwrap();
        store.zero_grad();
        tape.backward(t, &mut store).unwrap();
        assert_eq!(store.grad(ids[1]).unwrap().data(), &[3.0, 3.0]);
    }
}
