//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive appends one
//! node holding its kind, its input handles and its forward value; node order
//! is creation order, so inputs always precede their consumers and a single
//! reverse sweep visits every node once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Constant or parameter input.
    Leaf,
    Add,
    Sub,
    Mul,
    /// `scale * x + shift`, elementwise.
    Affine { scale: f64, shift: f64 },
    /// Supports `[m,k]x[k]`, `[k]x[k,n]` and `[m,k]x[k,n]`.
    MatMul,
    /// Concatenation of rank-1 inputs.
    Concat,
    /// Contiguous range of a rank-1 input.
    Slice { start: usize, len: usize },
    /// Rank-1 inputs of equal length stacked as matrix rows.
    Stack,
    Sigmoid,
    Tanh,
    Exp,
    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    Log { floor: f64 },
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    /// Row `index` of a rank-2 table.
    Gather { index: usize },
    /// Element `index` of a rank-1 input, as a scalar.
    Pick { index: usize },
    Sum,
    Mean,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Affine { .. } => "affine",
            OpKind::MatMul => "matmul",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Stack => "stack",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log { .. } => "log",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Gather { .. } => "gather",
            OpKind::Pick { .. } => "pick",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

struct Node {
    kind: OpKind,
    inputs: Vec<Var>,
    value: Tensor,
}

/// A dynamic computation record.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            recording: true,
        }
    }

    /// A tape that computes values only; [`Tape::backward`] on it fails.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(OpKind::Leaf, Vec::new(), t)
    }

    /// Binds a named parameter. Binding the same name twice returns the
    /// original handle.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(OpKind::Leaf, Vec::new(), t.clone());
        self.params.insert(name.to_string(), v);
        v
    }

    /// Binds a parameter straight from a store.
    pub fn param_from(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        Ok(self.param(name, t))
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<Var>, value: Tensor) -> Var {
        let (kind, inputs) = if self.recording {
            (kind, inputs)
        } else {
            (OpKind::Leaf, Vec::new())
        };
        self.nodes.push(Node {
            kind,
            inputs,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates one primitive and records it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let value = self.forward(&kind, inputs)?;
        if !value.is_finite() {
            return Err(Error::Numeric { op: kind.name() });
        }
        Ok(self.push(kind, inputs.to_vec(), value))
    }

    fn arity(kind: &OpKind, inputs: &[Var], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::contract(format!(
                "{} expects {n} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
        Ok(())
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<Tensor> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        match kind {
            OpKind::Leaf => Err(Error::contract("leaves are created with constant() or param()")),
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                Self::arity(kind, inputs, 2)?;
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(Error::Dimension {
                        op: kind.name(),
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let out = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), out)
            }
            OpKind::Affine { scale, shift } => {
                Self::arity(kind, inputs, 1)?;
                let a = val(0);
                let out = a.values().iter().map(|x| scale * x + shift).collect();
                Tensor::new(a.shape().to_vec(), out)
            }
            OpKind::MatMul => {
                Self::arity(kind, inputs, 2)?;
                matmul(val(0), val(1))
            }
            OpKind::Concat => {
                if inputs.is_empty() {
                    return Err(Error::contract("concat of zero inputs"));
                }
                let mut out = Vec::new();
                for &v in inputs {
                    let t = &self.nodes[v.0].value;
                    if t.rank() != 1 {
                        return Err(Error::Dimension {
                            op: "concat",
                            lhs: t.shape().to_vec(),
                            rhs: vec![],
                        });
                    }
                    out.extend_from_slice(t.values());
                }
                Ok(Tensor::vector(out))
            }
            OpKind::Slice { start, len } => {
                Self::arity(kind, inputs, 1)?;
                let a = val(0);
                if a.rank() != 1 || *len == 0 || start + len > a.len() {
                    return Err(Error::Dimension {
                        op: "slice",
                        lhs: a.shape().to_vec(),
                        rhs: vec![*start, *len],
                    });
                }
                Ok(Tensor::vector(a.values()[*start..start + len].to_vec()))
            }
            OpKind::Stack => {
                if inputs.is_empty() {
                    return Err(Error::contract("stack of zero inputs"));
                }
                let first = val(0).shape().to_vec();
                let mut out = Vec::with_capacity(first.iter().product::<usize>() * inputs.len());
                for &v in inputs {
                    let t = &self.nodes[v.0].value;
                    if t.rank() != 1 || t.shape() != first.as_slice() {
                        return Err(Error::Dimension {
                            op: "stack",
                            lhs: first,
                            rhs: t.shape().to_vec(),
                        });
                    }
                    out.extend_from_slice(t.values());
                }
                Tensor::matrix(inputs.len(), first[0], out)
            }
            OpKind::Sigmoid | OpKind::Tanh | OpKind::Exp => {
                Self::arity(kind, inputs, 1)?;
                let a = val(0);
                let f: fn(f64) -> f64 = match kind {
                    OpKind::Sigmoid => sigmoid,
                    OpKind::Tanh => f64::tanh,
                    _ => f64::exp,
                };
                Tensor::new(a.shape().to_vec(), a.values().iter().map(|&x| f(x)).collect())
            }
            OpKind::Log { floor } => {
                Self::arity(kind, inputs, 1)?;
                let a = val(0);
                let out = a.values().iter().map(|&x| x.max(*floor).ln()).collect();
                Tensor::new(a.shape().to_vec(), out)
            }
            OpKind::Softmax | OpKind::LogSoftmax => {
                Self::arity(kind, inputs, 1)?;
                let a = val(0);
                let cols = *a.shape().last().unwrap();
                let mut out = Vec::with_capacity(a.len());
                for row in a.values().chunks(cols) {
                    if matches!(kind, OpKind::Softmax) {
                        out.extend(softmax(row));
                    } else {
                        out.extend(log_softmax(row));
                    }
                }
                Tensor::new(a.shape().to_vec(), out)
            }
            OpKind::Gather { index } => {
                Self::arity(kind, inputs, 1)?;
                let a = val(0);
                if a.rank() != 2 {
                    return Err(Error::Dimension {
                        op: "gather",
                        lhs: a.shape().to_vec(),
                        rhs: vec![*index],
                    });
                }
                if *index >= a.shape()[0] {
                    return Err(Error::Vocab {
                        index: *index,
                        size: a.shape()[0],
                    });
                }
                Ok(Tensor::vector(a.row(*index).to_vec()))
            }
            OpKind::Pick { index } => {
                Self::arity(kind, inputs, 1)?;
                let a = val(0);
                if a.rank() != 1 || *index >= a.len() {
                    return Err(Error::Dimension {
                        op: "pick",
                        lhs: a.shape().to_vec(),
                        rhs: vec![*index],
                    });
                }
                Ok(Tensor::scalar(a.values()[*index]))
            }
            OpKind::Sum | OpKind::Mean => {
                Self::arity(kind, inputs, 1)?;
                let a = val(0);
                let s: f64 = a.values().iter().sum();
                Ok(Tensor::scalar(if matches!(kind, OpKind::Sum) {
                    s
                } else {
                    s / a.len() as f64
                }))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(OpKind::Affine { scale, shift }, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::Slice { start, len }, &[a])
    }

    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        self.apply(OpKind::Stack, rows)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log { floor: 0.0 }, &[a])
    }

    pub fn log_floor(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.apply(OpKind::Log { floor }, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmax, &[a])
    }

    pub fn gather(&mut self, table: Var, index: usize) -> Result<Var> {
        self.apply(OpKind::Gather { index }, &[table])
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        self.apply(OpKind::Pick { index }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }

    /// Sum of several scalars (or equal-shaped tensors).
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::contract("add_all of zero inputs"))?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<NodeGrads> {
        if !self.recording {
            return Err(Error::contract("backward on a tape that is not recording"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Gradients for every entry of `store`; entries the loss does not reach
    /// get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Grads> {
        let node_grads = self.gradients(loss)?;
        let mut out = Grads::default();
        for (name, t) in store.iter() {
            let g = match self.params.get(name) {
                Some(&v) => match node_grads.wrt(v) {
                    Some(vals) => Tensor::new(t.shape().to_vec(), vals.to_vec())?,
                    None => Tensor::zeros(t.shape()),
                },
                None => Tensor::zeros(t.shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let inputs = &node.inputs;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.kind {
            OpKind::Leaf => {}
            OpKind::Add => {
                axpy(acc(grads, inputs[0], g.len()), 1.0, g);
                axpy(acc(grads, inputs[1], g.len()), 1.0, g);
            }
            OpKind::Sub => {
                axpy(acc(grads, inputs[0], g.len()), 1.0, g);
                axpy(acc(grads, inputs[1], g.len()), -1.0, g);
            }
            OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (av, bv) = (val(a).values(), val(b).values());
                {
                    let ga = acc(grads, a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                let gb = acc(grads, b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            OpKind::Affine { scale, .. } => {
                axpy(acc(grads, inputs[0], g.len()), *scale, g);
            }
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                matmul_backward(val(a), val(b), g, a, b, grads);
            }
            OpKind::Concat => {
                let mut offset = 0;
                for &v in inputs {
                    let n = val(v).len();
                    axpy(acc(grads, v, n), 1.0, &g[offset..offset + n]);
                    offset += n;
                }
            }
            OpKind::Slice { start, .. } => {
                let n = val(inputs[0]).len();
                let ga = acc(grads, inputs[0], n);
                for (i, gi) in g.iter().enumerate() {
                    ga[start + i] += gi;
                }
            }
            OpKind::Stack => {
                let cols = node.value.shape()[1];
                for (r, &v) in inputs.iter().enumerate() {
                    axpy(acc(grads, v, cols), 1.0, &g[r * cols..(r + 1) * cols]);
                }
            }
            OpKind::Sigmoid => {
                let y = node.value.values();
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            OpKind::Tanh => {
                let y = node.value.values();
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            OpKind::Exp => {
                let y = node.value.values();
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }
            OpKind::Log { floor } => {
                let x = val(inputs[0]).values();
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    if x[i] > *floor {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            OpKind::Softmax => {
                let y = node.value.values();
                let cols = *node.value.shape().last().unwrap();
                let ga = acc(grads, inputs[0], g.len());
                for r in 0..g.len() / cols {
                    let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga[r * cols + c] += ys[c] * (gs[c] - dot);
                    }
                }
            }
            OpKind::LogSoftmax => {
                let y = node.value.values();
                let cols = *node.value.shape().last().unwrap();
                let ga = acc(grads, inputs[0], g.len());
                for r in 0..g.len() / cols {
                    let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let total: f64 = gs.iter().sum();
                    for c in 0..cols {
                        ga[r * cols + c] += gs[c] - ys[c].exp() * total;
                    }
                }
            }
            OpKind::Gather { index } => {
                let table = val(inputs[0]);
                let cols = table.shape()[1];
                let ga = acc(grads, inputs[0], table.len());
                axpy(&mut ga[index * cols..(index + 1) * cols], 1.0, g);
            }
            OpKind::Pick { index } => {
                let n = val(inputs[0]).len();
                acc(grads, inputs[0], n)[*index] += g[0];
            }
            OpKind::Sum | OpKind::Mean => {
                let n = val(inputs[0]).len();
                let scale = if matches!(node.kind, OpKind::Sum) {
                    g[0]
                } else {
                    g[0] / n as f64
                };
                for x in acc(grads, inputs[0], n) {
                    *x += scale;
                }
            }
        }
    }
}

/// Per-node gradients from one backward sweep.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || Error::Dimension {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2]) if k == k2 => {
            let (av, bv) = (a.values(), b.values());
            let out = (0..m)
                .map(|i| dot(&av[i * k..(i + 1) * k], bv))
                .collect();
            Ok(Tensor::vector(out))
        }
        (&[k], &[k2, n]) if k == k2 => {
            let (av, bv) = (a.values(), b.values());
            let mut out = vec![0.0; n];
            for (p, &x) in av.iter().enumerate() {
                axpy(&mut out, x, &bv[p * n..(p + 1) * n]);
            }
            Ok(Tensor::vector(out))
        }
        (&[m, k], &[k2, n]) if k == k2 => {
            let (av, bv) = (a.values(), b.values());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    axpy(&mut out[i * n..(i + 1) * n], x, &bv[p * n..(p + 1) * n]);
                }
            }
            Tensor::matrix(m, n, out)
        }
        _ => Err(mismatch()),
    }
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    av: Var,
    bv: Var,
    grads: &mut [Option<Vec<f64>>],
) {
    match (a.shape(), b.shape()) {
        (&[m, k], &[_]) => {
            {
                let ga = acc(grads, av, m * k);
                for i in 0..m {
                    axpy(&mut ga[i * k..(i + 1) * k], g[i], b.values());
                }
            }
            let gb = acc(grads, bv, k);
            let avals = a.values();
            for i in 0..m {
                axpy(gb, g[i], &avals[i * k..(i + 1) * k]);
            }
        }
        (&[k], &[_, n]) => {
            let bvals = b.values();
            {
                let ga = acc(grads, av, k);
                for p in 0..k {
                    ga[p] += dot(&bvals[p * n..(p + 1) * n], g);
                }
            }
            let gb = acc(grads, bv, k * n);
            for (p, &x) in a.values().iter().enumerate() {
                axpy(&mut gb[p * n..(p + 1) * n], x, g);
            }
        }
        (&[m, k], &[_, n]) => {
            let (avals, bvals) = (a.values(), b.values());
            {
                let ga = acc(grads, av, m * k);
                for i in 0..m {
                    for p in 0..k {
                        ga[i * k + p] += dot(&g[i * n..(i + 1) * n], &bvals[p * n..(p + 1) * n]);
                    }
                }
            }
            let gb = acc(grads, bv, k * n);
            for i in 0..m {
                for p in 0..k {
                    axpy(&mut gb[p * n..(p + 1) * n], avals[i * k + p], &g[i * n..(i + 1) * n]);
                }
            }
        }
        _ => unreachable!("shapes validated in forward"),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
