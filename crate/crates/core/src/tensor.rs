//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Trainable values live in a [`ParamStore`] as [`Tensor`]s, each carrying
//! its own gradient buffer. A forward pass records operations on a [`Tape`],
//! which copies parameter values onto the tape as leaves and hands out
//! lightweight [`Var`] handles. [`Tape::backward`] consumes the tape, walks
//! the recorded nodes in reverse creation order and accumulates
//! `dLoss/dParam` into the store.
//!
//! ```
//! use ammsnn::tensor::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let x = store.add("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
//!
//! let mut tape = Tape::new();
//! let xv = tape.param(&store, x);
//! let y = tape.add(xv, xv).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss, &mut store).unwrap();
//! assert_eq!(store.get(x).grad(), &[2.0, 2.0]);
//! ```
//!
//! Shapes are row-major. Matrices are `[rows, cols]`, vectors `[n]`, and
//! scalars `[1]`. Every forward op checks its output for NaN/Inf and returns
//! [`Error::Numerical`] instead of a silently poisoned value.

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major tensor with an accumulating gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Usage(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            grad: vec![0.0; n],
            shape,
            data,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    /// i.i.d. uniform entries in `[-half_range, half_range]`.
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, half_range: f64, rng: &mut R) -> Result<Self> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng.random_range(-half_range..=half_range))
            .collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    /// Disjoint mutable views of values and gradient, for optimizers.
    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.data, &mut self.grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the forward output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Which slices a max reduction runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceAxis {
    /// One maximum per row, taken across that row's columns.
    Rows,
    /// One maximum per column, taken across that column's rows.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather {
        param: ParamId,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    Sum(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        filters: Var,
        bias: Var,
        valid: usize,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Softmax {
        input: Var,
        valid: usize,
    },
    MaxReduce {
        input: Var,
        /// Flat index into the input of each slice's winner.
        winners: Vec<usize>,
        /// Gap between winner and runner-up per slice (INFINITY for singletons).
        gaps: Vec<f64>,
    },
    Hadamard {
        matrix: Var,
        weights: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Scale {
        input: Var,
        factors: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    Hinge {
        pos: Var,
        neg: Var,
        margin: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Gather { .. } => "gather",
            Op::Add(..) => "add",
            Op::Sum(_) => "sum",
            Op::Transpose(_) => "transpose",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d_same",
            Op::Activation { .. } => "activation",
            Op::Softmax { .. } => "softmax",
            Op::MaxReduce { .. } => "max_reduce",
            Op::Hadamard { .. } => "hadamard_broadcast",
            Op::Concat { .. } => "concat",
            Op::Scale { .. } => "scale",
            Op::Cosine { .. } => "cosine",
            Op::Hinge { .. } => "hinge",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Norm below which a cosine is refused.
pub const MIN_NORM: f64 = 1e-12;

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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone())
            .expect("tape nodes always hold consistent shapes");
        t.set_requires_grad(false);
        t
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        // branch-free scan first; it vectorizes, `find` does not
        let any_bad = value.iter().fold(false, |acc, x| acc | !x.is_finite());
        if let Some(bad) = value.iter().find(|x| any_bad && !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "{} produced non-finite value {bad}",
                op.name()
            )));
        }
        let tracked = match &op {
            Op::Leaf => false,
            Op::Param(_) | Op::Gather { .. } => true,
            Op::Add(a, b) | Op::MatMul(a, b) => self.tracked(*a) || self.tracked(*b),
            Op::Sum(x) | Op::Transpose(x) => self.tracked(*x),
            Op::Conv1d {
                input,
                filters,
                bias,
                ..
            } => self.tracked(*input) || self.tracked(*filters) || self.tracked(*bias),
            Op::Activation { input, .. }
            | Op::Softmax { input, .. }
            | Op::MaxReduce { input, .. }
            | Op::Scale { input, .. } => self.tracked(*input),
            Op::Hadamard { matrix, weights } => self.tracked(*matrix) || self.tracked(*weights),
            Op::Concat { parts, .. } => parts.iter().any(|p| self.tracked(*p)),
            Op::Cosine { a, b } => self.tracked(*a) || self.tracked(*b),
            Op::Hinge { pos, neg, .. } => self.tracked(*pos) || self.tracked(*neg),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    fn vector_len(&self, v: Var, op: &'static str) -> Result<usize> {
        match self.shape(v) {
            [n] => Ok(*n),
            other => Err(Error::dim(op, other, &[0])),
        }
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push(t.shape, t.data, Op::Leaf)
    }

    /// Records a parameter as a leaf. Gradients flow back to the store
    /// only if the tensor has `requires_grad` set.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let op = if t.requires_grad() {
            Op::Param(id)
        } else {
            Op::Leaf
        };
        self.push(t.shape.clone(), t.data.clone(), op)
            .expect("parameters are finite")
    }

    /// Gathers columns `ids` of a `[d, V]` parameter into a `[d, ids.len()]`
    /// matrix. Column 0 is treated as padding and never receives gradient.
    pub fn gather_columns(&mut self, store: &ParamStore, id: ParamId, ids: &[usize]) -> Result<Var> {
        let table = store.get(id);
        let (d, vocab) = match table.shape() {
            [d, v] => (*d, *v),
            other => return Err(Error::dim("gather", other, &[0, 0])),
        };
        if ids.is_empty() {
            return Err(Error::Data("cannot embed an empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocabulary of size {vocab}"
            )));
        }
        let l = ids.len();
        let mut out = vec![0.0; d * l];
        for r in 0..d {
            let row = &table.data[r * vocab..(r + 1) * vocab];
            for (c, &i) in ids.iter().enumerate() {
                out[r * l + c] = row[i];
            }
        }
        let op = if table.requires_grad() {
            Op::Gather {
                param: id,
                ids: ids.to_vec(),
            }
        } else {
            Op::Leaf
        };
        self.push(vec![d, l], out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(x))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    /// Zero-padded ("same") 1-D convolution over the columns of `input`.
    ///
    /// `input` is `[d, L]`, `filters` is `[c, d, k]` with odd `k`, `bias` is
    /// `[c]`; the result is `[c, L]` before any activation. Only the first
    /// `valid` input columns are read and only the first `valid` output
    /// columns are computed; everything past `valid` is treated as padding
    /// and comes out exactly zero.
    pub fn conv1d_same(&mut self, input: Var, filters: Var, bias: Var, valid: Option<usize>) -> Result<Var> {
        let (d, l) = self.matrix_dims(input, "conv1d_same")?;
        let (c, fd, k) = match self.shape(filters) {
            [c, fd, k] => (*c, *fd, *k),
            other => return Err(Error::dim("conv1d_same", other, &[0, d, 0])),
        };
        if fd != d {
            return Err(Error::dim("conv1d_same", self.shape(input), self.shape(filters)));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("convolution width must be odd, got {k}")));
        }
        if self.shape(bias) != [c] {
            return Err(Error::dim("conv1d_same", self.shape(bias), &[c]));
        }
        let valid = valid.unwrap_or(l);
        if valid == 0 || valid > l {
            return Err(Error::Usage(format!(
                "valid length {valid} outside 1..={l}"
            )));
        }
        let cols = unfold(self.value(input), d, l, k, valid);
        let dk = d * k;
        let w = self.value(filters);
        let mut wt = vec![0.0; dk * c];
        for j in 0..c {
            for p in 0..dk {
                wt[p * c + j] = w[j * dk + p];
            }
        }
        // rows are output positions, columns channels
        let mut out_t = vec![0.0; valid * c];
        for t in 0..valid {
            out_t[t * c..(t + 1) * c].copy_from_slice(self.value(bias));
        }
        matmul_acc(&cols, &wt, &mut out_t, valid, dk, c);
        let mut out = vec![0.0; c * l];
        for t in 0..valid {
            for j in 0..c {
                out[j * l + t] = out_t[t * c + j];
            }
        }
        self.push(
            vec![c, l],
            out,
            Op::Conv1d {
                input,
                filters,
                bias,
                valid,
            },
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Activation { input: x, kind })
    }

    /// Max-shifted softmax over a vector.
    pub fn softmax_vec(&mut self, x: Var) -> Result<Var> {
        let n = self.vector_len(x, "softmax")?;
        self.softmax_masked(x, n)
    }

    /// Softmax over the first `valid` entries; the remaining entries are
    /// exactly zero.
    pub fn softmax_masked(&mut self, x: Var, valid: usize) -> Result<Var> {
        let n = self.vector_len(x, "softmax")?;
        if valid == 0 || valid > n {
            return Err(Error::Data(format!(
                "softmax needs 1..={n} unmasked entries, got {valid}"
            )));
        }
        let v = &self.value(x)[..valid];
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; n];
        let mut total = 0.0;
        for (o, &xi) in out.iter_mut().zip(v) {
            *o = (xi - max).exp();
            total += *o;
        }
        out[..valid].iter_mut().for_each(|o| *o /= total);
        self.push(vec![n], out, Op::Softmax { input: x, valid })
    }

    /// Per-slice maximum of a matrix, considering only the first `limit`
    /// entries of every slice (all of them when `None`). Returns the
    /// maxima and each winner's position within its slice; ties go to the
    /// first occurrence.
    pub fn max_reduce(&mut self, x: Var, axis: ReduceAxis, limit: Option<usize>) -> Result<(Var, Vec<usize>)> {
        let (r, c) = self.matrix_dims(x, "max_reduce")?;
        let (slices, extent) = match axis {
            ReduceAxis::Rows => (r, c),
            ReduceAxis::Cols => (c, r),
        };
        let limit = limit.unwrap_or(extent);
        if limit == 0 || limit > extent {
            return Err(Error::Data(format!(
                "max_reduce needs 1..={extent} unmasked entries, got {limit}"
            )));
        }
        let v = self.value(x);
        let flat = |slice: usize, pos: usize| match axis {
            ReduceAxis::Rows => slice * c + pos,
            ReduceAxis::Cols => pos * c + slice,
        };
        let mut values = Vec::with_capacity(slices);
        let mut positions = Vec::with_capacity(slices);
        let mut winners = Vec::with_capacity(slices);
        let mut gaps = Vec::with_capacity(slices);
        for s in 0..slices {
            let mut best = 0;
            let mut best_v = v[flat(s, 0)];
            let mut second = f64::NEG_INFINITY;
            for p in 1..limit {
                let cur = v[flat(s, p)];
                if cur > best_v {
                    second = best_v;
                    best_v = cur;
                    best = p;
                } else if cur > second {
                    second = cur;
                }
            }
            values.push(best_v);
            positions.push(best);
            winners.push(flat(s, best));
            gaps.push(best_v - second);
        }
        let var = self.push(
            vec![slices],
            values,
            Op::MaxReduce {
                input: x,
                winners,
                gaps,
            },
        )?;
        Ok((var, positions))
    }

    /// `out[i, j] = m[i, j] * v[j]`.
    pub fn hadamard_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(m, "hadamard_broadcast")?;
        let n = self.vector_len(v, "hadamard_broadcast")?;
        if n != c {
            return Err(Error::dim("hadamard_broadcast", self.shape(m), self.shape(v)));
        }
        let mv = self.value(m);
        let vv = self.value(v);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] * vv[j];
            }
        }
        self.push(
            vec![r, c],
            out,
            Op::Hadamard {
                matrix: m,
                weights: v,
            },
        )
    }

    /// Stacks `parts` along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Usage(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut along = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::dim("concat", &base, s));
            }
            along += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * along * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = along;
        self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Elementwise product with constant factors (masks, dropout).
    pub fn scale(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(Error::dim("scale", self.shape(x), &[factors.len()]));
        }
        let out = self
            .value(x)
            .iter()
            .zip(&factors)
            .map(|(a, f)| a * f)
            .collect();
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::Scale { input: x, factors },
        )
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.vector_len(a, "cosine")?;
        let m = self.vector_len(b, "cosine")?;
        if n != m {
            return Err(Error::dim("cosine", self.shape(a), self.shape(b)));
        }
        let (dot, na, nb) = dot_norms(self.value(a), self.value(b));
        if na < MIN_NORM || nb < MIN_NORM {
            return Err(Error::Degenerate(format!(
                "vector norms {na:e} and {nb:e} (minimum {MIN_NORM:e})"
            )));
        }
        self.push(vec![1], vec![dot / (na * nb)], Op::Cosine { a, b })
    }

    /// `max(0, margin - pos + neg)` on two scalars. At the kink the
    /// subgradient is zero.
    pub fn hinge(&mut self, pos: Var, neg: Var, margin: f64) -> Result<Var> {
        if self.value(pos).len() != 1 || self.value(neg).len() != 1 {
            return Err(Error::dim("hinge", self.shape(pos), self.shape(neg)));
        }
        let v = margin - self.scalar(pos) + self.scalar(neg);
        self.push(vec![1], vec![v.max(0.0)], Op::Hinge { pos, neg, margin })
    }

    /// Smallest distance of any recorded non-smooth point from its kink:
    /// relu inputs near zero, max reductions near a tie, hinge losses near
    /// the margin. Structural zeros (exact 0.0 relu inputs, ties among
    /// exact zeros) are ignored. Finite-difference checks should only be
    /// trusted when this is comfortably larger than the step size.
    pub fn min_kink_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Activation {
                    input,
                    kind: Activation::Relu,
                } => {
                    for &x in self.value(*input) {
                        if x != 0.0 {
                            gap = gap.min(x.abs());
                        }
                    }
                }
                Op::MaxReduce { gaps, .. } => {
                    for (&g, &v) in gaps.iter().zip(&node.value) {
                        if !(g == 0.0 && v == 0.0) {
                            gap = gap.min(g);
                        }
                    }
                }
                Op::Hinge { pos, neg, margin } => {
                    let v = margin - self.scalar(*pos) + self.scalar(*neg);
                    gap = gap.min(v.abs());
                }
                _ => {}
            }
        }
        gap
    }

    /// Hash of every discrete choice the forward pass made: relu signs, max
    /// winners and whether each hinge is active. Two evaluations with equal
    /// signatures lie on the same smooth piece of the loss.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Activation {
                    input,
                    kind: Activation::Relu,
                } => {
                    for &x in self.value(*input) {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::MaxReduce { winners, .. } => winners.hash(&mut h),
                Op::Hinge { .. } => (node.value[0] > 0.0).hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar `loss`, accumulating into `params`.
    /// Consumes the tape.
    pub fn backward(self, loss: Var, params: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let t = params.get_mut(*id);
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::dim("backward", t.shape(), &node.shape));
                    }
                    t.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Gather { param, ids } => {
                    let t = params.get_mut(*param);
                    let (d, vocab) = (t.shape[0], t.shape[1]);
                    let l = ids.len();
                    for r in 0..d {
                        for (c, &i) in ids.iter().enumerate() {
                            if i != 0 {
                                t.grad[r * vocab + i] += g[r * l + c];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(dst) = slot(&mut grads, &nodes, v) {
                            dst.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(dst) = slot(&mut grads, &nodes, *x) {
                        dst.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                    if let Some(dst) = slot(&mut grads, &nodes, *x) {
                        for i in 0..r {
                            for j in 0..c {
                                dst[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    if let Some(dst) = slot(&mut grads, &nodes, *a) {
                        // dA = dOut . B^T
                        let bt = transpose_values(&nodes[b.0].value, k, n);
                        matmul_acc(&g, &bt, dst, m, n, k);
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, *b) {
                        // dB = A^T . dOut
                        let at = transpose_values(&nodes[a.0].value, m, k);
                        matmul_acc(&at, &g, dst, k, m, n);
                    }
                }
                Op::Conv1d {
                    input,
                    filters,
                    bias,
                    valid,
                } => {
                    let valid = *valid;
                    let (d, l) = (nodes[input.0].shape[0], nodes[input.0].shape[1]);
                    let (c, k) = (nodes[filters.0].shape[0], nodes[filters.0].shape[2]);
                    let dk = d * k;
                    // g transposed to [valid, c]
                    let mut g_t = vec![0.0; valid * c];
                    for j in 0..c {
                        for t in 0..valid {
                            g_t[t * c + j] = g[j * l + t];
                        }
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, *bias) {
                        for j in 0..c {
                            dst[j] += g[j * l..j * l + valid].iter().sum::<f64>();
                        }
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, *filters) {
                        let cols = unfold(&nodes[input.0].value, d, l, k, valid);
                        let g_valid: Vec<f64> = (0..c).flat_map(|j| g[j * l..j * l + valid].iter().copied()).collect();
                        matmul_acc(&g_valid, &cols, dst, c, valid, dk);
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, *input) {
                        let mut dcols = vec![0.0; valid * dk];
                        matmul_acc(&g_t, &nodes[filters.0].value, &mut dcols, valid, c, dk);
                        let pad = (k - 1) / 2;
                        for t in 0..valid {
                            let row = &dcols[t * dk..(t + 1) * dk];
                            for ch in 0..d {
                                for o in 0..k {
                                    let src = t + o;
                                    if src < pad || src - pad >= valid {
                                        continue;
                                    }
                                    dst[ch * l + src - pad] += row[ch * k + o];
                                }
                            }
                        }
                    }
                }
                Op::Activation { input, kind } => {
                    let y = &node.value;
                    if let Some(dst) = slot(&mut grads, &nodes, *input) {
                        for ((d, &gy), &yv) in dst.iter_mut().zip(&g).zip(y) {
                            *d += gy * kind.derivative_from_output(yv);
                        }
                    }
                }
                Op::Softmax { input, valid } => {
                    let y = &node.value[..*valid];
                    let inner: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    if let Some(dst) = slot(&mut grads, &nodes, *input) {
                        for i in 0..*valid {
                            dst[i] += y[i] * (g[i] - inner);
                        }
                    }
                }
                Op::MaxReduce { input, winners, .. } => {
                    if let Some(dst) = slot(&mut grads, &nodes, *input) {
                        for (&w, &gv) in winners.iter().zip(&g) {
                            dst[w] += gv;
                        }
                    }
                }
                Op::Hadamard { matrix, weights } => {
                    let (r, c) = (nodes[matrix.0].shape[0], nodes[matrix.0].shape[1]);
                    if let Some(dst) = slot(&mut grads, &nodes, *matrix) {
                        let v = &nodes[weights.0].value;
                        for i in 0..r {
                            for j in 0..c {
                                dst[i * c + j] += g[i * c + j] * v[j];
                            }
                        }
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, *weights) {
                        let m = &nodes[matrix.0].value;
                        for i in 0..r {
                            for j in 0..c {
                                dst[j] += g[i * c + j] * m[i * c + j];
                            }
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let outer: usize = node.shape[..*axis].iter().product();
                    let inner: usize = node.shape[axis + 1..].iter().product();
                    let row = node.shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let chunk = nodes[p.0].shape[*axis] * inner;
                        if let Some(dst) = slot(&mut grads, &nodes, p) {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + chunk];
                                dst[o * chunk..(o + 1) * chunk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, s)| *d += s);
                            }
                        }
                        offset += chunk;
                    }
                }
                Op::Scale { input, factors } => {
                    if let Some(dst) = slot(&mut grads, &nodes, *input) {
                        for ((d, gv), f) in dst.iter_mut().zip(&g).zip(factors) {
                            *d += gv * f;
                        }
                    }
                }
                Op::Cosine { a, b } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (dotv, na, nb) = dot_norms(av, bv);
                    let cos = dotv / (na * nb);
                    let gs = g[0];
                    if let Some(dst) = slot(&mut grads, &nodes, *a) {
                        for ((d, &x), &y) in dst.iter_mut().zip(av).zip(bv) {
                            *d += gs * (y / (na * nb) - cos * x / (na * na));
                        }
                    }
                    if let Some(dst) = slot(&mut grads, &nodes, *b) {
                        for ((d, &x), &y) in dst.iter_mut().zip(av).zip(bv) {
                            *d += gs * (x / (na * nb) - cos * y / (nb * nb));
                        }
                    }
                }
                Op::Hinge { pos, neg, margin } => {
                    let v = margin - nodes[pos.0].value[0] + nodes[neg.0].value[0];
                    if v > 0.0 {
                        if let Some(dst) = slot(&mut grads, &nodes, *pos) {
                            dst[0] -= g[0];
                        }
                        if let Some(dst) = slot(&mut grads, &nodes, *neg) {
                            dst[0] += g[0];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.tracked {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

/// `[valid, d * k]` matrix whose row `t` holds the input window centred
/// on position `t`, zero where the window leaves `0..valid`.
fn unfold(x: &[f64], d: usize, l: usize, k: usize, valid: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let dk = d * k;
    let mut cols = vec![0.0; valid * dk];
    for t in 0..valid {
        let row = &mut cols[t * dk..(t + 1) * dk];
        for ch in 0..d {
            for o in 0..k {
                let src = t + o;
                if src >= pad && src - pad < valid {
                    row[ch * k + o] = x[ch * l + src - pad];
                }
            }
        }
    }
    cols
}

fn transpose_values(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

fn dot_norms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut d = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        d += x * y;
        aa += x * x;
        bb += y * y;
    }
    (d, aa.sqrt(), bb.sqrt())
}

/// `out += a . b` with `a` `[m, k]`, `b` `[k, n]`, all row major. Rows and
/// columns of `a` that are entirely zero (padding positions, dead units)
/// are skipped.
/// Each output element adds its products one at a time in ascending `p`,
/// so the result does not depend on the blocking below.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const CHUNK: usize = 256;
    let mut rows: Vec<(usize, &mut [f64])> = out
        .chunks_exact_mut(n)
        .take(m)
        .enumerate()
        .filter(|(i, _)| a[i * k..(i + 1) * k].iter().any(|&x| x != 0.0))
        .collect();
    let active: Vec<usize> = (0..k).filter(|&p| rows.iter().any(|(i, _)| a[i * k + p] != 0.0)).collect();
    let mut groups = rows.chunks_exact_mut(4);
    for group in &mut groups {
        let [(i0, o0), (i1, o1), (i2, o2), (i3, o3)] = group else {
            unreachable!()
        };
        let arows = [*i0, *i1, *i2, *i3].map(|i| &a[i * k..(i + 1) * k]);
        for j0 in (0..n).step_by(CHUNK) {
            let j1 = (j0 + CHUNK).min(n);
            let len = j1 - j0;
            let (o0, o1, o2, o3) = (&mut o0[j0..j1], &mut o1[j0..j1], &mut o2[j0..j1], &mut o3[j0..j1]);
            let mut quads = active.chunks_exact(4);
            for ps in &mut quads {
                let bs: [&[f64]; 4] = std::array::from_fn(|q| &b[ps[q] * n + j0..ps[q] * n + j1]);
                let c: [[f64; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|q| arows[r][ps[q]]));
                let (b0, b1, b2, b3) = (&bs[0][..len], &bs[1][..len], &bs[2][..len], &bs[3][..len]);
                for j in 0..len {
                    let x = [b0[j], b1[j], b2[j], b3[j]];
                    o0[j] = tile_row(o0[j], &c[0], &x);
                    o1[j] = tile_row(o1[j], &c[1], &x);
                    o2[j] = tile_row(o2[j], &c[2], &x);
                    o3[j] = tile_row(o3[j], &c[3], &x);
                }
            }
            for &p in quads.remainder() {
                let brow = &b[p * n + j0..p * n + j1];
                for (o, arow) in [&mut *o0, &mut *o1, &mut *o2, &mut *o3].into_iter().zip(&arows) {
                    let c = arow[p];
                    o.iter_mut().zip(brow).for_each(|(y, x)| *y += c * x);
                }
            }
        }
    }
    for (i, orow) in groups.into_remainder() {
        let arow = &a[*i * k..(*i + 1) * k];
        for &p in &active {
            let c = arow[p];
            orow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(y, x)| *y += c * x);
        }
    }
}

#[inline(always)]
fn tile_row(mut y: f64, c: &[f64; 4], x: &[f64; 4]) -> f64 {
    y += c[0] * x[0];
    y += c[1] * x[1];
    y += c[2] * x[2];
    y += c[3] * x[3];
    y
}
