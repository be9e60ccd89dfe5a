//! A small reverse-mode automatic differentiation tape over dense row-major
//! `f64` matrices.
//!
//! Every forward pass records its operations on a [`Graph`]. Parameters live
//! in a [`ParamStore`] and enter the graph through [`Graph::param`]; after
//! [`Graph::backward`] the gradient of a scalar output with respect to every
//! parameter touched by the pass is available as a [`Gradients`] value.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix. Vectors are `1 × n` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    /// Stacks equally long rows into a matrix. An empty slice gives `0 × cols`.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a `1 × 1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: m×n`, `b: k×n`, `out: m×k`.
fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out += aᵀ · b` for `a: m×k`, `b: m×n`, `out: k×n`.
fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names, which would be a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxNll(Var, Vec<usize>),
    WeightedBce {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        clamp: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tensors aligned with a [`ParamStore`]; `None` for parameters that
/// did not take part in the differentiated expression.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }
}

/// Operation tape for one forward pass.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(1024),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// The graph node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(m, n);
        matmul_acc(&self.value(a).data, &self.value(b).data, &mut out.data, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (1, n), "add_row expects a 1×{n} row");
        let mut out = self.value(a).clone();
        let bv = &self.nodes[b.0].value.data;
        for i in 0..m {
            for (o, x) in out.data[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|&x| f(x)).collect());
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x * k, Op::Scale(a, k))
    }

    /// Multiplies every entry of `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scale_by expects a scalar node");
        let k = self.value(s).data[0];
        let av = self.value(a);
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|&x| x * k).collect());
        let ng = self.ng(s) || self.ng(a);
        self.push(out, Op::ScaleBy(s, a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start + len <= cols, "slice_cols out of range");
        let av = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(rows, len, data), Op::SliceCols(a, start), ng)
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (rows, cols) = self.shape(a);
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of range {rows}");
            data.extend_from_slice(av.row(i));
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(idx.len(), cols, data),
            Op::Gather(a, idx.to_vec()),
            ng,
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.gather_rows(a, &[i])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, av.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Row-wise softmax. With a mask, excluded entries are exactly zero and
    /// the survivors are renormalized among themselves. Each row must keep at
    /// least one entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let (rows, cols) = self.shape(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), cols, "softmax mask length mismatch");
            assert!(m.iter().any(|&k| k), "softmax mask excludes every entry");
        }
        let av = self.value(a);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let x = av.row(r);
            let keep = |c: usize| mask.is_none_or(|m| m[c]);
            let mx = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| x[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                if keep(c) {
                    let e = (x[c] - mx).exp();
                    out.data[r * cols + c] = e;
                    total += e;
                }
            }
            for c in 0..cols {
                out.data[r * cols + c] /= total;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(!av.is_empty(), "mean of an empty tensor");
        let s = av.data.iter().sum::<f64>() / av.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn softmax_nll(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (rows, cols) = self.shape(logits);
        assert_eq!(rows, targets.len(), "one target per logit row");
        let lv = self.value(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < cols, "target {t} outside {cols} classes");
            let x = lv.row(r);
            let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - x[t];
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxNll(logits, targets.to_vec()),
            ng,
        )
    }

    /// `(1/n) Σ_j w_j · BCE(y_j, σ(clamp(x_j)))` over the entries of a row of
    /// logits.
    pub fn weighted_bce(&mut self, logits: Var, targets: &[f64], weights: &[f64], clamp: f64) -> Var {
        let lv = self.value(logits);
        let n = lv.len();
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let mut total = 0.0;
        for j in 0..n {
            let x = lv.data[j].clamp(-clamp, clamp);
            // log σ(x) and log(1-σ(x)) in a stable form.
            let log_p = -softplus(-x);
            let log_q = -softplus(x);
            total += weights[j] * -(targets[j] * log_p + (1.0 - targets[j]) * log_q);
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(total / n as f64),
            Op::WeightedBce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                clamp,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        let mut by_param = vec![None; self.store.len()];

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => by_param[id.0] = Some(g),
                op => self.backprop_op(op, &node.value, &g, &mut grads),
            }
        }
        Gradients { by_param }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_op(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.shape();
                let n = bv.cols;
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    matmul_bt_acc(&g.data, &bv.data, &mut ga.data, m, n, k);
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    matmul_at_acc(&av.data, &g.data, &mut gb.data, m, k, n);
                    self.acc(grads, *b, gb);
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
                self.acc(grads, *a, g.clone());
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    let neg = g.data.iter().map(|x| -x).collect();
                    self.acc(grads, *b, Tensor::from_vec(g.rows, g.cols, neg));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.ng(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
                }
                if self.ng(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Scale(a, k) => {
                let d = g.data.iter().map(|x| x * k).collect();
                self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::ScaleBy(s, a) => {
                let k = self.value(*s).data[0];
                if self.ng(*s) {
                    let av = self.value(*a);
                    let d: f64 = g.data.iter().zip(&av.data).map(|(x, y)| x * y).sum();
                    self.acc(grads, *s, Tensor::scalar(d));
                }
                if self.ng(*a) {
                    let d = g.data.iter().map(|x| x * k).collect();
                    self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&av.data)
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .map(|(x, s)| x * s * (1.0 - s))
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Tanh(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .map(|(x, t)| x * (1.0 - t * t))
                    .collect();
                self.acc(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.data[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        self.acc(grads, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    if self.ng(p) {
                        let d = g.data[offset * pc..(offset + pr) * pc].to_vec();
                        self.acc(grads, p, Tensor::from_vec(pr, pc, d));
                    }
                    offset += pr;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.data[r * cols + start..r * cols + start + g.cols].copy_from_slice(g.row(r));
                }
                self.acc(grads, *a, ga);
            }
            Op::Gather(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in ga.data[i * cols..(i + 1) * cols].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                self.acc(grads, *a, Tensor::from_vec(rows, cols, g.data.clone()));
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.shape();
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        // Masked entries have y = 0 and receive no gradient.
                        ga.data[r * cols + c] = y[c] * (gy[c] - dot);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                self.acc(grads, *a, Tensor::from_vec(rows, cols, vec![g.data[0]; rows * cols]));
            }
            Op::Mean(a) => {
                let (rows, cols) = self.shape(*a);
                let k = g.data[0] / (rows * cols) as f64;
                self.acc(grads, *a, Tensor::from_vec(rows, cols, vec![k; rows * cols]));
            }
            Op::SoftmaxNll(logits, targets) => {
                let lv = self.value(*logits);
                let (rows, cols) = lv.shape();
                let mut gl = Tensor::zeros(rows, cols);
                for (r, &t) in targets.iter().enumerate() {
                    let x = lv.row(r);
                    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = x.iter().map(|v| (v - mx).exp()).sum();
                    for c in 0..cols {
                        let p = (x[c] - mx).exp() / z;
                        gl.data[r * cols + c] = g.data[0] * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::WeightedBce {
                logits,
                targets,
                weights,
                clamp,
            } => {
                let lv = self.value(*logits);
                let n = lv.len() as f64;
                let d = lv
                    .data
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        if x.abs() > *clamp {
                            0.0
                        } else {
                            g.data[0] * weights[j] * (sigmoid(x) - targets[j]) / n
                        }
                    })
                    .collect();
                self.acc(grads, *logits, Tensor::from_vec(lv.rows, lv.cols, d));
            }
        }
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

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Central finite-difference check of `f` against its tape gradient for every
/// scalar of the listed parameters. Returns the worst relative error seen,
/// using `|a - n| / max(|a| + |n|, floor)` as the metric.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    step: f64,
    floor: f64,
    f: F,
) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g);
        g.backward(out)
    };
    let mut report = GradCheckReport::default();
    for &pid in params {
        let n = store.get(pid).len();
        for k in 0..n {
            let orig = store.get(pid).data[k];
            store.get_mut(pid).data[k] = orig + step;
            let plus = {
                let mut g = Graph::new(store);
                let out = f(&mut g);
                g.value(out).item()
            };
            store.get_mut(pid).data[k] = orig - step;
            let minus = {
                let mut g = Graph::new(store);
                let out = f(&mut g);
                g.value(out).item()
            };
            store.get_mut(pid).data[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(pid).map_or(0.0, |t| t.data[k]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst = Some((store.name(pid).to_string(), k, a, numeric));
            }
        }
    }
    report
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    /// (parameter name, flat index, analytic, numeric) at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let ids: Vec<_> = store.ids().collect();
        let r = finite_difference_check(store, &ids, 1e-5, 1e-6, f);
        assert!(r.worst_rel < 1e-6, "{r:?}");
    }

    fn store_with(shapes: &[(usize, usize)]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::uniform(r, c, 1.0, &mut rng));
        }
        s
    }

    #[test]
    fn matmul_and_bias() {
        let mut s = store_with(&[(3, 4), (4, 2), (1, 2)]);
        check(&mut s, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let c = g.param(ParamId(2));
            let y = g.matmul(a, b);
            let y = g.add_row(y, c);
            let y = g.tanh(y);
            let y = g.mul(y, y);
            g.sum(y)
        });
    }

    #[test]
    fn masked_softmax_zeroes_excluded_entries() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row_vector(vec![3.0, 1.0, -2.0]));
        let y = g.softmax_rows(x, Some(&[true, false, true]));
        let v = g.value(y);
        assert_eq!(v.data[1], 0.0);
        assert!((v.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_nll_and_bce_gradients() {
        let mut s = store_with(&[(3, 5), (1, 4)]);
        check(&mut s, |g| {
            let a = g.param(ParamId(0));
            let sm = g.softmax_rows(a, Some(&[true, true, false, true, true]));
            let nll = g.softmax_nll(a, &[0, 4, 2]);
            let b = g.param(ParamId(1));
            let bce = g.weighted_bce(b, &[1.0, 0.0, 1.0, 0.0], &[1.0, 2.0, 0.5, 3.0], 30.0);
            let s1 = g.sum(sm);
            let sq = g.mul(sm, sm);
            let s2 = g.sum(sq);
            let t = g.add(nll, bce);
            let t = g.add(t, s2);
            g.add(t, s1)
        });
    }

    #[test]
    fn structural_ops_gradients() {
        let mut s = store_with(&[(4, 3), (4, 2), (1, 1)]);
        check(&mut s, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let k = g.param(ParamId(2));
            let c = g.concat_cols(&[a, b]);
            let c = g.slice_cols(c, 1, 3);
            let r = g.gather_rows(c, &[0, 2, 2, 3]);
            let r2 = g.concat_rows(&[r, c]);
            let r2 = g.reshape(r2, 3, 8);
            let r2 = g.relu(r2);
            let r2 = g.sigmoid(r2);
            let r2 = g.scale_by(k, r2);
            let r2 = g.scale(r2, 0.3);
            let d = g.mse(r2, r2);
            let m = g.mean(r2);
            g.add(m, d)
        });
    }
}
