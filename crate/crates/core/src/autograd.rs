//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Trainable weights live in a [`ParamStore`] that outlives the graph; the
//! graph only borrows it, so building a graph never copies parameters.
//! Calling [`Graph::backward`] walks the tape once in reverse.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name; parameter names are fixed by model code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
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
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Statistics per column, taken down the rows (per channel over time).
    Rows,
    /// Statistics per row, taken across the columns (per frame over channels).
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Standardize { x: Var, axis: Axis, eps: f64 },
    Unfold { x: Var, kernel: usize, dilation: usize },
    DepthwiseConv { x: Var, kernel: Var },
    Gather { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    track_params: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p> Graph<'p> {
    /// Graph whose parameter leaves receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            track_params: true,
            dropout_rng: None,
        }
    }

    /// Graph for evaluation: parameters are constants and dropout is off.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            track_params: false,
            ..Self::new(params)
        }
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn watch(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Copies the value of `v` into a fresh constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// `a[T×C] + b[1×C]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.shape(), (1, ta.cols()), "add_row expects [1 x {}]", ta.cols());
        let mut t = ta.clone();
        for r in 0..t.rows() {
            for (x, y) in t.row_mut(r).iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::AddRow(a, b), rg)
    }

    /// `a[T×C] ⊙ b[1×C]`, broadcasting `b` over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.shape(), (1, ta.cols()), "mul_row expects [1 x {}]", ta.cols());
        let mut t = ta.clone();
        for r in 0..t.rows() {
            for (x, y) in t.row_mut(r).iter_mut().zip(tb.data()) {
                *x *= y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MulRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a).clone().reshape(rows, cols);
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(t, Op::Abs(a), rg)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// Column means as a `[1 × C]` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(t, Op::MeanRows(a), rg)
    }

    /// `(x − μ) / (σ + eps)` with population statistics along `axis`.
    pub fn standardize(&mut self, x: Var, axis: Axis, eps: f64) -> Var {
        let t = standardize_forward(self.value(x), axis, eps);
        let rg = self.rg(x);
        self.push(t, Op::Standardize { x, axis, eps }, rg)
    }

    /// im2col for a same-padded 1-D convolution over rows.
    ///
    /// `[T × C]` becomes `[T × K·C]`; column block `k` holds the input shifted
    /// by `(k − (K−1)/2) · dilation` frames, zero outside the sequence.
    pub fn unfold(&mut self, x: Var, kernel: usize, dilation: usize) -> Var {
        assert!(kernel % 2 == 1, "unfold expects an odd kernel width");
        let t = unfold_forward(self.value(x), kernel, dilation);
        let rg = self.rg(x);
        self.push(
            t,
            Op::Unfold {
                x,
                kernel,
                dilation,
            },
            rg,
        )
    }

    /// Same-padded per-channel convolution of `x[T×C]` with `kernel[C×K]`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var) -> Var {
        let t = depthwise_forward(self.value(x), self.value(kernel));
        let rg = self.rg(x) || self.rg(kernel);
        self.push(t, Op::DepthwiseConv { x, kernel }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let t = self.value(x).select_rows(&idx);
        let rg = self.rg(x);
        self.push(t, Op::Gather { x, idx }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_cols(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x).slice_rows(start, len);
        let rg = self.rg(x);
        self.push(t, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x).slice_cols(start, len);
        let rg = self.rg(x);
        self.push(t, Op::SliceCols { x, start }, rg)
    }

    /// Inverted dropout. Identity unless the graph was built with a dropout RNG.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (r, c) = self.shape(x);
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - p;
        let mask = Tensor::from_fn(r, c, |_, _| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.input(mask);
        self.mul(x, m)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            param_nodes: self.param_nodes.iter().map(|(&p, &v)| (p, v)).collect(),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.as_ref();
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                acc(*b, sum_rows(g));
            }
            Op::MulRow(a, b) => {
                let tb = self.value(*b);
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    for (x, y) in ga.row_mut(r).iter_mut().zip(tb.data()) {
                        *x *= y;
                    }
                }
                acc(*a, ga);
                acc(*b, sum_rows(&g.zip_map(self.value(*a), |x, y| x * y)));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    gemm(false, g, true, tb, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                    gemm(true, ta, false, g, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, g.clone().reshape(r, c));
            }
            Op::Tanh(a) => {
                let y = out.expect("tanh output");
                acc(*a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Sigmoid(a) => {
                let y = out.expect("sigmoid output");
                acc(*a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Relu(a) => {
                acc(*a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Exp(a) => {
                let y = out.expect("exp output");
                acc(*a, g.zip_map(y, |gv, yv| gv * yv));
            }
            Op::Abs(a) => {
                acc(*a, g.zip_map(self.value(*a), |gv, x| gv * sign(x)));
            }
            Op::SoftmaxRows(a) => {
                let y = out.expect("softmax output");
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, Tensor::full(r, c, g.item() / (r * c) as f64));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let inv = 1.0 / r as f64;
                acc(*a, Tensor::from_fn(r, c, |_, j| g.get(0, j) * inv));
            }
            Op::Standardize { x, axis, eps } => {
                acc(*x, standardize_backward(self.value(*x), g, *axis, *eps));
            }
            Op::Unfold {
                x,
                kernel,
                dilation,
            } => {
                let (r, c) = self.shape(*x);
                acc(*x, unfold_backward(g, r, c, *kernel, *dilation));
            }
            Op::DepthwiseConv { x, kernel } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (gx, gk) = depthwise_backward(tx, tk, g);
                acc(*x, gx);
                acc(*kernel, gk);
            }
            Op::Gather { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for (row, &src) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p).0;
                    if self.rg(p) {
                        acc(p, g.slice_rows(start, len));
                    }
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p).1;
                    if self.rg(p) {
                        acc(p, g.slice_cols(start, len));
                    }
                    start += len;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, gx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut gx = Tensor::zeros(r, c);
                for row in 0..r {
                    gx.row_mut(row)[*start..start + g.cols()].copy_from_slice(g.row(row));
                }
                acc(*x, gx);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a watched leaf or intermediate node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_nodes
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Moves parameter gradients into a store-indexed accumulator.
    pub fn into_param_grads(mut self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::new(store);
        for (p, v) in &self.param_nodes {
            if let Some(g) = self.grads[v.0].take() {
                out.grads[p.0] = Some(g);
            }
        }
        out
    }
}

/// Parameter gradients indexed like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, other: ParamGrads) {
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            match (slot.as_mut(), g) {
                (Some(s), Some(g)) => s.add_assign(&g),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sum_rows(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Iterates groups of element offsets: each column for `Axis::Rows`, each row for `Axis::Cols`.
fn groups(shape: (usize, usize), axis: Axis) -> (usize, usize, usize, usize) {
    let (r, c) = shape;
    match axis {
        // (group count, group length, group stride, element stride)
        Axis::Rows => (c, r, 1, c),
        Axis::Cols => (r, c, c, 1),
    }
}

pub(crate) fn standardize_forward(x: &Tensor, axis: Axis, eps: f64) -> Tensor {
    let (ng, n, gs, es) = groups(x.shape(), axis);
    let mut out = x.clone();
    let d = x.data();
    let o = out.data_mut();
    for gi in 0..ng {
        let base = gi * gs;
        let mean = (0..n).map(|k| d[base + k * es]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|k| (d[base + k * es] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let denom = var.sqrt() + eps;
        for k in 0..n {
            o[base + k * es] = (d[base + k * es] - mean) / denom;
        }
    }
    out
}

fn standardize_backward(x: &Tensor, g: &Tensor, axis: Axis, eps: f64) -> Tensor {
    let (ng, n, gs, es) = groups(x.shape(), axis);
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let (d, gd) = (x.data(), g.data());
    let o = out.data_mut();
    let nf = n as f64;
    for gi in 0..ng {
        let base = gi * gs;
        let mean = (0..n).map(|k| d[base + k * es]).sum::<f64>() / nf;
        let var = (0..n)
            .map(|k| (d[base + k * es] - mean).powi(2))
            .sum::<f64>()
            / nf;
        let sigma = var.sqrt();
        let s = sigma + eps;
        let gmean = (0..n).map(|k| gd[base + k * es]).sum::<f64>() / nf;
        let gdot: f64 = (0..n)
            .map(|k| gd[base + k * es] * (d[base + k * es] - mean))
            .sum();
        for k in 0..n {
            let xc = d[base + k * es] - mean;
            let mut v = (gd[base + k * es] - gmean) / s;
            if sigma > 0.0 {
                v -= xc * gdot / (nf * sigma * s * s);
            }
            o[base + k * es] = v;
        }
    }
    out
}

fn unfold_forward(x: &Tensor, kernel: usize, dilation: usize) -> Tensor {
    let (t, c) = x.shape();
    let half = (kernel - 1) / 2;
    let mut out = Tensor::zeros(t, kernel * c);
    for row in 0..t {
        for k in 0..kernel {
            let src = row as isize + (k as isize - half as isize) * dilation as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            out.row_mut(row)[k * c..(k + 1) * c].copy_from_slice(x.row(src as usize));
        }
    }
    out
}

fn unfold_backward(g: &Tensor, t: usize, c: usize, kernel: usize, dilation: usize) -> Tensor {
    let half = (kernel - 1) / 2;
    let mut gx = Tensor::zeros(t, c);
    for row in 0..t {
        for k in 0..kernel {
            let src = row as isize + (k as isize - half as isize) * dilation as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let gs = &g.row(row)[k * c..(k + 1) * c];
            for (o, v) in gx.row_mut(src as usize).iter_mut().zip(gs) {
                *o += v;
            }
        }
    }
    gx
}

pub(crate) fn depthwise_forward(x: &Tensor, kernel: &Tensor) -> Tensor {
    let (t, c) = x.shape();
    assert_eq!(kernel.rows(), c, "depthwise kernel must have one row per channel");
    let kw = kernel.cols();
    assert!(kw % 2 == 1, "depthwise kernel width must be odd");
    let half = (kw - 1) / 2;
    let mut out = Tensor::zeros(t, c);
    for row in 0..t {
        for k in 0..kw {
            let src = row as isize + k as isize - half as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let xs = x.row(src as usize);
            let o = out.row_mut(row);
            for ch in 0..c {
                o[ch] += kernel.get(ch, k) * xs[ch];
            }
        }
    }
    out
}

fn depthwise_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (t, c) = x.shape();
    let kw = kernel.cols();
    let half = (kw - 1) / 2;
    let mut gx = Tensor::zeros(t, c);
    let mut gk = Tensor::zeros(c, kw);
    for row in 0..t {
        for k in 0..kw {
            let src = row as isize + k as isize - half as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            for ch in 0..c {
                let gv = g.get(row, ch);
                gx.data_mut()[src * c + ch] += gv * kernel.get(ch, k);
                gk.data_mut()[ch * kw + k] += gv * x.get(src, ch);
            }
        }
    }
    (gx, gk)
}
