//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly; values are computed when a
//! node is pushed. Nodes only ever reference earlier nodes, so the tape is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Every node is viewed as a matrix (`rows x cols`, see [`Tensor::rows`]).
//! Shape violations inside the graph are contract violations and panic; the
//! public model-level entry points validate their inputs first.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named parameter tensors owned by a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.id_of(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Param {
            name,
            value: value.with_requires_grad(true),
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }
}

/// Gradients for every parameter of a [`ParamStore`], aligned by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    grads: Vec<Tensor>,
}

impl GradientMap {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradientMap {
            grads: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientMap, scale: f64) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    /// `a * mul + add`; only the scale matters for the gradient.
    Affine(Var, f64),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    AddN(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    PowConst(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Dropout(Var, Vec<f64>),
    L2Normalize(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Maximum(a, b) | AddRow(a, b) | MatMul(a, b) | MatMulNT(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | Affine(a, _)
            | MulConst(a, _)
            | SliceCols(a, _, _)
            | Gather(a, _)
            | MeanRows(a)
            | SumAll(a)
            | Softmax(a)
            | LogSoftmax(a)
            | Log(a)
            | Exp(a)
            | PowConst(a, _)
            | Gelu(a)
            | Relu(a)
            | Dropout(a, _)
            | L2Normalize(a) => vec![*a],
            ConcatCols(v) | AddN(v) => v.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Minimum L2 norm used by [`Graph::l2_normalize`] to avoid division by zero.
pub const L2_NORM_FLOOR: f64 = 1e-12;

/// A recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and
    /// influenced the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert!(
        a.rows() == b.rows() && a.cols() == b.cols(),
        "{what}: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data)
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; its `requires_grad` flag is taken from the tensor.
    pub fn input(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value.with_requires_grad(false))
    }

    /// Leaf bound to a stored parameter. Each parameter maps to one leaf per
    /// graph, so gradients from every use are accumulated in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = store
            .get(id)
            .clone()
            .with_requires_grad(store.is_trainable(id));
        let v = self.input(value);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(t, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(t, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "maximum");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p.max(*q)).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(t, Op::Maximum(a, b))
    }

    /// Adds a `1 x c` row (e.g. a bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, b) = (self.value(a), self.value(row));
        assert!(
            b.rows() == 1 && b.cols() == x.cols(),
            "add_row: {:?} + {:?}",
            x.shape(),
            b.shape()
        );
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % c])
            .collect();
        let t = mat(x.rows(), c, data);
        self.push(t, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s))
    }

    /// `mul * a + add`, elementwise with scalar constants.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let t = self.value(a).map(|v| mul * v + add);
        self.push(t, Op::Affine(a, mul))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        let x = self.value(a);
        same_shape(x, c, "mul_const");
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(t, Op::MulConst(a, c.data().to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(
            x.cols(),
            y.rows(),
            "matmul: {:?} x {:?}",
            x.shape(),
            y.shape()
        );
        let (r, k, c) = (x.rows(), x.cols(), y.cols());
        let mut out = vec![0.0; r * c];
        tensor::matmul_into(x.data(), y.data(), r, k, c, &mut out);
        self.push(mat(r, c, out), Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(
            x.cols(),
            y.cols(),
            "matmul_nt: {:?} x {:?}^T",
            x.shape(),
            y.shape()
        );
        let (r, k, c) = (x.rows(), x.cols(), y.rows());
        let mut out = vec![0.0; r * c];
        tensor::matmul_nt_into(x.data(), y.data(), r, k, c, &mut out);
        self.push(mat(r, c, out), Op::MatMulNT(a, b))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start < end && end <= x.cols(), "slice_cols {start}..{end}");
        let (r, c, w) = (x.rows(), x.cols(), end - start);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&x.data()[i * c + start..i * c + end]);
        }
        self.push(mat(r, w, out), Op::SliceCols(a, start, end))
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows(), r, "concat_cols row mismatch");
            let c = x.cols();
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(x.row(i));
            }
            off += c;
        }
        self.push(mat(r, total, out), Op::ConcatCols(parts.to_vec()))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let c = t.cols();
        assert!(!indices.is_empty(), "gather_rows with no indices");
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < t.rows(), "gather_rows index {i} >= {}", t.rows());
            out.extend_from_slice(t.row(i));
        }
        self.push(mat(indices.len(), c, out), Op::Gather(table, indices.to_vec()))
    }

    /// Mean over rows, producing a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        self.push(mat(1, c, out), Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n of nothing");
        let mut acc = self.value(parts[0]).clone().with_requires_grad(false);
        for &p in &parts[1..] {
            let x = self.value(p);
            same_shape(&acc, x, "add_n");
            for (a, b) in acc.data_mut().iter_mut().zip(x.data()) {
                *a += b;
            }
        }
        self.push(acc, Op::AddN(parts.to_vec()))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let m = mat(r, c, x.data().to_vec());
        let t = tensor::softmax(&m, 1).expect("softmax on non-finite graph values");
        let t = t.reshape(x.shape().to_vec()).unwrap();
        self.push(t, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.push(t, Op::LogSoftmax(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    /// Elementwise `a^e` for a constant exponent.
    pub fn pow_const(&mut self, a: Var, e: f64) -> Var {
        let t = self.value(a).map(|v| v.powf(e));
        self.push(t, Op::PowConst(a, e))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(tensor::gelu_scalar);
        self.push(t, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// Row-wise layer normalisation with learnable `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        assert!(g.len() == c && b.len() == c, "layer_norm parameter width");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let (mean, inv_std) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g.data()[j] + b.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    /// Inverted dropout. `rng == None` is evaluation mode: the identity,
    /// returning `a` itself without recording a node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: Option<&mut R>) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0,1)");
        let Some(rng) = rng else { return a };
        if p == 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with an explicit, already scaled mask.
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "dropout mask length");
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        self.push(t, Op::Dropout(a, mask))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::new(x.shape().to_vec(), out).unwrap();
        self.push(t, Op::L2Normalize(a))
    }

    /// Linear layer: `x * w + b` with `w` of shape `in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Takes `&self`: calling it twice returns identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().any(|inp| inp.0 >= i) {
                return Err(Error::Graph(format!("cycle through node {i}")));
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).unwrap())
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Collects parameter gradients; parameters absent from the graph or
    /// unused by the loss get exact zeros.
    pub fn param_gradients(&self, grads: &Gradients, store: &ParamStore) -> GradientMap {
        let mut map = GradientMap::zeros_like(store);
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                map.grads[id.0] = g.clone().with_requires_grad(false);
            }
        }
        map
    }

    /// `backward` followed by [`Graph::param_gradients`].
    pub fn backward_params(&self, loss: Var, store: &ParamStore) -> Result<GradientMap> {
        let grads = self.backward(loss)?;
        Ok(self.param_gradients(&grads, store))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        // Accumulates into the gradient buffer of `v`, allocating zeros lazily.
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
            let n = nodes[v.0].value.len();
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let nodes = &self.nodes;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        let ga = acc(grads, nodes, v);
                        ga.iter_mut().zip(g).for_each(|(x, d)| *x += sign * d);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        let ga = acc(grads, nodes, v);
                        ga.iter_mut().zip(g).for_each(|(x, d)| *x += sign * d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    let ga = acc(grads, nodes, *a);
                    for ((x, d), o) in ga.iter_mut().zip(g).zip(other) {
                        *x += d * o;
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    let gb = acc(grads, nodes, *b);
                    for ((x, d), o) in gb.iter_mut().zip(g).zip(other) {
                        *x += d * o;
                    }
                }
            }
            Op::Maximum(a, b) => {
                let (x, z) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (k, d) in g.iter().enumerate() {
                        if x[k] >= z[k] {
                            ga[k] += d;
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    for (k, d) in g.iter().enumerate() {
                        if x[k] < z[k] {
                            gb[k] += d;
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if wants(*b) {
                    let c = y.cols();
                    let gb = acc(grads, nodes, *b);
                    for (k, d) in g.iter().enumerate() {
                        gb[k % c] += d;
                    }
                }
            }
            Op::Scale(a, s) | Op::Affine(a, s) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
                }
            }
            Op::MulConst(a, c) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for ((x, d), k) in ga.iter_mut().zip(g).zip(c) {
                        *x += d * k;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (x, w) = (val(*a), val(*b));
                let (r, k, c) = (x.rows(), x.cols(), w.cols());
                if wants(*a) {
                    // dA = G * B^T, B is k x c
                    let ga = acc(grads, nodes, *a);
                    tensor::matmul_nt_into(g, w.data(), r, c, k, ga);
                }
                if wants(*b) {
                    // dB = A^T * G
                    let gb = acc(grads, nodes, *b);
                    tensor::matmul_tn_into(x.data(), g, r, k, c, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // Y = A B^T, A: r x k, B: c x k
                let (x, w) = (val(*a), val(*b));
                let (r, k, c) = (x.rows(), x.cols(), w.rows());
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    tensor::matmul_into(g, w.data(), r, c, k, ga);
                }
                if wants(*b) {
                    // dB = G^T A
                    let gb = acc(grads, nodes, *b);
                    tensor::matmul_tn_into(g, x.data(), r, c, k, gb);
                }
            }
            Op::SliceCols(a, start, end) => {
                if wants(*a) {
                    let c = val(*a).cols();
                    let w = end - start;
                    let ga = acc(grads, nodes, *a);
                    for (row, grow) in g.chunks(w).enumerate() {
                        for (j, d) in grow.iter().enumerate() {
                            ga[row * c + start + j] += d;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if wants(p) {
                        let gp = acc(grads, nodes, p);
                        for (row, grow) in g.chunks(total).enumerate() {
                            for j in 0..c {
                                gp[row * c + j] += grow[off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Gather(table, idx) => {
                if wants(*table) {
                    let c = y.cols();
                    let gt = acc(grads, nodes, *table);
                    for (row, &t) in idx.iter().enumerate() {
                        for j in 0..c {
                            gt[t * c + j] += g[row * c + j];
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let x = val(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let ga = acc(grads, nodes, *a);
                    for row in ga.chunks_mut(c) {
                        for (x, d) in row.iter_mut().zip(g) {
                            *x += d / r as f64;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    if wants(p) {
                        let gp = acc(grads, nodes, p);
                        gp.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let c = y.cols();
                    let ga = acc(grads, nodes, *a);
                    for ((grow, yrow), garow) in
                        g.chunks(c).zip(y.data().chunks(c)).zip(ga.chunks_mut(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(d, p)| d * p).sum();
                        for j in 0..c {
                            garow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if wants(*a) {
                    let c = y.cols();
                    let ga = acc(grads, nodes, *a);
                    for ((grow, yrow), garow) in
                        g.chunks(c).zip(y.data().chunks(c)).zip(ga.chunks_mut(c))
                    {
                        let total: f64 = grow.iter().sum();
                        for j in 0..c {
                            garow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                }
            }
            Op::Log(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    let ga = acc(grads, nodes, *a);
                    for ((o, d), v) in ga.iter_mut().zip(g).zip(x) {
                        *o += d / v;
                    }
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for ((o, d), v) in ga.iter_mut().zip(g).zip(y.data()) {
                        *o += d * v;
                    }
                }
            }
            Op::PowConst(a, e) => {
                if wants(*a) {
                    let x = val(*a).data();
                    let ga = acc(grads, nodes, *a);
                    for ((o, d), v) in ga.iter_mut().zip(g).zip(x) {
                        if *e != 0.0 {
                            *o += d * e * v.powf(e - 1.0);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    let ga = acc(grads, nodes, *a);
                    for ((o, d), v) in ga.iter_mut().zip(g).zip(x) {
                        *o += d * tensor::gelu_derivative(*v);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    let ga = acc(grads, nodes, *a);
                    for ((o, d), v) in ga.iter_mut().zip(g).zip(x) {
                        if *v > 0.0 {
                            *o += d;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = val(*x);
                let gm = val(*gamma).data();
                let c = xv.cols();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xv.len()];
                for ((row, grow), dxrow) in
                    xv.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c))
                {
                    let (mean, inv_std) = row_stats(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gm).map(|(d, s)| d * s).collect();
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxrow[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                for (v, d) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if wants(v) {
                        let gv = acc(grads, nodes, v);
                        gv.iter_mut().zip(&d).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for ((o, d), m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += d * m;
                    }
                }
            }
            Op::L2Normalize(a) => {
                if wants(*a) {
                    let x = val(*a);
                    let c = x.cols();
                    let ga = acc(grads, nodes, *a);
                    for (((xrow, yrow), grow), garow) in x
                        .data()
                        .chunks(c)
                        .zip(y.data().chunks(c))
                        .zip(g.chunks(c))
                        .zip(ga.chunks_mut(c))
                    {
                        let raw = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let n = raw.max(L2_NORM_FLOOR);
                        if raw < L2_NORM_FLOOR {
                            for j in 0..c {
                                garow[j] += grow[j] / n;
                            }
                            continue;
                        }
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, d)| p * d).sum();
                        for j in 0..c {
                            garow[j] += (grow[j] - yrow[j] * dot) / n;
                        }
                    }
                }
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}
