//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its nodes in evaluation
//! order, so the node list is already a topological order. [`Graph::backward`]
//! walks it in reverse, accumulating adjoints additively when a node fans out.
//!
//! Parameters enter the graph through [`Graph::param`]. Frozen parameters are
//! differentiated like any other (prompt vectors upstream of frozen layers
//! need that signal); the optimizer is what refuses to write to them.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("evaluation is not deterministic: two evaluations at the same point gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("{0}")]
    Evaluation(String),
}

/// A named tensor with a trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of parameters keyed by unique name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    /// Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.params.insert(
            name.clone(),
            Parameter { name, value, trainable },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    /// Panics if the parameter does not exist; model code uses names it
    /// registered itself.
    pub fn tensor(&self, name: &str) -> &Tensor<T> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.params.get_mut(name) {
            p.trainable = trainable;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            name: p.name.clone(),
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Recip(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RowMean(Var),
    RowSum(Var),
    RowVariance(Var),
    MeanRows(Var),
    SumAll(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SubCol(Var, Var),
    MulCol(Var, Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Scalar = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for Gradients<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self { map: iter.into_iter().collect() }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    T::from_f64(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    T::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

/// Tanh-approximated GELU on a plain tensor.
pub fn gelu_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
    let lse = max + total.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = x.dims2();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        softmax_row(x.row(i), &mut out[i * c..(i + 1) * c]);
    }
    Tensor::from_rows(r, c, out)
}

/// A gradient record plus the values it produced.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: never accumulates gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Bind a parameter. Repeated calls with the same name return the same node.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let v = self.push(p.value.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(p.name.clone());
        self.params.insert(p.name.clone(), v);
        v
    }

    /// Bind a parameter from a store by name.
    pub fn param_from(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        self.param(p)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.dims2(), y.dims2(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let (r, c) = x.dims2();
        Tensor::from_rows(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_same(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let v = Tensor::from_rows(r, c, x.data().iter().map(|&p| f(p)).collect());
        let rg = self.rg(&[a]);
        self.push(v, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, T::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, T::recip, Op::Recip(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            log_softmax_row(x.row(i), &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_rows(r, c, out), Op::LogSoftmax(a), rg)
    }

    fn per_row(&mut self, a: Var, f: impl Fn(&[T]) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let (r, _) = x.dims2();
        let data = (0..r).map(|i| f(x.row(i))).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_rows(r, 1, data), op, rg)
    }

    /// `n × D → n × 1` row means.
    pub fn row_mean(&mut self, a: Var) -> Var {
        self.per_row(a, row_mean, Op::RowMean(a))
    }

    /// `n × D → n × 1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        self.per_row(a, |r| r.iter().fold(T::zero(), |s, &v| s + v), Op::RowSum(a))
    }

    /// `n × D → n × 1` population variance of each row.
    pub fn row_variance(&mut self, a: Var) -> Var {
        self.per_row(a, row_variance, Op::RowVariance(a))
    }

    /// `n × D → 1 × D` average over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let v = x.mean_rows().reshape(vec![1, c]);
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::from_f64(1.0 / n as f64))
    }

    fn broadcast(&self, a: Var, b: Var, by_row: bool, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let x = self.value(a);
        let y = self.value(b);
        let (r, c) = x.dims2();
        if by_row {
            assert_eq!(y.len(), c, "row broadcast expects a length-{c} vector");
        } else {
            assert_eq!(y.len(), r, "column broadcast expects {r} entries");
        }
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let yb = if by_row { y.data()[j] } else { y.data()[i] };
                data.push(f(x.data()[i * c + j], yb));
            }
        }
        Tensor::from_rows(r, c, data)
    }

    /// Add a length-`D` vector to every row of an `n × D` matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.broadcast(a, b, true, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::AddRow(a, b), rg)
    }

    /// Multiply every row of an `n × D` matrix elementwise by a length-`D` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.broadcast(a, b, true, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MulRow(a, b), rg)
    }

    /// Subtract entry `i` of an `n × 1` column from row `i`.
    pub fn sub_col(&mut self, a: Var, b: Var) -> Var {
        let v = self.broadcast(a, b, false, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::SubCol(a, b), rg)
    }

    /// Scale row `i` by entry `i` of an `n × 1` column.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let v = self.broadcast(a, b, false, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MulCol(a, b), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        assert!(len > 0 && start + len <= r, "row slice {start}..{} out of {r}", start + len);
        let v = Tensor::from_rows(len, c, x.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), c, "concat_rows column mismatch");
            r += x.rows();
            data.extend_from_slice(x.data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_rows(r, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        assert!(len > 0 && start + len <= c, "column slice {start}..{} out of {c}", start + len);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_rows(r, len, data), Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let x = self.value(p);
                assert_eq!(x.rows(), r, "concat_cols row mismatch");
                data.extend_from_slice(x.row(i));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_rows(r, total, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Rows `ids` of `table`, in order; repeated ids are allowed.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let v = self.value(table).select_rows(ids);
        let rg = self.rg(&[table]);
        self.push(v, Op::GatherRows(table, ids.to_vec()), rg)
    }

    /// `out[i] = a[i, idx[i]]` as an `n × 1` column.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let (r, c) = x.dims2();
        assert_eq!(idx.len(), r, "one index per row required");
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "index {j} out of {c} columns");
                x.get(i, j)
            })
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_rows(r, 1, data), Op::PickPerRow(a, idx.to_vec()), rg)
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Returns the gradient of every parameter reachable from `loss`,
    /// frozen ones included. A loss that does not depend on any parameter
    /// yields an empty map and a logged warning.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutogradError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutogradError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            log::warn!("backward called on a loss detached from every parameter");
            return Ok(Gradients::default());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                // Parameter leaves keep their adjoint; restored below.
                grads[idx] = Some(gy);
                continue;
            }
            self.propagate(idx, &gy, &mut grads);
        }

        let mut map = BTreeMap::new();
        for (name, &v) in &self.params {
            if v.0 > loss.0 {
                continue;
            }
            if let Some(g) = grads[v.0].take() {
                let shape = self.nodes[v.0].value.shape().to_vec();
                map.insert(name.clone(), Tensor::new(shape, g));
            }
        }
        Ok(Gradients { map })
    }

    fn propagate(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let (yr, yc) = y.dims2();
        let zero = T::zero();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let gyt = Tensor::from_rows(yr, yc, gy.to_vec());
                if self.requires_grad(*a) {
                    let ga = gyt.matmul(&bv.transpose());
                    self.acc(grads, *a, ga.data());
                }
                if self.requires_grad(*b) {
                    let gb = av.transpose().matmul(&gyt);
                    self.acc(grads, *b, gb.data());
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy);
                self.acc(grads, *b, gy);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy);
                let neg: Vec<T> = gy.iter().map(|&g| -g).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let g: Vec<T> = gy.iter().zip(bv).map(|(&g, &q)| g * q).collect();
                    self.acc(grads, *a, &g);
                }
                if self.requires_grad(*b) {
                    let g: Vec<T> = gy.iter().zip(av).map(|(&g, &p)| g * p).collect();
                    self.acc(grads, *b, &g);
                }
            }
            Op::Scale(a, s) => {
                let g: Vec<T> = gy.iter().map(|&g| g * *s).collect();
                self.acc(grads, *a, &g);
            }
            Op::AddScalar(a) => self.acc(grads, *a, gy),
            Op::Exp(a) => {
                let g: Vec<T> = gy.iter().zip(y.data()).map(|(&g, &v)| g * v).collect();
                self.acc(grads, *a, &g);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let g: Vec<T> = gy.iter().zip(x).map(|(&g, &v)| g / v).collect();
                self.acc(grads, *a, &g);
            }
            Op::Sqrt(a) => {
                let two = T::from_f64(2.0);
                let g: Vec<T> = gy.iter().zip(y.data()).map(|(&g, &v)| g / (two * v)).collect();
                self.acc(grads, *a, &g);
            }
            Op::Recip(a) => {
                let g: Vec<T> = gy.iter().zip(y.data()).map(|(&g, &v)| -g * v * v).collect();
                self.acc(grads, *a, &g);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let g: Vec<T> = gy.iter().zip(x).map(|(&g, &v)| g * gelu_grad(v)).collect();
                self.acc(grads, *a, &g);
            }
            Op::Softmax(a) => {
                let mut g = vec![zero; yr * yc];
                for i in 0..yr {
                    let yrow = y.row(i);
                    let grow = &gy[i * yc..(i + 1) * yc];
                    let dot = yrow.iter().zip(grow).fold(zero, |s, (&p, &q)| s + p * q);
                    for j in 0..yc {
                        g[i * yc + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.acc(grads, *a, &g);
            }
            Op::LogSoftmax(a) => {
                let mut g = vec![zero; yr * yc];
                for i in 0..yr {
                    let grow = &gy[i * yc..(i + 1) * yc];
                    let total = grow.iter().fold(zero, |s, &q| s + q);
                    for j in 0..yc {
                        g[i * yc + j] = grow[j] - y.get(i, j).exp() * total;
                    }
                }
                self.acc(grads, *a, &g);
            }
            Op::RowMean(a) => {
                let (r, c) = self.value(*a).dims2();
                let inv = T::from_f64(1.0 / c as f64);
                let mut g = vec![zero; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = gy[i] * inv;
                    }
                }
                self.acc(grads, *a, &g);
            }
            Op::RowSum(a) => {
                let (r, c) = self.value(*a).dims2();
                let mut g = vec![zero; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = gy[i];
                    }
                }
                self.acc(grads, *a, &g);
            }
            Op::RowVariance(a) => {
                let x = self.value(*a);
                let (r, c) = x.dims2();
                let k = T::from_f64(2.0 / c as f64);
                let mut g = vec![zero; r * c];
                for i in 0..r {
                    let mu = row_mean(x.row(i));
                    for j in 0..c {
                        g[i * c + j] = gy[i] * k * (x.get(i, j) - mu);
                    }
                }
                self.acc(grads, *a, &g);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).dims2();
                let inv = T::from_f64(1.0 / r as f64);
                let mut g = vec![zero; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = gy[j] * inv;
                    }
                }
                self.acc(grads, *a, &g);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, &vec![gy[0]; n]);
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, gy);
                if self.requires_grad(*b) {
                    let mut g = vec![zero; yc];
                    for i in 0..yr {
                        for j in 0..yc {
                            g[j] = g[j] + gy[i * yc + j];
                        }
                    }
                    self.acc(grads, *b, &g);
                }
            }
            Op::MulRow(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let mut g = vec![zero; yr * yc];
                    for i in 0..yr {
                        for j in 0..yc {
                            g[i * yc + j] = gy[i * yc + j] * bv[j];
                        }
                    }
                    self.acc(grads, *a, &g);
                }
                if self.requires_grad(*b) {
                    let mut g = vec![zero; yc];
                    for i in 0..yr {
                        for j in 0..yc {
                            g[j] = g[j] + gy[i * yc + j] * av.get(i, j);
                        }
                    }
                    self.acc(grads, *b, &g);
                }
            }
            Op::SubCol(a, b) => {
                self.acc(grads, *a, gy);
                if self.requires_grad(*b) {
                    let g: Vec<T> = (0..yr)
                        .map(|i| -gy[i * yc..(i + 1) * yc].iter().fold(zero, |s, &q| s + q))
                        .collect();
                    self.acc(grads, *b, &g);
                }
            }
            Op::MulCol(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let mut g = vec![zero; yr * yc];
                    for i in 0..yr {
                        for j in 0..yc {
                            g[i * yc + j] = gy[i * yc + j] * bv[i];
                        }
                    }
                    self.acc(grads, *a, &g);
                }
                if self.requires_grad(*b) {
                    let g: Vec<T> = (0..yr)
                        .map(|i| {
                            (0..yc).fold(zero, |s, j| s + gy[i * yc + j] * av.get(i, j))
                        })
                        .collect();
                    self.acc(grads, *b, &g);
                }
            }
            Op::SliceRows(a, start) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a);
                    let mut g = vec![zero; x.len()];
                    let c = x.cols();
                    g[start * c..start * c + gy.len()].copy_from_slice(gy);
                    self.acc(grads, *a, &g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, &gy[off..off + n]);
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a);
                    let (r, c) = x.dims2();
                    let mut g = vec![zero; r * c];
                    for i in 0..r {
                        g[i * c + start..i * c + start + yc]
                            .copy_from_slice(&gy[i * yc..(i + 1) * yc]);
                    }
                    self.acc(grads, *a, &g);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut g = Vec::with_capacity(yr * pc);
                        for i in 0..yr {
                            g.extend_from_slice(&gy[i * yc + off..i * yc + off + pc]);
                        }
                        self.acc(grads, p, &g);
                    }
                    off += pc;
                }
            }
            Op::Transpose(a) => {
                let g = Tensor::from_rows(yr, yc, gy.to_vec()).transpose();
                self.acc(grads, *a, g.data());
            }
            Op::GatherRows(table, ids) => {
                if self.requires_grad(*table) {
                    let x = self.value(*table);
                    let c = x.cols();
                    let mut g = vec![zero; x.len()];
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            g[id * c + j] = g[id * c + j] + gy[k * c + j];
                        }
                    }
                    self.acc(grads, *table, &g);
                }
            }
            Op::PickPerRow(a, idx) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a);
                    let c = x.cols();
                    let mut g = vec![zero; x.len()];
                    for (i, &j) in idx.iter().enumerate() {
                        g[i * c + j] = gy[i];
                    }
                    self.acc(grads, *a, &g);
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &x) in existing.iter_mut().zip(g) {
                    *e = *e + x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

fn row_mean<T: Scalar>(row: &[T]) -> T {
    row.iter().fold(T::zero(), |s, &v| s + v) / T::from_f64(row.len() as f64)
}

fn row_variance<T: Scalar>(row: &[T]) -> T {
    let mu = row_mean(row);
    row.iter().fold(T::zero(), |s, &v| s + (v - mu) * (v - mu)) / T::from_f64(row.len() as f64)
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub entries_checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences.
///
/// `eval` builds the scalar loss on a fresh graph for the given parameter
/// values. Up to `samples` scalar entries are drawn uniformly from the
/// trainable parameters in `params`; all of them are checked when there are
/// fewer.
pub fn finite_diff_check<F, R>(
    eval: F,
    params: &ParamStore<f64>,
    eps: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport, AutogradError>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, AutogradError>,
    R: Rng + ?Sized,
{
    let value_at = |store: &ParamStore<f64>| -> Result<f64, AutogradError> {
        let mut g = Graph::new();
        let loss = eval(store, &mut g)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let loss = eval(params, &mut g)?;
    let base = g.value(loss).item();
    let again = value_at(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(AutogradError::NonDeterministic { first: base, second: again });
    }
    let grads = g.backward(loss)?;

    let entries: Vec<(String, usize)> = params
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| (0..p.value.len()).map(move |i| (p.name.clone(), i)))
        .collect();
    let chosen: Vec<usize> = if entries.len() <= samples {
        (0..entries.len()).collect()
    } else {
        let mut idx = sample(rng, entries.len(), samples).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheckReport { max_relative_error: 0.0, entries_checked: 0, worst: None };
    let mut probe = params.clone();
    for &k in &chosen {
        let (name, i) = &entries[k];
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[*i]);
        let orig = probe.tensor(name).data()[*i];
        probe.get_mut(name).unwrap().value.data_mut()[*i] = orig + eps;
        let plus = value_at(&probe)?;
        probe.get_mut(name).unwrap().value.data_mut()[*i] = orig - eps;
        let minus = value_at(&probe)?;
        probe.get_mut(name).unwrap().value.data_mut()[*i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        report.entries_checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = err;
            report.worst = Some((name.clone(), *i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, t: Tensor<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, t, true);
        s
    }

    #[test]
    fn square_sum_gradient() {
        let s = store_with("p", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let p = g.param_from(&s, "p");
        let sq = g.mul(p, p);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get("p").unwrap().shape(), &[2]);
    }

    #[test]
    fn unreached_parameter_is_absent() {
        let mut s = store_with("p", Tensor::from_vec(vec![1.0, 2.0]));
        s.insert("q", Tensor::from_vec(vec![3.0]), true);
        let mut g = Graph::new();
        let _p = g.param_from(&s, "p");
        let q = g.param_from(&s, "q");
        let loss = g.sum(q);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("p").is_none());
        assert_eq!(grads.get("q").unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let s = store_with("p", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let p = g.param_from(&s, "p");
        assert!(matches!(g.backward(p), Err(AutogradError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_loss_gives_empty_map() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn frozen_parameter_still_gets_gradient() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![2.0]), false);
        let mut g = Graph::<f64>::new();
        let w = g.param_from(&s, "w");
        let y = g.mul(w, w);
        let loss = g.sum(y);
        assert_eq!(g.backward(loss).unwrap().get("w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let s = store_with("p", Tensor::from_vec(vec![3.0]));
        let mut g = Graph::new();
        let p = g.param_from(&s, "p");
        let a = g.scale(p, 2.0);
        let b = g.add(a, p);
        let loss = g.sum(b);
        assert_eq!(g.backward(loss).unwrap().get("p").unwrap().data(), &[3.0]);
    }

    #[test]
    fn linear_map_check_is_exact() {
        let c = Tensor::<f64>::from_f64_rows(1, 4, &[0.5, -1.5, 2.0, 3.25]);
        let s = store_with("theta", Tensor::from_f64_rows(4, 1, &[1.0, 2.0, -1.0, 0.3]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = finite_diff_check(
            |st, g| {
                let cv = g.constant(c.clone());
                let th = g.param_from(st, "theta");
                let y = g.matmul(cv, th);
                Ok(g.sum(y))
            },
            &s,
            1e-5,
            100,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.entries_checked, 4);
        assert!(report.max_relative_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn two_layer_mlp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert("w1", Tensor::randn(&[5, 8], 0.5, &mut rng), true);
        s.insert("b1", Tensor::randn(&[8], 0.1, &mut rng), true);
        s.insert("w2", Tensor::randn(&[8, 3], 0.5, &mut rng), true);
        s.insert("b2", Tensor::randn(&[3], 0.1, &mut rng), true);
        let x = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let targets = [0usize, 2, 1, 2];
        let report = finite_diff_check(
            |st, g| {
                let xv = g.constant(x.clone());
                let (w1, b1) = (g.param_from(st, "w1"), g.param_from(st, "b1"));
                let (w2, b2) = (g.param_from(st, "w2"), g.param_from(st, "b2"));
                let h = g.matmul(xv, w1);
                let h = g.add_row(h, b1);
                let h = g.gelu(h);
                let o = g.matmul(h, w2);
                let o = g.add_row(o, b2);
                let lp = g.log_softmax_rows(o);
                let picked = g.pick_per_row(lp, &targets);
                let m = g.mean(picked);
                Ok(g.scale(m, -1.0))
            },
            &s,
            1e-5,
            200,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.entries_checked, 5 * 8 + 8 + 8 * 3 + 3);
        assert!(report.max_relative_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let s = store_with("theta", Tensor::from_vec(vec![1.0, 2.0]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = finite_diff_check(
            |_, g| Ok(g.constant(Tensor::scalar(7.0))),
            &s,
            1e-5,
            10,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn nondeterministic_eval_aborts() {
        use std::cell::Cell;
        let s = store_with("theta", Tensor::from_vec(vec![1.0]));
        let counter = Cell::new(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let res = finite_diff_check(
            |st, g| {
                counter.set(counter.get() + 1.0);
                let th = g.param_from(st, "theta");
                let y = g.scale(th, counter.get());
                Ok(g.sum(y))
            },
            &s,
            1e-5,
            10,
            &mut rng,
        );
        assert!(matches!(res, Err(AutogradError::NonDeterministic { .. })));
    }
}
