//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! topological order. [`Tape::backward`] replays the record in reverse and
//! accumulates adjoints into the tape's gradient buffers; repeated calls add
//! to the existing buffers until [`Tape::reset_grads`] clears them.
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept equal
//! shapes or one scalar operand. Row-wise bias and scale use the explicit
//! [`Tape::add_row`] and [`Tape::mul_row`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: input {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}

pub type Result<T> = std::result::Result<T, NdiffError>;

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(NdiffError::InvalidTensor(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NdiffError::InvalidTensor(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NdiffError::InvalidTensor("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Gathers the given rows of a matrix into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::new(vec![idx.len(), c], data)
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(NdiffError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SumAll(Var),
    SumCols(Var),
    MeanRows(Var),
    Column(Var, usize),
    PermuteCols(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise unary operations accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Relu,
    Neg,
    Square,
    Scale(f64),
    AddScalar(f64),
}

/// Computation record for one forward pass. Not shareable across threads
/// while recording; build one tape per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Drops every node recorded after the first `len`; handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data.iter().map(|&x| f(x)).collect();
        let value = Tensor {
            shape: src.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape == tb.shape {
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if tb.is_scalar() {
            let y = tb.data[0];
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().map(|&x| f(x, y)).collect(),
            }
        } else if ta.is_scalar() {
            let x = ta.data[0];
            Tensor {
                shape: tb.shape.clone(),
                data: tb.data.iter().map(|&y| f(x, y)).collect(),
            }
        } else {
            return Err(NdiffError::ShapeMismatch {
                op: op_name,
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.require_matrix("matmul")?;
        let (k2, n) = tb.require_matrix("matmul")?;
        if k != k2 {
            return Err(NdiffError::ShapeMismatch {
                op: "matmul",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ta.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`; the layout of a dense layer
    /// with weights stored as `[out, in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.require_matrix("matmul_t")?;
        let (n, k2) = tb.require_matrix("matmul_t")?;
        if k != k2 {
            return Err(NdiffError::ShapeMismatch {
                op: "matmul_t",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &tb.data[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMulT(a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(&z) = self.nodes[b.0].value.data.iter().find(|&&y| y == 0.0) {
            return Err(NdiffError::Domain {
                op: "div",
                value: z,
            });
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn elementwise(&mut self, op: Unary, a: Var) -> Result<Var> {
        Ok(match op {
            Unary::Exp => self.exp(a),
            Unary::Log => return self.log(a),
            Unary::Tanh => self.tanh(a),
            Unary::Relu => self.relu(a),
            Unary::Neg => self.neg(a),
            Unary::Square => self.square(a),
            Unary::Scale(s) => self.scale(a, s),
            Unary::AddScalar(c) => self.add_scalar(a, c),
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.nodes[a.0].value.data.iter().find(|&&x| !(x > 0.0)) {
            return Err(NdiffError::Domain {
                op: "log",
                value: bad,
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `a[r,c] + b[c]` applied to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (r, c) = ta.require_matrix("add_row")?;
        if tb.len() != c || tb.shape.len() != 1 {
            return Err(NdiffError::ShapeMismatch {
                op: "add_row",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for i in 0..r {
            for (x, &y) in data[i * c..(i + 1) * c].iter_mut().zip(&tb.data) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![r, c],
                data,
            },
            Op::AddRow(a, b),
            rg,
        ))
    }

    /// `a[r,c] * b[c]` applied to every row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (r, c) = ta.require_matrix("mul_row")?;
        if tb.len() != c || tb.shape.len() != 1 {
            return Err(NdiffError::ShapeMismatch {
                op: "mul_row",
                left: ta.shape.clone(),
                right: tb.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for i in 0..r {
            for (x, &y) in data[i * c..(i + 1) * c].iter_mut().zip(&tb.data) {
                *x *= y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![r, c],
                data,
            },
            Op::MulRow(a, b),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: `[r,c] -> [r]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.require_matrix("sum_cols")?;
        let data = (0..r)
            .map(|i| ta.data[i * c..(i + 1) * c].iter().sum())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![r],
                data,
            },
            Op::SumCols(a),
            rg,
        ))
    }

    /// Per-column mean over rows: `[r,c] -> [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.require_matrix("mean_rows")?;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (s, &x) in data.iter_mut().zip(&ta.data[i * c..(i + 1) * c]) {
                *s += x;
            }
        }
        for s in &mut data {
            *s /= r as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![c],
                data,
            },
            Op::MeanRows(a),
            rg,
        ))
    }

    /// Column `j` of a matrix as a vector `[r]`.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.require_matrix("column")?;
        if j >= c {
            return Err(NdiffError::ShapeMismatch {
                op: "column",
                left: ta.shape.clone(),
                right: vec![j],
            });
        }
        let data = (0..r).map(|i| ta.data[i * c + j]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![r],
                data,
            },
            Op::Column(a, j),
            rg,
        ))
    }

    /// `out[:, k] = a[:, perm[k]]`.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, c) = ta.require_matrix("permute_cols")?;
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true))
        {
            return Err(NdiffError::InvalidTensor(format!(
                "{perm:?} is not a permutation of {c} columns"
            )));
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for (k, &p) in perm.iter().enumerate() {
                data[i * c + k] = ta.data[i * c + p];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![r, c],
                data,
            },
            Op::PermuteCols(a, perm.to_vec()),
            rg,
        ))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if n != ta.len() || shape.contains(&0) {
            return Err(NdiffError::ShapeMismatch {
                op: "reshape",
                left: ta.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: ta.data.clone(),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Accumulates d(loss)/d(node) into the gradient buffer of every node
    /// the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let adj = self.adjoints(loss)?;
        for (i, a) in adj.into_iter().enumerate() {
            let Some(a) = a else { continue };
            match &mut self.grads[i] {
                Some(g) => {
                    for (x, y) in g.iter_mut().zip(&a) {
                        *x += y;
                    }
                }
                slot => *slot = Some(a),
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to `wrt`, concatenated in order.
    /// Leaves the tape's gradient buffers untouched.
    pub fn gradient(&self, loss: Var, wrt: &[Var]) -> Result<Vec<f64>> {
        let adj = self.adjoints(loss)?;
        let mut out = Vec::new();
        for &v in wrt {
            match &adj[v.0] {
                Some(a) => out.extend_from_slice(a),
                None => out.extend(std::iter::repeat_n(0.0, self.nodes[v.0].value.len())),
            }
        }
        Ok(out)
    }

    fn adjoints(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(NdiffError::NonScalarLoss(lt.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut adj);
            }
            adj[idx] = Some(g);
        }
        Ok(adj)
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.rg(*a) {
                    let da = slot(adj, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.rg(*b) {
                    let db = slot(adj, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if self.rg(*a) {
                    let da = slot(adj, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (d, &bv) in da[i * k..(i + 1) * k]
                                .iter_mut()
                                .zip(&tb.data[j * k..(j + 1) * k])
                            {
                                *d += gij * bv;
                            }
                        }
                    }
                }
                if self.rg(*b) {
                    let db = slot(adj, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for (d, &av) in db[j * k..(j + 1) * k]
                                .iter_mut()
                                .zip(&ta.data[i * k..(i + 1) * k])
                            {
                                *d += gij * av;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(adj, *a, g, |gi, _| gi);
                self.accumulate_broadcast(adj, *b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(adj, *a, g, |gi, _| gi);
                self.accumulate_broadcast(adj, *b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accumulate_broadcast(adj, *a, g, |gi, i| gi * bcast(tb, i));
                self.accumulate_broadcast(adj, *b, g, |gi, i| gi * bcast(ta, i));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accumulate_broadcast(adj, *a, g, |gi, i| gi / bcast(tb, i));
                self.accumulate_broadcast(adj, *b, g, |gi, i| {
                    let y = bcast(tb, i);
                    -gi * bcast(ta, i) / (y * y)
                });
            }
            Op::AddScalar(a) => add_into(slot(adj, *a, g.len()), g.iter().copied()),
            Op::Scale(a, s) => add_into(slot(adj, *a, g.len()), g.iter().map(|x| x * s)),
            Op::Neg(a) => add_into(slot(adj, *a, g.len()), g.iter().map(|x| -x)),
            Op::Exp(a) => add_into(
                slot(adj, *a, g.len()),
                g.iter().zip(&node.value.data).map(|(x, y)| x * y),
            ),
            Op::Log(a) => {
                let ta = val(*a);
                add_into(
                    slot(adj, *a, g.len()),
                    g.iter().zip(&ta.data).map(|(x, y)| x / y),
                )
            }
            Op::Tanh(a) => add_into(
                slot(adj, *a, g.len()),
                g.iter().zip(&node.value.data).map(|(x, y)| x * (1.0 - y * y)),
            ),
            Op::Relu(a) => {
                let ta = val(*a);
                add_into(
                    slot(adj, *a, g.len()),
                    g.iter()
                        .zip(&ta.data)
                        .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }),
                )
            }
            Op::Square(a) => {
                let ta = val(*a);
                add_into(
                    slot(adj, *a, g.len()),
                    g.iter().zip(&ta.data).map(|(x, y)| 2.0 * x * y),
                )
            }
            Op::Clamp(a, lo, hi) => {
                let ta = val(*a);
                add_into(
                    slot(adj, *a, g.len()),
                    g.iter().zip(&ta.data).map(|(x, &y)| {
                        if y > *lo && y < *hi {
                            *x
                        } else {
                            0.0
                        }
                    }),
                )
            }
            Op::AddRow(a, b) => {
                let c = val(*b).len();
                if self.rg(*a) {
                    add_into(slot(adj, *a, g.len()), g.iter().copied());
                }
                if self.rg(*b) {
                    let db = slot(adj, *b, c);
                    for row in g.chunks_exact(c) {
                        add_into(db, row.iter().copied());
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = tb.len();
                if self.rg(*a) {
                    let da = slot(adj, *a, g.len());
                    for (drow, grow) in da.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        add_into(drow, grow.iter().zip(&tb.data).map(|(x, y)| x * y));
                    }
                }
                if self.rg(*b) {
                    let db = slot(adj, *b, c);
                    for (arow, grow) in ta.data.chunks_exact(c).zip(g.chunks_exact(c)) {
                        add_into(db, grow.iter().zip(arow).map(|(x, y)| x * y));
                    }
                }
            }
            Op::SumAll(a) => {
                let n = val(*a).len();
                add_into(slot(adj, *a, n), std::iter::repeat_n(g[0], n));
            }
            Op::SumCols(a) => {
                let ta = val(*a);
                let c = ta.shape[1];
                let da = slot(adj, *a, ta.len());
                for (drow, &gi) in da.chunks_exact_mut(c).zip(g) {
                    for d in drow {
                        *d += gi;
                    }
                }
            }
            Op::MeanRows(a) => {
                let ta = val(*a);
                let (r, c) = (ta.shape[0], ta.shape[1]);
                let da = slot(adj, *a, r * c);
                for drow in da.chunks_exact_mut(c) {
                    add_into(drow, g.iter().map(|x| x / r as f64));
                }
            }
            Op::Column(a, j) => {
                let ta = val(*a);
                let c = ta.shape[1];
                let da = slot(adj, *a, ta.len());
                for (i, &gi) in g.iter().enumerate() {
                    da[i * c + j] += gi;
                }
            }
            Op::Reshape(a) => add_into(slot(adj, *a, g.len()), g.iter().copied()),
            Op::PermuteCols(a, perm) => {
                let ta = val(*a);
                let c = ta.shape[1];
                let da = slot(adj, *a, ta.len());
                for (drow, grow) in da.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                    for (k, &p) in perm.iter().enumerate() {
                        drow[p] += grow[k];
                    }
                }
            }
        }
    }

    /// Adds `f(g_i, i)` into the adjoint of `v`, summing over the broadcast
    /// axis when `v` is a scalar operand of a larger output.
    fn accumulate_broadcast(
        &self,
        adj: &mut [Option<Vec<f64>>],
        v: Var,
        g: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) {
        if !self.rg(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let dv = slot(adj, v, n);
        if n == g.len() {
            for (i, (d, &gi)) in dv.iter_mut().zip(g).enumerate() {
                *d += f(gi, i);
            }
        } else {
            dv[0] += g.iter().enumerate().map(|(i, &gi)| f(gi, i)).sum::<f64>();
        }
    }
}

fn bcast(t: &Tensor, i: usize) -> f64 {
    if t.data.len() == 1 {
        t.data[0]
    } else {
        t.data[i]
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
