//! Dense `f64` tensors and a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] records every operation applied to its nodes in insertion
//! order, so the recorded order is already a topological order. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates `d loss / d leaf` into every leaf created with
//! `requires_grad = true`.
//!
//! Broadcasting is deliberately narrow: binary elementwise ops accept
//! equal shapes or a single-element operand. Bias addition over a batch
//! uses the dedicated [`Graph::add_row`] op.
//!
//! ```
//! use cstg::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let t = g.leaf(Tensor::vector(vec![0.0]), true);
//! let s = g.sigmoid(t);
//! let loss = g.sum(s);
//! g.backward(loss).unwrap();
//! assert!((g.grad(t).unwrap().data()[0] - 0.25).abs() < 1e-12);
//! ```

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
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
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
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

    /// Leading dimension; 1 for a scalar.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of a matrix; 1 for vectors.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// Concatenates two matrices with the same row count side by side.
    pub fn hstack(&self, other: &Tensor) -> Result<Tensor> {
        if self.rows() != other.rows() {
            return Err(Error::dim("hstack", &self.shape, &other.shape));
        }
        let (a, b) = (self.cols(), other.cols());
        let mut data = Vec::with_capacity(self.rows() * (a + b));
        for r in 0..self.rows() {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Tensor::matrix(self.rows(), a + b, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnOp {
    Relu,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
    Scale(f64),
    NormalCdf,
    Ln,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Binary(BinOp, Var, Var),
    AddRow(Var, Var),
    Unary(UnOp, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Some leaf with `requires_grad` is reachable from this node.
    tracked: bool,
    grad: Option<Tensor>,
}

/// Operation tape. Confined to one thread; build a fresh graph per step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::dim(op, s, &[])),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout used for `out × in` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), &[a, b]))
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match op {
            BinOp::Add => |x: f64, y: f64| x + y,
            BinOp::Sub => |x: f64, y: f64| x - y,
            BinOp::Mul => |x: f64, y: f64| x * y,
        };
        let value = if va.shape() == vb.shape() {
            Tensor {
                shape: va.shape.clone(),
                data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if vb.len() == 1 {
            let y = vb.item();
            va.map(|x| f(x, y))
        } else if va.len() == 1 {
            let x = va.item();
            vb.map(|y| f(x, y))
        } else {
            return Err(Error::dim("elementwise", va.shape(), vb.shape()));
        };
        Ok(self.push(value, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    /// Adds a length-`c` row vector to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "add_row")?;
        let vr = self.value(row);
        if vr.len() != c {
            return Err(Error::dim("add_row", self.shape(a), vr.shape()));
        }
        let va = self.value(a);
        let mut data = va.data.clone();
        for i in 0..r {
            for (o, &b) in data[i * c..(i + 1) * c].iter_mut().zip(&vr.data) {
                *o += b;
            }
        }
        let value = Tensor::matrix(r, c, data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Var {
        let value = self.value(a).map(|x| unary_forward(op, x));
        self.push(value, Op::Unary(op, a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnOp::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sigmoid, a)
    }

    /// `max(lo, min(hi, a))`; the gradient is passed only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnOp::Clamp { lo, hi }, a)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        self.clamp(a, 0.0, 1.0)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(UnOp::Scale(factor), a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnOp::Ln, a)
    }

    /// Elementwise standard normal CDF.
    pub fn std_normal_cdf(&mut self, a: Var) -> Var {
        self.unary(UnOp::NormalCdf, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Per-row sums of a matrix: `[r × c] -> [r]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.matrix_dims(a, "sum_rows")?;
        let v = self.value(a);
        let sums = (0..r).map(|i| v.row(i).iter().sum()).collect();
        Ok(self.push(Tensor::vector(sums), Op::SumRows(a), &[a]))
    }

    /// Accumulates `d loss / d leaf` into every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        let shape = node.value.shape.clone();
                        let slot = &mut self.nodes[i].grad;
                        match slot {
                            Some(acc) => {
                                for (a, d) in acc.data.iter_mut().zip(&g) {
                                    *a += d;
                                }
                            }
                            None => *slot = Some(Tensor { shape, data: g }),
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.nodes[a.0].tracked {
                        // g[m×n] · bᵀ
                        let ga = matmul_nt(&g, self.value(b).data(), m, n, k);
                        accumulate(&mut adj, a, ga);
                    }
                    if self.nodes[b.0].tracked {
                        // aᵀ · g
                        let gb = matmul_tn(self.value(a).data(), &g, m, k, n);
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[0];
                    if self.nodes[a.0].tracked {
                        // g[m×n] · b[n×k]
                        let ga = matmul_nn(&g, self.value(b).data(), m, n, k);
                        accumulate(&mut adj, a, ga);
                    }
                    if self.nodes[b.0].tracked {
                        // gᵀ · a -> [n×k]
                        let gb = matmul_tn(&g, self.value(a).data(), m, n, k);
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::Binary(op, a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let (ta, tb) = (self.nodes[a.0].tracked, self.nodes[b.0].tracked);
                    let pick = |t: &Tensor, j: usize| if t.len() == 1 { t.data[0] } else { t.data[j] };
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    for (j, &gj) in g.iter().enumerate() {
                        let ia = if va.len() == 1 { 0 } else { j };
                        let ib = if vb.len() == 1 { 0 } else { j };
                        let (da, db) = match op {
                            BinOp::Add => (gj, gj),
                            BinOp::Sub => (gj, -gj),
                            BinOp::Mul => (gj * pick(vb, j), gj * pick(va, j)),
                        };
                        ga[ia] += da;
                        gb[ib] += db;
                    }
                    if ta {
                        accumulate(&mut adj, a, ga);
                    }
                    if tb {
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::AddRow(a, row) => {
                    let c = self.value(row).len();
                    if self.nodes[row.0].tracked {
                        let mut gr = vec![0.0; c];
                        for chunk in g.chunks(c) {
                            for (o, &v) in gr.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        accumulate(&mut adj, row, gr);
                    }
                    if self.nodes[a.0].tracked {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Unary(op, a) => {
                    let input = self.value(a);
                    let output = &node.value;
                    let ga = g
                        .iter()
                        .zip(&input.data)
                        .zip(&output.data)
                        .map(|((&gj, &x), &y)| gj * unary_derivative(op, x, y))
                        .collect();
                    accumulate(&mut adj, a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(a).len();
                    accumulate(&mut adj, a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(a).len();
                    accumulate(&mut adj, a, vec![g[0] / n as f64; n]);
                }
                Op::SumRows(a) => {
                    let c = self.value(a).cols();
                    let ga = g.iter().flat_map(|&gi| std::iter::repeat_n(gi, c)).collect();
                    accumulate(&mut adj, a, ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(g) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn unary_forward(op: UnOp, x: f64) -> f64 {
    match op {
        UnOp::Relu => x.max(0.0),
        UnOp::Sigmoid => sigmoid(x),
        UnOp::Clamp { lo, hi } => x.clamp(lo, hi),
        UnOp::Scale(c) => c * x,
        UnOp::NormalCdf => std_normal_cdf(x),
        UnOp::Ln => x.ln(),
    }
}

fn unary_derivative(op: UnOp, x: f64, y: f64) -> f64 {
    match op {
        UnOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnOp::Sigmoid => y * (1.0 - y),
        UnOp::Clamp { lo, hi } => {
            if x > lo && x < hi {
                1.0
            } else {
                0.0
            }
        }
        UnOp::Scale(c) => c,
        UnOp::NormalCdf => std_normal_pdf(x),
        UnOp::Ln => 1.0 / x,
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

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
///
/// Hart's double-precision rational approximation (as arranged by West,
/// 2005) for `|x| < 7.07`, and a continued fraction for the tail. Absolute
/// error is below 1e-14, and `Φ(x) + Φ(-x) == 1` up to rounding.
pub fn std_normal_cdf(x: f64) -> f64 {
    let ax = x.abs();
    let tail = if ax > 37.0 {
        0.0
    } else {
        let e = (-0.5 * ax * ax).exp();
        if ax < 7.071_067_811_865_47 {
            let num = (((((3.526_249_659_989_11e-2 * ax + 0.700_383_064_443_688) * ax
                + 6.373_962_203_531_65)
                * ax
                + 33.912_866_078_383)
                * ax
                + 112.079_291_497_871)
                * ax
                + 221.213_596_169_931)
                * ax
                + 220.206_867_912_376;
            let den = ((((((8.838_834_764_831_84e-2 * ax + 1.755_667_163_182_64) * ax
                + 16.064_177_579_207)
                * ax
                + 86.780_732_202_946_1)
                * ax
                + 296.564_248_779_674)
                * ax
                + 637.333_633_378_831)
                * ax
                + 793.826_512_519_948)
                * ax
                + 440.413_735_824_752;
            e * num / den
        } else {
            let mut b = ax + 0.65;
            b = ax + 4.0 / b;
            b = ax + 3.0 / b;
            b = ax + 2.0 / b;
            b = ax + 1.0 / b;
            e / b / 2.506_628_274_631
        }
    };
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]` -> `[k×n]`
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let out = g.matmul(i, b).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0]);

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);
        assert_eq!(g.value(out).shape(), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), true);
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn clamp01_values_and_subgradient() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![-0.3, 0.7, 1.2, 0.5, 1.3]), true);
        let c = g.clamp01(v);
        assert_eq!(g.value(c).data(), &[0.0, 0.7, 1.0, 0.5, 1.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn clamp_boundary_has_zero_gradient() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::vector(vec![0.0, 1.0]), true);
        let c = g.clamp01(v);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        for x in [0.3, 1.7] {
            assert!(close(std_normal_cdf(x) + std_normal_cdf(-x), 1.0, 1e-15));
        }
        assert!(close(std_normal_cdf(10.0), 1.0, 1e-15));
        assert!(std_normal_cdf(-40.0) == 0.0);
    }

    #[test]
    fn backward_sum_and_sigmoid() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let s = g.sum(t);
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let t = g.leaf(Tensor::vector(vec![0.0]), true);
        let s = g.sigmoid(t);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert!(close(g.grad(t).unwrap().item(), 0.25, 1e-15));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let s = g.sum(t);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(t).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(t), Err(Error::Contract(_))));
    }

    #[test]
    fn scalar_broadcast_and_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let k = g.leaf(Tensor::scalar(2.0), true);
        let p = g.mul(a, k).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0, 6.0]);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(k).unwrap().data(), &[6.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);

        let b = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.select_rows(&[1]).data(), &[3.0, 4.0]);
        assert_eq!(t.hstack(&t).unwrap().row(1), &[3.0, 4.0, 3.0, 4.0]);
    }
}
