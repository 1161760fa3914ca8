//! A small matrix-valued reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep visits
//! every node after all of its consumers. The operation set is exactly what
//! the heads and losses need; the SPD solve differentiates through the
//! closed form with `d(A⁻¹B) = A⁻¹(dB − dA·A⁻¹B)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, Cholesky, LinalgError, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    AddDiag(Var, Var),
    Solve { a: Var, b: Var, chol: Cholesky<f64> },
    VStack(Vec<Var>),
    HStack(Vec<Var>),
    SliceRows(Var, usize),
    BlockMean(Var, usize),
    AddRowBias(Var, Var),
    RowSoftmax(Var),
    RowNormalize(Var, Vec<f64>),
    BlockSqNorm(Var, usize),
    SumSq(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Matrix<f64>,
    op: Op,
}

/// Gradients of a scalar with respect to every named parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_name: BTreeMap<String, Matrix<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix<f64>> {
        self.by_name.get(name)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.by_name.get(name).map(|m| m.get(0, 0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<f64>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn shape_err(op: &'static str, a: &Matrix<f64>, b: &Matrix<f64>) -> Error {
    LinalgError::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
    .into()
}

fn scalar_check(op: &'static str, s: &Matrix<f64>) -> Result<f64> {
    if s.shape() != (1, 1) {
        return Err(shape_err(op, s, &Matrix::zeros(1, 1)));
    }
    Ok(s.get(0, 0))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A named leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Matrix<f64>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((name.into(), v));
        v
    }

    pub fn scalar_param(&mut self, name: impl Into<String>, value: f64) -> Var {
        self.param(name, Matrix::filled(1, 1, value))
    }

    pub fn constant(&mut self, value: Matrix<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::filled(1, 1, value))
    }

    pub fn value(&self, v: Var) -> &Matrix<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// `a · s` for a 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = scalar_check("scale_by", self.value(s))?;
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// `a + s·I` for square `a` and 1×1 `s`.
    pub fn add_diag(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = scalar_check("add_diag", self.value(s))?;
        let mut v = self.value(a).clone();
        if v.rows() != v.cols() {
            return Err(LinalgError::NotSquare {
                rows: v.rows(),
                cols: v.cols(),
            }
            .into());
        }
        v.add_diagonal(c);
        Ok(self.push(v, Op::AddDiag(a, s)))
    }

    /// `A⁻¹·B` for symmetric positive-definite `A`.
    pub fn solve_spd(&mut self, a: Var, b: Var) -> Result<Var> {
        let chol = Cholesky::factor(self.value(a))?;
        let v = chol.solve(self.value(b))?;
        Ok(self.push(v, Op::Solve { a, b, chol }))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<f64>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&mats)?;
        Ok(self.push(v, Op::VStack(parts.to_vec())))
    }

    /// Concatenates column blocks with equal row counts.
    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("hstack", self.value(parts[0]), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            for i in 0..rows {
                v.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        Ok(self.push(v, Op::HStack(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(a);
        if start + len > m.rows() {
            return Err(Error::Argument(format!(
                "row slice {start}..{} of {} rows",
                start + len,
                m.rows()
            )));
        }
        let v = m.slice_rows(start, len);
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    /// Averages consecutive blocks of `block` rows: `(b·block) × d → b × d`.
    pub fn block_mean(&mut self, a: Var, block: usize) -> Result<Var> {
        let m = self.value(a);
        if block == 0 || m.rows() % block != 0 {
            return Err(Error::Argument(format!(
                "{} rows do not split into blocks of {block}",
                m.rows()
            )));
        }
        let parts: Vec<Matrix<f64>> = (0..m.rows() / block)
            .map(|b| m.slice_rows(b * block, block).mean_rows())
            .collect();
        let v = Matrix::vstack(&parts.iter().collect::<Vec<_>>())?;
        Ok(self.push(v, Op::BlockMean(a, block)))
    }

    /// Adds a `1 × d` row to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != m.cols() {
            return Err(shape_err("add_row_bias", m, b));
        }
        let mut v = m.clone();
        for i in 0..v.rows() {
            for (x, &y) in v.row_mut(i).iter_mut().zip(b.row(0)) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRowBias(a, bias)))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        crate::baselines::row_softmax(&mut v);
        self.push(v, Op::RowSoftmax(a))
    }

    /// Unit-normalizes rows; zero rows stay zero and pass no gradient.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let norms: Vec<f64> = (0..m.rows())
            .map(|i| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut v = m.clone();
        for (i, &n) in norms.iter().enumerate() {
            if n > 0.0 {
                v.row_mut(i).iter_mut().for_each(|x| *x /= n);
            }
        }
        self.push(v, Op::RowNormalize(a, norms))
    }

    /// Squared Frobenius norm of each block of `block` rows, as a column.
    pub fn block_sq_norm(&mut self, a: Var, block: usize) -> Result<Var> {
        let m = self.value(a);
        if block == 0 || m.rows() % block != 0 {
            return Err(Error::Argument(format!(
                "{} rows do not split into blocks of {block}",
                m.rows()
            )));
        }
        let w = block * m.cols();
        let data = m
            .as_slice()
            .chunks(w)
            .map(|c| c.iter().map(|x| x * x).sum())
            .collect::<Vec<f64>>();
        let v = Matrix::from_vec(data.len(), 1, data)?;
        Ok(self.push(v, Op::BlockSqNorm(a, block)))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).frobenius_sq());
        self.push(v, Op::SumSq(a))
    }

    /// Mean cross-entropy of row-wise logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if labels.len() != m.rows() {
            return Err(Error::Argument(format!(
                "{} logit rows but {} labels",
                m.rows(),
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= m.cols() {
                return Err(Error::Argument(format!("label {y} out of range")));
            }
            let row = m.row(i);
            total += crate::frn::log_sum_exp(row) - row[y];
        }
        let v = Matrix::filled(1, 1, total / labels.len() as f64);
        Ok(self.push(v, Op::CrossEntropy(logits, labels.to_vec())))
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        scalar_check("backward", lv)?;
        if !lv.get(0, 0).is_finite() {
            return Err(Error::Gradient {
                param: self.offending_param().unwrap_or_else(|| "loss".into()),
            });
        }
        let mut grads: Vec<Option<Matrix<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut by_name = BTreeMap::new();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Matrix::zeros(self.value(*v).rows(), self.value(*v).cols()));
            if !g.is_finite() {
                return Err(Error::Gradient { param: name.clone() });
            }
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn offending_param(&self) -> Option<String> {
        self.params
            .iter()
            .find(|(_, v)| !self.value(*v).is_finite())
            .map(|(n, _)| n.clone())
    }

    fn propagate(&self, idx: usize, g: &Matrix<f64>, grads: &mut [Option<Matrix<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, d: Matrix<f64>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => *existing = existing.add(&d)?,
                slot @ None => *slot = Some(d),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, matmul_nt(g, self.value(*b))?)?;
                acc(*b, matmul(&self.value(*a).transpose(), g)?)?;
            }
            Op::MatMulNt(a, b) => {
                acc(*a, matmul(g, self.value(*b))?)?;
                acc(*b, matmul(&g.transpose(), self.value(*a))?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::ScaleBy(a, s) => {
                let c = self.scalar_value(*s);
                let ds: f64 = g
                    .as_slice()
                    .iter()
                    .zip(self.value(*a).as_slice())
                    .map(|(x, y)| x * y)
                    .sum();
                acc(*a, g.scale(c))?;
                acc(*s, Matrix::filled(1, 1, ds))?;
            }
            Op::Exp(a) => acc(*a, g.hadamard(&node.value)?)?,
            Op::AddDiag(a, s) => {
                let trace: f64 = (0..g.rows()).map(|i| g.get(i, i)).sum();
                acc(*a, g.clone())?;
                acc(*s, Matrix::filled(1, 1, trace))?;
            }
            Op::Solve { a, b, chol } => {
                // X = A⁻¹B with A symmetric: gB = A⁻¹G, gA = −gB·Xᵀ.
                let gb = chol.solve(g)?;
                let ga = matmul_nt(&gb, &node.value)?.scale(-1.0);
                acc(*a, ga)?;
                acc(*b, gb)?;
            }
            Op::VStack(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    acc(p, g.slice_rows(start, rows))?;
                    start += rows;
                }
            }
            Op::HStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let part = Matrix::from_fn(g.rows(), cols, |i, j| g.get(i, offset + j));
                    acc(p, part)?;
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut full = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    full.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(*a, full)?;
            }
            Op::BlockMean(a, block) => {
                let src = self.value(*a);
                let inv = 1.0 / *block as f64;
                let full = Matrix::from_fn(src.rows(), src.cols(), |i, j| g.get(i / block, j) * inv);
                acc(*a, full)?;
            }
            Op::AddRowBias(a, bias) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (x, &y) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                        *x += y;
                    }
                }
                acc(*a, g.clone())?;
                acc(*bias, gb)?;
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = y.get(i, j) * (g.get(i, j) - dot);
                    }
                }
                acc(*a, out)?;
            }
            Op::RowNormalize(a, norms) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        *o = (g.get(i, j) - y.get(i, j) * dot) / n;
                    }
                }
                acc(*a, out)?;
            }
            Op::BlockSqNorm(a, block) => {
                let src = self.value(*a);
                let full = Matrix::from_fn(src.rows(), src.cols(), |i, j| {
                    2.0 * src.get(i, j) * g.get(i / block, 0)
                });
                acc(*a, full)?;
            }
            Op::SumSq(a) => acc(*a, self.value(*a).scale(2.0 * g.get(0, 0)))?,
            Op::CrossEntropy(logits, labels) => {
                let m = self.value(*logits);
                let scale = g.get(0, 0) / labels.len() as f64;
                let mut out = Matrix::zeros(m.rows(), m.cols());
                for (i, &y) in labels.iter().enumerate() {
                    let p = crate::frn::softmax(m.row(i));
                    for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                        let t = if j == y { 1.0 } else { 0.0 };
                        *o = (p[j] - t) * scale;
                    }
                }
                acc(*logits, out)?;
            }
        }
        Ok(())
    }
}
