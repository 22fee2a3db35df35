//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order; [`Graph::backward`] walks it once in reverse.
//!
//! A node only takes part in the backward pass when some ancestor is a
//! trainable leaf. Constants and [`Graph::stop_gradient`] outputs cut the
//! flow, which is how frozen parameters and detached targets are expressed.

use std::sync::Arc;

use crate::error::{AfError, Result};
use crate::numcore::matrix::{self, LayerNormCache, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, cache: LayerNormCache },
    Gelu(Var),
    Ln(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// One loss evaluation's worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    detached: Vec<Matrix>,
    replay: Option<Arc<Vec<Matrix>>>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the root w.r.t. `var`, or `None` when no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `stop_gradient` calls return `values` in order instead of
    /// their inputs. Used to hold detached quantities fixed while finite
    /// differences perturb parameters.
    pub fn with_detached_replay(values: Arc<Vec<Matrix>>) -> Self {
        Graph { replay: Some(values), ..Self::default() }
    }

    /// Values produced by `stop_gradient`, in call order.
    pub fn detached_values(&self) -> &[Matrix] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Identity in the forward pass, zero gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = match &self.replay {
            Some(values) => values
                .get(self.detached.len())
                .cloned()
                .unwrap_or_else(|| self.nodes[x.0].value.clone()),
            None => self.nodes[x.0].value.clone(),
        };
        self.detached.push(value.clone());
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AfError::Shape(format!(
                "{op}: incompatible shapes {}x{} and {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds the `1 x cols` row `bias` to every row of `m`.
    pub fn add_row(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (mv, bv) = (self.value(m), self.value(bias));
        if bv.rows() != 1 || bv.cols() != mv.cols() {
            return Err(AfError::Shape(format!(
                "add_row: incompatible shapes {}x{} and {}x{}",
                mv.rows(),
                mv.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut value = mv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[m, bias]);
        Ok(self.push(value, Op::AddRow(m, bias), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = matrix::softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = matrix::log_softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (value, cache) = matrix::layernorm(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, cache }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(matrix::gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Elementwise natural log; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data().iter().any(|&x| x <= 0.0) {
            return Err(AfError::Numerical("ln of a non-positive value".into()));
        }
        let value = v.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Ln(a), rg))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AfError::Shape(format!("select_rows: index {bad} out of {rows} rows")));
        }
        let value = self.value(a).select_rows(indices);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(AfError::Shape(format!(
                    "concat_rows: column counts {cols} and {} differ",
                    v.cols()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.value(a).cols();
        if start > end || end > cols {
            return Err(AfError::Shape(format!("slice_cols: {start}..{end} of {cols} columns")));
        }
        let value = self.value(a).slice_cols(start, end);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(AfError::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column means as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rows() == 0 {
            return Err(AfError::Shape("mean_rows of an empty matrix".into()));
        }
        let value = self.value(a).mean_rows();
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanRows(a), rg))
    }

    /// Sum of all entries as a 1x1 scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mut value = v.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let n = v.row(r).iter().map(|a| a * a).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(AfError::DegenerateNorm(n));
            }
            value.row_mut(r).iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Reverse accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(AfError::Contract(format!(
                "backward requires a scalar root, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut visited = 0;
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads, visited });
        }
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.apply_rule(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn apply_rule(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = matrix::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = matrix::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    let ga = matrix::matmul(g, self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = matrix::matmul_tn(g, self.value(*a))?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(m, bias) => {
                self.accumulate(grads, *m, g.clone());
                if self.requires_grad(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for (o, yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o = yv * (*o - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (o, yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= yv.exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let xhat = &cache.normalized;
                let gv = self.value(*gain);
                let cols = g.cols();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut ggain = Matrix::zeros(1, cols);
                    let mut gbias = Matrix::zeros(1, cols);
                    for r in 0..g.rows() {
                        for c in 0..cols {
                            ggain.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                            gbias.data_mut()[c] += g.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, ggain);
                    self.accumulate(grads, *bias, gbias);
                }
                if self.requires_grad(*x) {
                    let n = cols as f64;
                    let mut gx = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> =
                            g.row(r).iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        let is = cache.inv_std[r];
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = is / n * (n * dxhat[c] - s1 - xhat.get(r, c) * s2);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * matrix::gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv / x);
                self.accumulate(grads, *a, ga);
            }
            Op::SelectRows(a, indices) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.requires_grad(p) {
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        self.accumulate(grads, p, g.select_rows(&idx));
                    }
                    offset += rows;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, offset + cols));
                    }
                    offset += cols;
                }
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let inv = 1.0 / rows as f64;
                let mut ga = Matrix::zeros(rows, g.cols());
                for r in 0..rows {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (o, yv) in gx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o = (*o - yv * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::fd::max_relative_error;
    use crate::numcore::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn grad_of_squared_norm_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(Matrix::row_vector(&[1.5, -2.0, 0.25]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn stop_gradient_blocks_upstream() {
        let mut g = Graph::new();
        let x = g.param(Matrix::row_vector(&[1.0, 2.0]));
        let y = g.scale(x, 3.0);
        let d = g.stop_gradient(y);
        assert_eq!(g.value(d), g.value(y));
        let w = g.param(Matrix::row_vector(&[0.5, 0.5]));
        let p = g.mul(d, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(y).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(AfError::Contract(_))));
    }

    #[test]
    fn each_node_visited_once() {
        let mut g = Graph::new();
        let x = g.param(Matrix::row_vector(&[0.3, 0.1]));
        let a = g.mul(x, x).unwrap();
        let b = g.add(a, x).unwrap();
        let c = g.add(b, a).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.visited(), g.len());
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::randn(3, 4, 1.0, &mut r));
        let b = store.add("b", Matrix::randn(4, 4, 1.0, &mut r));
        let bias = store.add("bias", Matrix::randn(1, 4, 1.0, &mut r));
        let gain = store.add("gain", Matrix::randn(1, 4, 1.0, &mut r));
        let pos = store.add("pos", Matrix::randn(3, 4, 1.0, &mut r).map(|v| v.abs() + 0.5));
        let target = Matrix::randn(3, 4, 1.0, &mut r);
        let worst = max_relative_error(&store, |g, bd| {
            let (a, b, bias, gain, pos) =
                (bd.var(a), bd.var(b), bd.var(bias), bd.var(gain), bd.var(pos));
            let m = g.matmul(a, b)?;
            let m = g.add_row(m, bias)?;
            let ln = g.layernorm(m, gain, bias)?;
            let act = g.gelu(ln);
            let nt = g.matmul_nt(act, a)?;
            let sm = g.softmax_rows(nt);
            let lsm = g.log_softmax_rows(m);
            let logp = g.ln(pos)?;
            let mixed = g.mul(lsm, logp)?;
            let sel = g.select_rows(mixed, &[2, 0, 2])?;
            let sl = g.slice_cols(sel, 1, 3)?;
            let other = g.slice_cols(act, 0, 2)?;
            let cat = g.concat_cols(&[sl, other])?;
            let norm = g.l2_normalize_rows(cat)?;
            let stacked = g.concat_rows(&[norm, ln])?;
            let mean = g.mean_rows(stacked)?;
            let t = g.constant(target.clone());
            let diff = g.sub(ln, t)?;
            let sq = g.mul(diff, diff)?;
            let s1 = g.sum(sq);
            let s2 = g.sum(mean);
            let s3 = g.sum(sm);
            let s3 = g.scale(s3, 0.1);
            let x = g.add(s1, s2)?;
            let prod = g.mul(s3, s3)?;
            g.add(x, prod)
        });
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut r = rng();
            let mut g = Graph::new();
            let a = g.param(Matrix::randn(5, 6, 1.0, &mut r));
            let w = g.param(Matrix::randn(6, 3, 1.0, &mut r));
            let y = g.matmul(a, w).unwrap();
            let y = g.log_softmax_rows(y);
            let s = g.sum(y);
            let grads = g.backward(s).unwrap();
            (grads.get(a).unwrap().clone(), grads.get(w).unwrap().clone())
        };
        let (a1, w1) = run();
        let (a2, w2) = run();
        assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(w1.data().iter().zip(w2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
