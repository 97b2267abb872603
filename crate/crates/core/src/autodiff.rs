//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse, accumulating adjoints. Only the operations the
//! reference encoder needs are provided.

use crate::matrix::{dot, Matrix};

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × c` row to every row.
    AddRow(Var, Var),
    /// Multiplies every row element-wise by a `1 × c` row.
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    /// Row-wise standardisation; caches `1/sigma` per row.
    LayerNorm(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    SliceCols(Var, usize),
    /// Row-wise L2 normalisation; caches the row norms.
    L2Normalize(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, g) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *x *= g;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.as_mut_slice().iter_mut().for_each(|x| *x = x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut inv = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * s);
            inv.push(s);
        }
        self.push(v, Op::LayerNorm(a, inv))
    }

    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(v, Op::GatherRows(table, ids))
    }

    pub fn gather_cols(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(m.rows(), cols.len());
        for i in 0..m.rows() {
            for (k, &c) in cols.iter().enumerate() {
                v[(i, k)] = m[(i, c)];
            }
        }
        self.push(v, Op::GatherCols(a, cols))
    }

    /// First `n` columns.
    pub fn slice_cols(&mut self, a: Var, n: usize) -> Var {
        let m = self.value(a);
        assert!(n <= m.cols());
        let mut v = Matrix::zeros(m.rows(), n);
        for i in 0..m.rows() {
            v.row_mut(i).copy_from_slice(&m.row(i)[..n]);
        }
        self.push(v, Op::SliceCols(a, n))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = dot(row, row).sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        self.push(v, Op::L2Normalize(a, norms))
    }

    /// Reverse pass. `seeds` are adjoints of chosen nodes (summed when a node
    /// appears twice). Returns the adjoint of every node; nodes the seeds do
    /// not reach get `None`.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Vec<Option<Matrix>> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, x) in gr.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let r = self.value(*row);
                    let mut ga = g.clone();
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (c, ((gx, &gv), &xv)) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(x.row(i)).enumerate() {
                            *gx = gv * r.as_slice()[c];
                            gr.as_mut_slice()[c] += gv * xv;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, c) => {
                    let mut ga = g.clone();
                    ga.scale(*c);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    for (gx, y) in ga.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *gx *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let s = dot(g.row(i), y.row(i));
                        for (gx, (&gv, &yv)) in ga.row_mut(i).iter_mut().zip(g.row(i).iter().zip(y.row(i))) {
                            *gx = yv * (gv - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let n = y.cols() as f64;
                        let mean_g = g.row(i).iter().sum::<f64>() / n;
                        let mean_gy = dot(g.row(i), y.row(i)) / n;
                        for (gx, (&gv, &yv)) in ga.row_mut(i).iter_mut().zip(g.row(i).iter().zip(y.row(i))) {
                            *gx = inv[i] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(table, ids) => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (s, x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::GatherCols(a, cols) => {
                    let m = self.value(*a);
                    let mut ga = Matrix::zeros(m.rows(), m.cols());
                    for i in 0..m.rows() {
                        for (k, &c) in cols.iter().enumerate() {
                            ga[(i, c)] += g[(i, k)];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, n) => {
                    let m = self.value(*a);
                    let mut ga = Matrix::zeros(m.rows(), m.cols());
                    for i in 0..m.rows() {
                        ga.row_mut(i)[..*n].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::L2Normalize(a, norms) => {
                    let y = &node.value;
                    let mut ga = g.clone();
                    for i in 0..y.rows() {
                        let s = dot(g.row(i), y.row(i));
                        for (gx, (&gv, &yv)) in ga.row_mut(i).iter_mut().zip(g.row(i).iter().zip(y.row(i))) {
                            *gx = (gv - yv * s) / norms[i];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}
