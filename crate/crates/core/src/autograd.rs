//! A minimal reverse-mode tape over [`Matrix`] values.
//!
//! The tape records a straight-line program; [`Tape::backward`] takes seed
//! gradients for any set of output nodes (not necessarily scalars), which lets
//! loss modules supply analytic upstream gradients and leave only the network
//! part to the tape.

use std::sync::Arc;

use crate::nn::{ParamId, ParamSet};
use crate::tensor::{gemm, Matrix};

/// Marks an output element of [`Tape::gather`] that is filled with zero.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    Gather(Var, Arc<Vec<u32>>),
    AvgPool2 { src: Var, n: usize, h: usize, w: usize },
    L2NormalizeRows(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients produced by [`Tape::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub params: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Grads) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => m.add_assign(g),
                    None => *mine = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.iter_mut().flatten() {
            for v in g.data.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            params: vec![None; n],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|g| g.is_finite())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let trainable = params.is_trainable(id);
        self.push(params.value(id).clone(), Op::Param(id), trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows, 1, "add_row expects a single row");
        assert_eq!(r.cols, self.value(a).cols, "add_row column mismatch");
        let mut value = self.value(a).clone();
        let c = value.cols;
        for chunk in value.data.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let value = Matrix::from_vec(x.rows, x.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|&v| v * sigmoid(v)).collect();
        let value = Matrix::from_vec(x.rows, x.cols, data);
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data.iter().map(|v| v.tanh()).collect();
        let value = Matrix::from_vec(x.rows, x.cols, data);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// `out.data[i] = src.data[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<u32>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length mismatch");
        let s = &self.value(src).data;
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { s[i as usize] })
            .collect();
        let value = Matrix::from_vec(rows, cols, data);
        let rg = self.rg(src);
        self.push(value, Op::Gather(src, index), rg)
    }

    /// 2×2 average pooling on a `(n·h·w) × c` spatial batch.
    pub fn avg_pool2(&mut self, src: Var, n: usize, h: usize, w: usize) -> Var {
        let x = self.value(src);
        assert_eq!(x.rows, n * h * w, "avg_pool2 row count mismatch");
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents");
        let c = x.cols;
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Matrix::zeros(n * ho * wo, c);
        for s in 0..n {
            for y in 0..ho {
                for xo in 0..wo {
                    let orow = (s * ho + y) * wo + xo;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let irow = (s * h + 2 * y + dy) * w + 2 * xo + dx;
                        for ch in 0..c {
                            out.data[orow * c + ch] += 0.25 * x.data[irow * c + ch];
                        }
                    }
                }
            }
        }
        let rg = self.rg(src);
        self.push(out, Op::AvgPool2 { src, n, h, w }, rg)
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, src: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(src);
        assert_eq!(x.len(), rows * cols, "reshape size mismatch");
        let value = Matrix::from_vec(rows, cols, x.data.clone());
        let rg = self.rg(src);
        self.push(value, Op::Reshape(src), rg)
    }

    pub fn l2_normalize_rows(&mut self, src: Var) -> Var {
        let x = self.value(src);
        let mut out = x.clone();
        for r in 0..x.rows {
            let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in out.row_mut(r) {
                *v /= norm;
            }
        }
        let rg = self.rg(src);
        self.push(out, Op::L2NormalizeRows(src), rg)
    }

    /// Back-propagates the given seed gradients and returns parameter gradients.
    pub fn backward(&self, seeds: &[(Var, &Matrix)], n_params: usize) -> Grads {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g);
        }
        let mut out = Grads::empty(n_params);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => accumulate(&mut out.params[id.0], &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let slot = grads[a.0].get_or_insert_with(|| Matrix::zeros(av.rows, av.cols));
                        // dA = dC · Bᵀ
                        gemm(
                            av.rows,
                            g.cols,
                            av.cols,
                            (&g.data, g.cols as isize, 1),
                            (&bv.data, 1, bv.cols as isize),
                            &mut slot.data,
                            1.0,
                        );
                    }
                    if self.rg(*b) {
                        let slot = grads[b.0].get_or_insert_with(|| Matrix::zeros(bv.rows, bv.cols));
                        // dB = Aᵀ · dC
                        gemm(
                            bv.rows,
                            av.rows,
                            g.cols,
                            (&av.data, 1, av.cols as isize),
                            (&g.data, g.cols as isize, 1),
                            &mut slot.data,
                            1.0,
                        );
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let mut sums = Matrix::zeros(1, g.cols);
                        for chunk in g.data.chunks(g.cols) {
                            for (s, v) in sums.data.iter_mut().zip(chunk) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads[row.0], &sums);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let other = self.value(*b);
                        let d = zip_map(&g, other, |p, q| p * q);
                        accumulate(&mut grads[a.0], &d);
                    }
                    if self.rg(*b) {
                        let other = self.value(*a);
                        let d = zip_map(&g, other, |p, q| p * q);
                        accumulate(&mut grads[b.0], &d);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads[a.0], &g.scaled(*s)),
                Op::Silu(a) => {
                    let d = zip_map(&g, self.value(*a), |dy, x| {
                        let s = sigmoid(x);
                        dy * s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut grads[a.0], &d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, &node.value, |dy, y| dy * (1.0 - y * y));
                    accumulate(&mut grads[a.0], &d);
                }
                Op::Gather(src, index) => {
                    let sv = self.value(*src);
                    let slot = grads[src.0].get_or_insert_with(|| Matrix::zeros(sv.rows, sv.cols));
                    for (&i, &dv) in index.iter().zip(&g.data) {
                        if i != GATHER_ZERO {
                            slot.data[i as usize] += dv;
                        }
                    }
                }
                Op::AvgPool2 { src, n, h, w } => {
                    let (n, h, w) = (*n, *h, *w);
                    let c = g.cols;
                    let slot = grads[src.0].get_or_insert_with(|| Matrix::zeros(n * h * w, c));
                    let (ho, wo) = (h / 2, w / 2);
                    for s in 0..n {
                        for y in 0..ho {
                            for xo in 0..wo {
                                let orow = (s * ho + y) * wo + xo;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let irow = (s * h + 2 * y + dy) * w + 2 * xo + dx;
                                    for ch in 0..c {
                                        slot.data[irow * c + ch] += 0.25 * g.data[orow * c + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::L2NormalizeRows(src) => {
                    let x = self.value(*src);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *o = (gv - yv * dot) / norm;
                        }
                    }
                    accumulate(&mut grads[src.0], &d);
                }
                Op::Reshape(src) => {
                    let sv = self.value(*src);
                    accumulate(&mut grads[src.0], &Matrix::from_vec(sv.rows, sv.cols, g.data));
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data.iter().zip(&b.data).map(|(p, q)| f(*p, *q)).collect();
    Matrix::from_vec(a.rows, a.cols, data)
}

fn accumulate(slot: &mut Option<Matrix>, g: &Matrix) {
    match slot {
        Some(m) => m.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}
