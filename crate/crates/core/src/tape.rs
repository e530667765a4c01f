//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every value on the tape is a row-major matrix; vectors are single rows.
//! Nodes are appended in evaluation order, so reverse index order is a
//! reverse topological order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{accumulate_row, Gradients, ParamGrad, ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Embedding { param: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    PairSum(Var, Var),
    Reshape(Var),
    Sum(Var),
    LogSumExp(Var),
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation and replays it backwards.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of scalars held by node values, the dominant memory cost of a tape.
    pub fn footprint(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node dims are consistent")
    }

    /// Gradient of a node after `backward`, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- leaves -------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<Var> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(Error::dim("constant", &[rows, cols], &[value.len()]));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    /// A leaf whose gradient is retained for inspection after `backward`.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<Var> {
        let v = self.constant(rows, cols, value)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    pub fn input_tensor(&mut self, t: &Tensor<T>) -> Result<Var> {
        let (r, c) = t.as_matrix_dims()?;
        if t.requires_grad() {
            self.input(r, c, t.data().to_vec())
        } else {
            self.constant(r, c, t.data().to_vec())
        }
    }

    /// The parameter as a node; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let (r, c) = t.as_matrix_dims().expect("params are matrices");
        let v = self.push(r, c, t.data().to_vec(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Gathers rows of a parameter table; backward scatters into those rows only.
    pub fn embedding(&mut self, id: ParamId, ids: &[usize]) -> Result<Var> {
        let table = self.params.get(id);
        let (n, d) = table.as_matrix_dims()?;
        if ids.is_empty() {
            return Err(Error::DegenerateInput("empty embedding lookup".into()));
        }
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Vocabulary { id: i, size: n });
            }
            value.extend_from_slice(table.row(i));
        }
        Ok(self.push(
            ids.len(),
            d,
            value,
            Op::Embedding {
                param: id,
                ids: ids.to_vec(),
            },
            true,
        ))
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_t", &[m, k], &[n, k2]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMulT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    // ----- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            let (da, db) = (self.dims(a), self.dims(b));
            return Err(Error::dim("add", &[da.0, da.1], &[db.0, db.1]));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(row);
        if br != 1 || bc != c {
            return Err(Error::dim("add_row", &[r, c], &[br, bc]));
        }
        let b = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(b).map(|(x, y)| *x + *y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            let (da, db) = (self.dims(a), self.dims(b));
            return Err(Error::dim("mul", &[da.0, da.1], &[db.0, db.1]));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant (masks, dropout keep-scales).
    pub fn mul_const(&mut self, a: Var, k: Vec<T>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if k.len() != r * c {
            return Err(Error::dim("mul_const", &[r, c], &[k.len()]));
        }
        let out = zip_map(self.value(a), &k, |x, y| x * y);
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::MulConst(a, k), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    /// `max(x, slope * x)`; the derivative at zero is `slope`.
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { x * slope })
            .collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Sigmoid(a), ng)
    }

    /// `ln(sigmoid(x))`, evaluated without forming the sigmoid.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| log_sigmoid(x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::LogSigmoid(a), ng)
    }

    // ----- normalisation -------------------------------------------------

    /// Row-wise softmax. `mask` (row-major, `true` = keep) is either one entry
    /// per element or one entry per column shared by all rows. Masked entries
    /// are excluded and receive exactly zero.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(a);
        let full: Vec<bool> = if mask.len() == r * c {
            mask.to_vec()
        } else if mask.len() == c {
            mask.iter().copied().cycle().take(r * c).collect()
        } else {
            return Err(Error::dim("softmax_masked", &[r, c], &[mask.len()]));
        };
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = &full[i * c..(i + 1) * c];
            softmax_row(row, m, &mut out[i * c..(i + 1) * c])?;
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Softmax(a), ng))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = self.dims(a).1;
        self.softmax_masked(a, &vec![true; c])
    }

    // ----- structure -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).0 != r) {
            let d = self.dims(*bad);
            return Err(Error::dim("concat_cols", &[r], &[d.0, d.1]));
        }
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let c = self.dims(*p).1;
                out.extend_from_slice(&self.value(*p)[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, end]));
        }
        let w = end - start;
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(r, w, out, Op::SliceCols(a, start), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start, end]));
        }
        let out = self.value(a)[start * c..end * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(end - start, c, out, Op::SliceRows(a, start), ng))
    }

    /// Stacks equal-width matrices vertically.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::DegenerateInput("stack of zero rows".into()));
        }
        let c = self.dims(parts[0]).1;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).1 != c) {
            let d = self.dims(*bad);
            return Err(Error::dim("stack_rows", &[c], &[d.0, d.1]));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            out.extend_from_slice(self.value(*p));
            rows += self.dims(*p).0;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(rows, c, out, Op::StackRows(parts.to_vec()), ng))
    }

    /// Row `i * n + j` of the result is `a_i + b_j`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, h) = self.dims(a);
        let (n, h2) = self.dims(b);
        if h != h2 {
            return Err(Error::dim("pair_sum", &[m, h], &[n, h2]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n * h);
        for i in 0..m {
            for j in 0..n {
                out.extend(
                    av[i * h..(i + 1) * h]
                        .iter()
                        .zip(&bv[j * h..(j + 1) * h])
                        .map(|(x, y)| *x + *y),
                );
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m * n, h, out, Op::PairSum(a, b), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(Error::dim("reshape", &[r, c], &[rows, cols]));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(rows, cols, out, Op::Reshape(a), ng))
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// `ln Σ exp(x)` over every element, stabilised by the maximum.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let v = log_sum_exp(self.value(a));
        let ng = self.ng(a);
        self.push(1, 1, vec![v], Op::LogSumExp(a), ng)
    }

    // ----- backward ------------------------------------------------------

    /// Backpropagates from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        let (r, c) = self.dims(root);
        if r * c != 1 {
            return Err(Error::dim("backward root", &[r, c], &[1, 1]));
        }
        self.backward_seeded(&[(root, vec![T::one()])])
    }

    /// Backpropagates from several nodes at once, each with an upstream gradient.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<T>)]) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.len() {
                let (r, c) = self.dims(*v);
                return Err(Error::dim("backward seed", &[r, c], &[g.len()]));
            }
            acc(&mut grads[v.0], g);
        }
        let mut out = Gradients::zeros(self.params.len());
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, &mut out);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(out)
    }

    fn propagate(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.add(*id, ParamGrad::Dense(g.to_vec())),
            Op::Embedding { param, ids } => {
                let mut map = BTreeMap::new();
                for (k, &id) in ids.iter().enumerate() {
                    accumulate_row(&mut map, id, &g[k * cols..(k + 1) * cols]);
                }
                out.add(*param, ParamGrad::Rows { cols, rows: map });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g, self.value(*b), &mut da, m, n, k);
                    acc(&mut grads[a.0], &da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(self.value(*a), g, &mut db, m, k, n);
                    acc(&mut grads[b.0], &db);
                }
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(g, self.value(*b), &mut da, m, n, k);
                    acc(&mut grads[a.0], &da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(g, self.value(*a), &mut db, m, n, k);
                    acc(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(a) => {
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[c * rows + r] = g[r * cols + c];
                    }
                }
                acc(&mut grads[a.0], &da);
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    acc(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    acc(&mut grads[a.0], g);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d = *d + *x;
                        }
                    }
                    acc(&mut grads[b.0], &db);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let da = zip_map(g, self.value(*b), |x, y| x * y);
                    acc(&mut grads[a.0], &da);
                }
                if self.ng(*b) {
                    let db = zip_map(g, self.value(*a), |x, y| x * y);
                    acc(&mut grads[b.0], &db);
                }
            }
            Op::MulConst(a, k) => {
                let da = zip_map(g, k, |x, y| x * y);
                acc(&mut grads[a.0], &da);
            }
            Op::Scale(a, s) => {
                let da: Vec<T> = g.iter().map(|&x| x * *s).collect();
                acc(&mut grads[a.0], &da);
            }
            Op::LeakyRelu(a, slope) => {
                let da = zip_map(g, self.value(*a), |gx, x| {
                    if x > T::zero() {
                        gx
                    } else {
                        gx * *slope
                    }
                });
                acc(&mut grads[a.0], &da);
            }
            Op::Tanh(_) | Op::Sigmoid(_) => {
                let y = &node.value;
                let (a, da) = match &node.op {
                    Op::Tanh(a) => (*a, zip_map(g, y, |gx, y| gx * (T::one() - y * y))),
                    Op::Sigmoid(a) => (*a, zip_map(g, y, |gx, y| gx * y * (T::one() - y))),
                    _ => unreachable!(),
                };
                acc(&mut grads[a.0], &da);
            }
            Op::LogSigmoid(a) => {
                let da = zip_map(g, self.value(*a), |gx, x| gx * sigmoid(-x));
                acc(&mut grads[a.0], &da);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for c in 0..cols {
                        da[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(&mut grads[a.0], &da);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.dims(*p).1;
                    if self.ng(*p) {
                        let dp: Vec<T> = g
                            .chunks(cols)
                            .flat_map(|row| row[offset..offset + pc].iter().copied())
                            .collect();
                        acc(&mut grads[p.0], &dp);
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.dims(*a);
                let mut da = vec![T::zero(); ar * ac];
                for r in 0..ar {
                    da[r * ac + start..r * ac + start + cols]
                        .copy_from_slice(&g[r * cols..(r + 1) * cols]);
                }
                acc(&mut grads[a.0], &da);
            }
            Op::SliceRows(a, start) => {
                let (ar, ac) = self.dims(*a);
                let mut da = vec![T::zero(); ar * ac];
                da[start * ac..start * ac + g.len()].copy_from_slice(g);
                acc(&mut grads[a.0], &da);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    if self.ng(*p) {
                        acc(&mut grads[p.0], &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::PairSum(a, b) => {
                let m = self.dims(*a).0;
                let n = self.dims(*b).0;
                let h = cols;
                let mut da = vec![T::zero(); m * h];
                let mut db = vec![T::zero(); n * h];
                for i in 0..m {
                    for j in 0..n {
                        let row = &g[(i * n + j) * h..(i * n + j + 1) * h];
                        for k in 0..h {
                            da[i * h + k] = da[i * h + k] + row[k];
                            db[j * h + k] = db[j * h + k] + row[k];
                        }
                    }
                }
                if self.ng(*a) {
                    acc(&mut grads[a.0], &da);
                }
                if self.ng(*b) {
                    acc(&mut grads[b.0], &db);
                }
            }
            Op::Reshape(a) => acc(&mut grads[a.0], g),
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                acc(&mut grads[a.0], &vec![g[0]; n]);
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let lse = node.value[0];
                let da: Vec<T> = x.iter().map(|&v| g[0] * (v - lse).exp()).collect();
                acc(&mut grads[a.0], &da);
            }
        }
    }
}

fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(a) => {
            for (x, y) in a.iter_mut().zip(g) {
                *x = *x + *y;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Softmax of one row over its unmasked entries. Masked entries get 0.
pub(crate) fn softmax_row<T: Scalar>(x: &[T], mask: &[bool], out: &mut [T]) -> Result<()> {
    let mut m = T::neg_infinity();
    for (v, keep) in x.iter().zip(mask) {
        if *keep {
            m = m.max(*v);
        }
    }
    if m == T::neg_infinity() {
        return Err(Error::DegenerateAttention);
    }
    let mut total = T::zero();
    for ((o, v), keep) in out.iter_mut().zip(x).zip(mask) {
        *o = if *keep { (*v - m).exp() } else { T::zero() };
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
    Ok(())
}

/// `out += a[m x k] · b[k x n]`
fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (ov, bv) in o.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *ov = *ov + av * *bv;
            }
        }
    }
}

/// `out += a[m x k] · b[n x k]ᵀ`
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorises.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .fold(T::zero(), |s, (x, y)| s + *x * *y);
    for (xa, xb) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out += a[m x k]ᵀ · b[m x n]`
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (ov, bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *ov = *ov + av * *bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty() -> ParamSet<f64> {
        ParamSet::new()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let p = empty();
        let mut t = Tape::new(&p);
        let i = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = t.constant(2, 1, vec![3.0, 4.0]).unwrap();
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), &[3.0, 4.0]);

        let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = t.constant(2, 1, vec![0.0, 0.0]).unwrap();
        let y = t.matmul(a, z).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = t.constant(2, 2, vec![0.0; 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn leaky_relu_values() {
        let p = empty();
        let mut t = Tape::new(&p);
        let x = t.constant(1, 3, vec![2.0, -2.0, 0.0]).unwrap();
        let y = t.leaky_relu(x, 0.01);
        assert_eq!(t.value(y), &[2.0, -0.02, 0.0]);
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_is_slope() {
        let p = empty();
        let mut t = Tape::new(&p);
        let x = t.input(1, 1, vec![0.0]).unwrap();
        let y = t.leaky_relu(x, 0.01);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.01]);
    }

    #[test]
    fn softmax_contracts() {
        let p = empty();
        let mut t = Tape::new(&p);
        let x = t.constant(1, 3, vec![0.7, 0.7, 0.7]).unwrap();
        let y = t.softmax(x).unwrap();
        for v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(1, 2, vec![5.0, 5.0]).unwrap();
        let y = t.softmax_masked(x, &[true, false]).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0]);
        let x = t.constant(1, 2, vec![5.0, 5.0]).unwrap();
        assert!(matches!(
            t.softmax_masked(x, &[false, false]),
            Err(Error::DegenerateAttention)
        ));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let p = empty();
        let mut t = Tape::new(&p);
        let z = vec![0.3, -1.2, 2.5, 0.0];
        let a = t.constant(1, 4, z.clone()).unwrap();
        let b = t
            .constant(1, 4, z.iter().map(|v| v + 10.0).collect())
            .unwrap();
        let sa = t.softmax(a).unwrap();
        let sb = t.softmax(b).unwrap();
        for (x, y) in t.value(sa).iter().zip(t.value(sb)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn second_backward_is_an_error() {
        let p = empty();
        let mut t = Tape::new(&p);
        let x = t.input(1, 1, vec![2.0]).unwrap();
        let y = t.sum(x);
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::BackwardTwice)));
    }

    #[test]
    fn shared_use_accumulates() {
        let p = empty();
        let mut t = Tape::new(&p);
        let x = t.input(1, 2, vec![1.5, -0.5]).unwrap();
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, -1.0]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0f64).abs() < 1e-300);
        assert!((log_sigmoid(0.0f64) - 0.5f64.ln()).abs() < 1e-15);
    }
}
