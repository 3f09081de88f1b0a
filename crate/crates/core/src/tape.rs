//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the rule for pushing gradients back to its parents. Rows are
//! samples and columns are features throughout, so one tape covers a whole
//! mini-batch. [`Tape::backward`] seeds a 1×1 root with 1 and walks the nodes
//! in reverse insertion order, which is a valid topological order by
//! construction.
//!
//! Shape mismatches inside the tape are programming errors and panic; the
//! model layer validates user-facing dimensions before building a graph.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::math::{self, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies one trainable tensor: which parameter store, and its slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u32,
    pub index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    LnFloor(Var, f64),
    LayerNorm(Var, Vec<f64>),
    LogSoftmax(Var),
    Softmax(Var),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
    kink_margin: f64,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamKey, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients, sorted by key.
    pub fn params(&self) -> Vec<(ParamKey, &Matrix)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|&(k, i)| self.grads[i].as_ref().map(|g| (k, g)))
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn param(&self, key: ParamKey) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(k, _)| *k == key)
            .and_then(|&(_, i)| self.grads[i].as_ref())
    }

    /// Gradients for one store, indexed by slot; `None` for slots not on the tape.
    pub fn for_store(&self, store: u32, len: usize) -> Vec<Option<Matrix>> {
        let mut out = vec![None; len];
        for &(k, i) in &self.params {
            if k.store == store && k.index < len {
                out[k.index] = self.grads[i].clone();
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            kink_margin: f64::INFINITY,
            ..Default::default()
        }
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

    /// Smallest |input| seen by any ReLU on this tape. Finite differences
    /// with a step larger than this may straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a trainable leaf; repeated calls with the same key return the same node.
    pub fn param(&mut self, key: ParamKey, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).expect("tape matmul shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x + 1ᵀb` for a `1×m` bias row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(b), (1, cols), "bias shape");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddBias(x, b), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape");
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data).expect("shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Scales row `i` of `x` by `g[i]` for a `B×1` column `g`.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(g), (rows, 1), "column shape");
        let mut out = self.value(x).clone();
        for r in 0..rows {
            let s = self.value(g).get(r, 0);
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let _ = cols;
        let ng = self.ng(x) || self.ng(g);
        self.push(out, Op::MulCol(x, g), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let margin = v.data().iter().fold(f64::INFINITY, |m, a| m.min(a.abs()));
        let out = v.map(|a| a.max(0.0));
        self.kink_margin = self.kink_margin.min(margin);
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::softplus);
        let ng = self.ng(x);
        self.push(out, Op::Softplus(x), ng)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        let ng = self.ng(x);
        self.push(out, Op::LnFloor(x, floor), ng)
    }

    /// Row-wise affine-free LayerNorm.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            inv.push(math::layer_norm_into(v.row(r), eps, out.row_mut(r)));
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm(x, inv), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.clone();
        for r in 0..v.rows() {
            let lse = math::logsumexp(v.row(r));
            for o in out.row_mut(r) {
                *o -= lse;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::LogSoftmax(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            math::softmax_into(v.row(r), out.row_mut(r));
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Embedding lookup: row `i` of the output is row `idx[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let out = self.value(table).select_rows(idx);
        let ng = self.ng(table);
        self.push(out, Op::GatherRows(table, idx.to_vec()), ng)
    }

    /// `B×1` column with entry `i` equal to `x[i, idx[i]]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(v.rows(), idx.len(), "pick length");
        let data = idx.iter().enumerate().map(|(r, &c)| v.get(r, c)).collect();
        let out = Matrix::from_vec(idx.len(), 1, data).expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::PickCols(x, idx.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat rows");
        let mut out = Matrix::zeros(ra, ca + cb);
        for r in 0..ra {
            let row = out.row_mut(r);
            row[..ca].copy_from_slice(self.nodes[a.0].value.row(r));
            row[ca..].copy_from_slice(self.nodes[b.0].value.row(r));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x);
        assert!(start <= end && end <= v.cols(), "slice bounds");
        let mut out = Matrix::zeros(v.rows(), end - start);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceCols(x, start), ng)
    }

    /// Row sums as a `B×1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(v.rows(), 1, data).expect("shape");
        let ng = self.ng(x);
        self.push(out, Op::SumCols(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Matrix::filled(1, 1, s), Op::Sum(x), ng)
    }

    /// Mean over all entries (0 for an empty input).
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len();
        let s = if n == 0 {
            0.0
        } else {
            v.data().iter().sum::<f64>() / n as f64
        };
        let ng = self.ng(x);
        self.push(Matrix::filled(1, 1, s), Op::Mean(x), ng)
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::dim(format!(
                "backward needs a scalar root, got {}x{}",
                rv.rows(),
                rv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }

        let params = self
            .params
            .iter()
            .filter(|(_, v)| v.0 <= root.0)
            .map(|(k, v)| (*k, v.0))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, dy.matmul(&val(*b).transpose()).expect("shape"));
                }
                if self.ng(*b) {
                    acc(*b, val(*a).transpose().matmul(dy).expect("shape"));
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, dy.clone());
                if self.ng(*b) {
                    let mut db = Matrix::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, g) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, hadamard(dy, val(*b)));
                }
                if self.ng(*b) {
                    acc(*b, hadamard(dy, val(*a)));
                }
            }
            Op::MulCol(x, g) => {
                let (xv, gv) = (val(*x), val(*g));
                if self.ng(*x) {
                    let mut dx = dy.clone();
                    for r in 0..dx.rows() {
                        let s = gv.get(r, 0);
                        for o in dx.row_mut(r) {
                            *o *= s;
                        }
                    }
                    acc(*x, dx);
                }
                if self.ng(*g) {
                    let data = (0..dy.rows())
                        .map(|r| dy.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*g, Matrix::from_vec(dy.rows(), 1, data).expect("shape"));
                }
            }
            Op::Scale(x, s) => acc(*x, dy.map(|g| g * s)),
            Op::AddScalar(x) => acc(*x, dy.clone()),
            Op::Relu(x) => {
                let y = &node.value;
                let mut dx = dy.clone();
                for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let mut dx = dy.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (1.0 - s);
                }
                acc(*x, dx);
            }
            Op::Softplus(x) => {
                let mut dx = dy.clone();
                for (d, &a) in dx.data_mut().iter_mut().zip(val(*x).data()) {
                    *d *= math::sigmoid(a);
                }
                acc(*x, dx);
            }
            Op::LnFloor(x, floor) => {
                let mut dx = dy.clone();
                for (d, &a) in dx.data_mut().iter_mut().zip(val(*x).data()) {
                    *d = if a > *floor { *d / a } else { 0.0 };
                }
                acc(*x, dx);
            }
            Op::LayerNorm(x, inv) => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let n = cols as f64;
                let mut dx = Matrix::zeros(rows, cols);
                for (r, &inv_r) in inv.iter().enumerate().take(rows) {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, &g), &yy) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv_r * (g - mean_g - yy * mean_gy);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut dx = dy.clone();
                for r in 0..y.rows() {
                    let total: f64 = dy.row(r).iter().sum();
                    for (d, &ly) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d -= ly.exp() * total;
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = dy.clone();
                for r in 0..y.rows() {
                    let dot: f64 = dy.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for (d, &p) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d = p * (*d - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows(t, idx) => {
                let tv = val(*t);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, g) in dt.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                acc(*t, dt);
            }
            Op::PickCols(x, idx) => {
                let xv = val(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &c) in idx.iter().enumerate() {
                    dx.set(r, c, dy.get(r, 0));
                }
                acc(*x, dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let rows = dy.rows();
                if self.ng(*a) {
                    let mut da = Matrix::zeros(rows, ca);
                    for r in 0..rows {
                        da.row_mut(r).copy_from_slice(&dy.row(r)[..ca]);
                    }
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Matrix::zeros(rows, dy.cols() - ca);
                    for r in 0..rows {
                        db.row_mut(r).copy_from_slice(&dy.row(r)[ca..]);
                    }
                    acc(*b, db);
                }
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let w = dy.cols();
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(dy.row(r));
                }
                acc(*x, dx);
            }
            Op::SumCols(x) => {
                let xv = val(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let g = dy.get(r, 0);
                    dx.row_mut(r).iter_mut().for_each(|d| *d = g);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, Matrix::filled(r, c, dy.get(0, 0)));
            }
            Op::Mean(x) => {
                let (r, c) = val(*x).shape();
                let n = (r * c).max(1) as f64;
                acc(*x, Matrix::filled(r, c, dy.get(0, 0) / n));
            }
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape")
}
