//! Dense row-major matrices and the value-level primitives shared by the
//! experts, the gate and the metrics: softmax, layer normalization and the
//! distribution statistics (entropy, margin, top-1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Tolerance on `Σp = 1` accepted by [`ProbVector`].
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// Single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!(
                    "ragged rows: row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    /// Gather rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `out = a · b`, with `out` pre-shaped and zeroed.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates entries in `[0,1]` and `|Σp − 1| ≤ 1e-9`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::dim("probability vector must be nonempty"));
        }
        let mut sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("entry {i} = {v} outside [0,1]")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("entries sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    /// Wraps values already known to be on the simplex (e.g. a softmax row).
    pub(crate) fn new_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(Self::new(values.clone()).is_ok(), "{values:?}");
        Self(values)
    }

    pub fn uniform(c: usize) -> Self {
        Self(vec![1.0 / c as f64; c])
    }

    pub fn one_hot(c: usize, k: usize) -> Self {
        let mut v = vec![0.0; c];
        v[k] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, c: usize) -> f64 {
        self.0[c]
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ProbVector::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Result<ProbVector> {
    if z.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    Ok(ProbVector::new_unchecked(out))
}

pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::dim("log-softmax of an empty vector"));
    }
    let lse = logsumexp(z);
    Ok(z.iter().map(|&v| v - lse).collect())
}

/// `(x − mean) / sqrt(var + eps)` with the population variance. No affine.
pub fn layer_norm(x: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, eps, &mut out);
    out
}

/// Writes the normalized row and returns `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_into(x: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Shannon entropy in nats, with `0·log 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    -p.as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Entropy divided by `log C`; undefined for `C = 1`.
pub fn normalized_entropy(p: &ProbVector) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::dim("normalized entropy needs at least two classes"));
    }
    Ok(entropy(p) / (p.len() as f64).ln())
}

/// Largest minus second-largest entry (`p_(1) − p_(2)`); 1 for `C = 1`.
pub fn margin(p: &ProbVector) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in p.as_slice() {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f64::NEG_INFINITY {
        first
    } else {
        first - second
    }
}

pub fn top1(p: &ProbVector) -> (usize, f64) {
    let k = p.argmax();
    (k, p.get(k))
}

/// Binary entropy `−g ln g − (1−g) ln(1−g)`, zero at the endpoints.
pub fn bernoulli_entropy(g: f64) -> f64 {
    let term = |v: f64| if v > 0.0 { -v * v.ln() } else { 0.0 };
    term(g) + term(1.0 - g)
}
