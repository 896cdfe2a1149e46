use serde::{Deserialize, Serialize};

use super::TensorError;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::row_vector(vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor2D) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor2D, b: &Tensor2D) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D, TensorError> {
    if a.cols != b.rows {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a^T · b`
pub fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D, TensorError> {
    if a.rows != b.rows {
        return Err(mismatch("matmul_tn", a, b));
    }
    let mut out = Tensor2D::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ai) in arow.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += ai * bv;
            }
        }
    }
    Ok(out)
}

/// `a · b^T`
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D, TensorError> {
    if a.cols != b.cols {
        return Err(mismatch("matmul_nt", a, b));
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// Adds a 1×cols bias to every row.
pub fn add_bias(x: &Tensor2D, bias: &Tensor2D) -> Result<Tensor2D, TensorError> {
    if bias.rows != 1 || bias.cols != x.cols {
        return Err(mismatch("add_bias", x, bias));
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn add(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D, TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", a, b));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn relu(x: &Tensor2D) -> Tensor2D {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor2D) -> Tensor2D {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax, shifted by the row max for stability.
pub fn softmax(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))` without overflow.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean of the first `len` rows as a 1×cols tensor; zeros when `len == 0`.
pub fn mean_pool(x: &Tensor2D, len: usize) -> Result<Tensor2D, TensorError> {
    if len > x.rows {
        return Err(TensorError::ShapeMismatch {
            op: "mean_pool",
            left: x.shape(),
            right: (len, x.cols),
        });
    }
    let mut out = Tensor2D::zeros(1, x.cols);
    if len == 0 {
        return Ok(out);
    }
    for r in 0..len {
        for (o, v) in out.data.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let n = len as f64;
    out.data.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Gathers rows of `table` for each id.
pub fn embedding_lookup(table: &Tensor2D, ids: &[u32]) -> Result<Tensor2D, TensorError> {
    let mut out = Tensor2D::zeros(ids.len(), table.cols);
    for (r, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= table.rows {
            return Err(TensorError::IndexOutOfRange {
                index: id,
                rows: table.rows,
            });
        }
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    Ok(out)
}
