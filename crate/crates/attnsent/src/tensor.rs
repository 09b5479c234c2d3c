//! Dense 2-D matrices and the small set of differentiable kernels the rest of
//! the crate is built from.
//!
//! Convention: row-major storage, rows are sequence positions, columns are
//! features. All arithmetic is `f64`; every kernel checks its output for
//! non-finite values so NaN/Inf cannot propagate silently.

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values. At least 1x1 by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from a flat row-major buffer, rejecting zero-sized
    /// shapes, length mismatches, and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix dimensions must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix buffer has {} values, expected {rows}x{cols} = {}",
                data.len(),
                rows * cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("matrix construction"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Matrix::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidInput("ragged rows in matrix literal".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::new(rows, cols, data)
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizer updates. The caller is responsible for
    /// keeping values finite; kernels re-check on their outputs.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Standard matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let out_row = &mut out[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &l) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &r) in out_row.iter_mut().zip(rhs_row) {
                    *o += l * r;
                }
            }
        }
        finite("matmul", Matrix::checked(self.rows, rhs.cols, out))
    }

    /// `self · rhsᵀ` without materializing the transpose. Inner loops are
    /// contiguous dot products, so this is the fast path for `Q·Kᵀ`.
    pub fn matmul_bt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape("matmul_bt", self.shape(), rhs.shape()));
        }
        let mut out = Vec::with_capacity(self.rows * rhs.rows);
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            for j in 0..rhs.rows {
                let rhs_row = rhs.row(j);
                out.push(dot(lhs_row, rhs_row));
            }
        }
        finite("matmul_bt", Matrix::checked(self.rows, rhs.rows, out))
    }

    /// `selfᵀ · rhs` without materializing the transpose; the usual form of
    /// weight gradients `Xᵀ·dY`.
    pub fn matmul_at(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape("matmul_at", self.shape(), rhs.shape()));
        }
        let mut out = vec![0.0; self.cols * rhs.cols];
        for i in 0..self.rows {
            let lhs_row = self.row(i);
            let rhs_row = rhs.row(i);
            for (k, &l) in lhs_row.iter().enumerate() {
                let out_row = &mut out[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &r) in out_row.iter_mut().zip(rhs_row) {
                    *o += l * r;
                }
            }
        }
        finite("matmul_at", Matrix::checked(self.cols, rhs.cols, out))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", rhs, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", rhs, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        finite(
            "scale",
            Matrix::checked(self.rows, self.cols, self.data.iter().map(|v| v * s).collect()),
        )
    }

    fn zip_with(&self, op: &'static str, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(op, self.shape(), rhs.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        finite(op, Matrix::checked(self.rows, self.cols, data))
    }

    // Internal constructor for kernel outputs whose shape is known correct;
    // finiteness is still verified by `finite`.
    fn checked(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn finite(op: &'static str, m: Matrix) -> Result<Matrix> {
    if m.data.iter().all(|v| v.is_finite()) {
        Ok(m)
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Forward output paired with the context needed to map an upstream gradient
/// back onto the kernel's inputs.
pub struct DualResult<C> {
    pub output: Matrix,
    pub ctx: C,
}

pub struct MatmulCtx {
    a: Matrix,
    b: Matrix,
}

impl MatmulCtx {
    /// `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
    pub fn backward(&self, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
        let da = upstream.matmul_bt(&self.b)?;
        let db = self.a.matmul_at(upstream)?;
        Ok((da, db))
    }
}

pub fn matmul_dual(a: &Matrix, b: &Matrix) -> Result<DualResult<MatmulCtx>> {
    Ok(DualResult {
        output: a.matmul(b)?,
        ctx: MatmulCtx {
            a: a.clone(),
            b: b.clone(),
        },
    })
}

/// Row-wise softmax with max-subtraction so large logits cannot overflow.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for i in 0..m.rows {
        let row = m.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / sum));
    }
    finite("softmax_rows", Matrix::checked(m.rows, m.cols, data))
}

pub struct SoftmaxCtx {
    /// The forward output; the Jacobian of softmax only needs it.
    y: Matrix,
}

impl SoftmaxCtx {
    /// Per row: `dx = y ⊙ (dy − (dy·y))`.
    pub fn backward(&self, upstream: &Matrix) -> Result<Matrix> {
        softmax_rows_backward(&self.y, upstream)
    }
}

pub fn softmax_rows_dual(m: &Matrix) -> Result<DualResult<SoftmaxCtx>> {
    let output = softmax_rows(m)?;
    let y = output.clone();
    Ok(DualResult {
        output,
        ctx: SoftmaxCtx { y },
    })
}

pub fn softmax_rows_backward(y: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if y.shape() != upstream.shape() {
        return Err(Error::shape("softmax_rows_backward", y.shape(), upstream.shape()));
    }
    let mut data = Vec::with_capacity(y.data.len());
    for i in 0..y.rows {
        let yr = y.row(i);
        let gr = upstream.row(i);
        let inner = dot(yr, gr);
        data.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - inner)));
    }
    finite("softmax_rows_backward", Matrix::checked(y.rows, y.cols, data))
}

/// Column means over all positions: `1×d` from `n×d`.
pub fn global_average_pool(x: &Matrix) -> Result<Matrix> {
    masked_average_pool(x, None)
}

/// Column means over the rows marked valid. `None` means all rows are valid.
pub fn masked_average_pool(x: &Matrix, valid: Option<&[bool]>) -> Result<Matrix> {
    if let Some(v) = valid {
        if v.len() != x.rows {
            return Err(Error::InvalidInput(format!(
                "mask has {} entries for {} rows",
                v.len(),
                x.rows
            )));
        }
    }
    let count = match valid {
        Some(v) => v.iter().filter(|&&b| b).count(),
        None => x.rows,
    };
    if count == 0 {
        return Err(Error::InvalidInput("average pool over fully-masked input".into()));
    }
    let mut sums = vec![0.0; x.cols];
    for i in 0..x.rows {
        if valid.map_or(true, |v| v[i]) {
            for (s, &v) in sums.iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
    }
    let inv = 1.0 / count as f64;
    sums.iter_mut().for_each(|s| *s *= inv);
    finite("average_pool", Matrix::checked(1, x.cols, sums))
}

/// Spreads a `1×d` upstream gradient evenly over the valid rows.
pub fn masked_average_pool_backward(
    upstream: &Matrix,
    rows: usize,
    valid: Option<&[bool]>,
) -> Result<Matrix> {
    let count = match valid {
        Some(v) => v.iter().filter(|&&b| b).count(),
        None => rows,
    };
    if count == 0 {
        return Err(Error::InvalidInput("average pool over fully-masked input".into()));
    }
    let inv = 1.0 / count as f64;
    let mut out = vec![0.0; rows * upstream.cols];
    for i in 0..rows {
        if valid.map_or(true, |v| v[i]) {
            let dst = &mut out[i * upstream.cols..(i + 1) * upstream.cols];
            for (d, &g) in dst.iter_mut().zip(upstream.row(0)) {
                *d = g * inv;
            }
        }
    }
    finite(
        "average_pool_backward",
        Matrix::checked(rows, upstream.cols, out),
    )
}

pub struct PoolCtx {
    rows: usize,
    valid: Option<Vec<bool>>,
}

impl PoolCtx {
    pub fn backward(&self, upstream: &Matrix) -> Result<Matrix> {
        masked_average_pool_backward(upstream, self.rows, self.valid.as_deref())
    }
}

pub fn global_average_pool_dual(x: &Matrix) -> Result<DualResult<PoolCtx>> {
    Ok(DualResult {
        output: global_average_pool(x)?,
        ctx: PoolCtx {
            rows: x.rows,
            valid: None,
        },
    })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Keep the output in the open interval (0,1): the saturated tails would
    // otherwise round to exactly 0.0 or 1.0 in f64.
    y.clamp(f64::MIN_POSITIVE, 1.0 - 0.5 * f64::EPSILON)
}

pub fn relu(x: &Matrix) -> Result<Matrix> {
    finite(
        "relu",
        Matrix::checked(x.rows, x.cols, x.data.iter().map(|&v| v.max(0.0)).collect()),
    )
}

/// Gradient is passed where the pre-activation was strictly positive.
pub fn relu_backward(x: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape("relu_backward", x.shape(), upstream.shape()));
    }
    let data = x
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect();
    finite("relu_backward", Matrix::checked(x.rows, x.cols, data))
}

pub fn sigmoid(x: &Matrix) -> Result<Matrix> {
    finite(
        "sigmoid",
        Matrix::checked(
            x.rows,
            x.cols,
            x.data.iter().map(|&v| sigmoid_scalar(v)).collect(),
        ),
    )
}

/// Backward from the forward output: `dx = y·(1−y)·dy`.
pub fn sigmoid_backward(y: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if y.shape() != upstream.shape() {
        return Err(Error::shape("sigmoid_backward", y.shape(), upstream.shape()));
    }
    let data = y
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&yv, &gv)| yv * (1.0 - yv) * gv)
        .collect();
    finite("sigmoid_backward", Matrix::checked(y.rows, y.cols, data))
}

pub struct ReluCtx {
    x: Matrix,
}

impl ReluCtx {
    pub fn backward(&self, upstream: &Matrix) -> Result<Matrix> {
        relu_backward(&self.x, upstream)
    }
}

pub fn relu_dual(x: &Matrix) -> Result<DualResult<ReluCtx>> {
    Ok(DualResult {
        output: relu(x)?,
        ctx: ReluCtx { x: x.clone() },
    })
}

pub struct SigmoidCtx {
    y: Matrix,
}

impl SigmoidCtx {
    pub fn backward(&self, upstream: &Matrix) -> Result<Matrix> {
        sigmoid_backward(&self.y, upstream)
    }
}

pub fn sigmoid_dual(x: &Matrix) -> Result<DualResult<SigmoidCtx>> {
    let output = sigmoid(x)?;
    let y = output.clone();
    Ok(DualResult {
        output,
        ctx: SigmoidCtx { y },
    })
}

/// Column-wise concatenation `[left | right]` of two matrices with equal row
/// counts.
pub fn concat_cols(left: &Matrix, right: &Matrix) -> Result<Matrix> {
    if left.rows != right.rows {
        return Err(Error::shape("concat_cols", left.shape(), right.shape()));
    }
    let cols = left.cols + right.cols;
    let mut data = Vec::with_capacity(left.rows * cols);
    for i in 0..left.rows {
        data.extend_from_slice(left.row(i));
        data.extend_from_slice(right.row(i));
    }
    finite("concat_cols", Matrix::checked(left.rows, cols, data))
}

/// Splits a gradient of `[left | right]` back into the two column blocks.
pub fn split_cols(m: &Matrix, left_cols: usize) -> Result<(Matrix, Matrix)> {
    if left_cols == 0 || left_cols >= m.cols {
        return Err(Error::InvalidInput(format!(
            "cannot split {} columns at {left_cols}",
            m.cols
        )));
    }
    let right_cols = m.cols - left_cols;
    let mut left = Vec::with_capacity(m.rows * left_cols);
    let mut right = Vec::with_capacity(m.rows * right_cols);
    for i in 0..m.rows {
        let row = m.row(i);
        left.extend_from_slice(&row[..left_cols]);
        right.extend_from_slice(&row[left_cols..]);
    }
    Ok((
        Matrix::checked(m.rows, left_cols, left),
        Matrix::checked(m.rows, right_cols, right),
    ))
}
