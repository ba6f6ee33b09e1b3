//! Dense row-major matrices and the forward kernels shared by every block.

use crate::error::{Error, Result};

/// Score value used for a blocked attention entry on the additive-mask path.
/// `exp` of it (after max subtraction) underflows to exactly zero.
pub const MASKED_SCORE: f64 = -1e30;

/// Dense real matrix. Rows are sequence positions, columns are features.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
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

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn check_same_shape(&self, other: &Mat, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &Mat) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(&self, row: &Mat) -> Result<Mat> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "broadcast {}x{} onto {}x{}",
                row.rows, row.cols, self.rows, self.cols
            )));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (a, b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Mat {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Column sums as a `1 × cols` row.
    pub fn col_sums(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for i in 0..self.rows {
            for (a, b) in out.data.iter_mut().zip(self.row(i)) {
                *a += b;
            }
        }
        out
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Mat> {
        if start + len > self.rows {
            return Err(Error::ShapeMismatch(format!(
                "rows {start}..{} of a {}-row matrix",
                start + len,
                self.rows
            )));
        }
        Ok(Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Mat> {
        if start + len > self.cols {
            return Err(Error::ShapeMismatch(format!(
                "cols {start}..{} of a {}-column matrix",
                start + len,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Mat {
            rows: self.rows,
            cols: len,
            data,
        })
    }

    pub fn concat_rows(parts: &[&Mat]) -> Result<Mat> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::ShapeMismatch(format!(
                    "concat_rows with {} and {} columns",
                    cols, m.cols
                )));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn concat_cols(parts: &[&Mat]) -> Result<Mat> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(m) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::ShapeMismatch(format!(
                "concat_cols with {} and {} rows",
                rows, m.rows
            )));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(i));
            }
        }
        Ok(Mat { rows, cols, data })
    }

    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// `c = a · b + beta · c` over strided operands, `a` is m×k and `b` is k×n.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: every operand slice covers the strided extent implied by its
    // dimensions (checked by the callers' shape tests), and `c` does not alias
    // `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn row_is_masked(max: f64) -> bool {
    max == f64::NEG_INFINITY || max <= MASKED_SCORE * 0.5
}

/// Row-wise `softmax(S / sqrt(d_q))`. Entries at `-inf` (or the additive mask
/// sentinel) receive exactly zero weight.
pub fn scaled_softmax(s: &Mat, d_q: usize) -> Result<Mat> {
    if d_q == 0 {
        return Err(Error::ShapeMismatch("softmax scale d_q must be positive".into()));
    }
    softmax_rows(s, 1.0 / (d_q as f64).sqrt())
}

/// Row-wise `softmax(scale · S)`.
pub(crate) fn softmax_rows(s: &Mat, scale: f64) -> Result<Mat> {
    let mut out = Mat::zeros(s.rows, s.cols);
    for i in 0..s.rows {
        let row = s.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if row_is_masked(max) {
            return Err(Error::RowFullyMasked { row: i });
        }
        let o = out.row_mut(i);
        let mut total = 0.0;
        for (dst, &x) in o.iter_mut().zip(row) {
            let e = ((x - max) * scale).exp();
            *dst = e;
            total += e;
        }
        let inv = 1.0 / total;
        o.iter_mut().for_each(|x| *x *= inv);
    }
    Ok(out)
}

/// Per-row standardization `(x - mean) / sqrt(var + eps)` followed by an affine map.
pub fn layer_norm(m: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Result<Mat> {
    Ok(layer_norm_parts(m, gain, bias, eps)?.0)
}

/// Layer norm that also returns the normalized rows and the per-row inverse
/// standard deviations needed by the backward pass.
pub(crate) fn layer_norm_parts(
    m: &Mat,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Mat, Mat, Vec<f64>)> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(Error::ShapeMismatch(format!(
            "layer norm over {} columns with gain {} / bias {}",
            m.cols,
            gain.len(),
            bias.len()
        )));
    }
    let n = m.cols as f64;
    let mut out = Mat::zeros(m.rows, m.cols);
    let mut xhat = Mat::zeros(m.rows, m.cols);
    let mut inv_std = Vec::with_capacity(m.rows);
    for i in 0..m.rows {
        let row = m.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (dst, &x) in xh.iter_mut().zip(row) {
            *dst = (x - mean) * is;
        }
        let xh = xhat.row(i).to_vec();
        for (j, dst) in out.row_mut(i).iter_mut().enumerate() {
            *dst = xh[j] * gain[j] + bias[j];
        }
    }
    Ok((out, xhat, inv_std))
}
