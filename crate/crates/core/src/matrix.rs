//! Dense row-major matrices over `f64` and fixed-point words.
//!
//! The fixed-point products accumulate every multiply exactly in the wide
//! container and round once per output cell.

use rand::Rng;
use thiserror::Error;

use crate::fixedpoint::{convert, FixedArith, FixedError, FixedFormat, FixedWord, RoundingMode, SqrtPath, StochasticStream, WideWord};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MatrixError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("matrices use different fixed-point formats")]
    FormatMismatch,
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::BadLength { rows, cols, len: data.len() });
        }
        Ok(RealMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        RealMatrix { rows, cols, data }
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
    }

    pub fn column_vector(data: Vec<f64>) -> Self {
        RealMatrix { rows: data.len(), cols: 1, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, &v) in values.iter().enumerate() {
            self.set(r, c, v);
        }
    }

    /// Copy of columns `[start, start + count)`.
    pub fn columns(&self, start: usize, count: usize) -> RealMatrix {
        RealMatrix::from_fn(self.rows, count, |r, c| self.get(r, start + c))
    }

    pub fn transpose(&self) -> RealMatrix {
        RealMatrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, other: &RealMatrix) -> Result<RealMatrix, MatrixError> {
        mat_mul_real(self, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealMatrix {
        RealMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &RealMatrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<RealMatrix, MatrixError> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(RealMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &RealMatrix) -> Result<RealMatrix, MatrixError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &RealMatrix) -> Result<RealMatrix, MatrixError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> RealMatrix {
        self.map(|v| v * s)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &RealMatrix, op: &'static str) -> Result<(), MatrixError> {
        if self.shape() != other.shape() {
            return Err(MatrixError::DimensionMismatch { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }
}

pub fn mat_mul_real(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix, MatrixError> {
    if a.cols != b.rows {
        return Err(MatrixError::DimensionMismatch { op: "matmul", left: a.shape(), right: b.shape() });
    }
    let (m, n, p) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * p];
    for r in 0..m {
        let out_row = &mut out[r * p..(r + 1) * p];
        for k in 0..n {
            let aik = a.data[r * n + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkc) in out_row.iter_mut().zip(&b.data[k * p..(k + 1) * p]) {
                *o += aik * bkc;
            }
        }
    }
    Ok(RealMatrix { rows: m, cols: p, data: out })
}

/// Dense matrix of fixed-point words sharing one format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
    format: FixedFormat,
}

impl FixedMatrix {
    pub fn from_reps(rows: usize, cols: usize, data: Vec<i32>, format: FixedFormat) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::BadLength { rows, cols, len: data.len() });
        }
        for &rep in &data {
            FixedWord::from_rep(rep as i64, format)?;
        }
        Ok(FixedMatrix { rows, cols, data, format })
    }

    pub(crate) fn from_reps_unchecked(rows: usize, cols: usize, data: Vec<i32>, format: FixedFormat) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        FixedMatrix { rows, cols, data, format }
    }

    pub fn zeros(rows: usize, cols: usize, format: FixedFormat) -> Self {
        FixedMatrix { rows, cols, data: vec![0; rows * cols], format }
    }

    pub fn identity(n: usize, format: FixedFormat) -> Self {
        let mut m = Self::zeros(n, n, format);
        for i in 0..n {
            m.data[i * n + i] = format.one_rep();
        }
        m
    }

    pub fn column_vector(words: &[FixedWord]) -> Result<Self, MatrixError> {
        let format = words.first().map(|w| w.format()).unwrap_or(FixedFormat::Q32_18);
        if words.iter().any(|w| w.format() != format) {
            return Err(MatrixError::FormatMismatch);
        }
        Ok(FixedMatrix { rows: words.len(), cols: 1, data: words.iter().map(|w| w.rep()).collect(), format })
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

    pub fn format(&self) -> FixedFormat {
        self.format
    }

    pub fn reps(&self) -> &[i32] {
        &self.data
    }

    #[inline]
    pub fn rep(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    pub fn get(&self, r: usize, c: usize) -> FixedWord {
        FixedWord::new_unchecked(self.rep(r, c), self.format)
    }

    pub fn row_reps(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_reps(&self, c: usize) -> Vec<i32> {
        (0..self.rows).map(|r| self.rep(r, c)).collect()
    }

    pub fn transpose(&self) -> FixedMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.rep(r, c));
            }
        }
        FixedMatrix { rows: self.cols, cols: self.rows, data, format: self.format }
    }

    fn check_format(&self, arith: &FixedArith) -> Result<(), MatrixError> {
        if self.format != arith.format() {
            return Err(MatrixError::FormatMismatch);
        }
        Ok(())
    }

    fn same_shape(&self, other: &FixedMatrix, op: &'static str) -> Result<(), MatrixError> {
        if self.shape() != other.shape() {
            return Err(MatrixError::DimensionMismatch { op, left: self.shape(), right: other.shape() });
        }
        if self.format != other.format {
            return Err(MatrixError::FormatMismatch);
        }
        Ok(())
    }
}

/// One output cell of the MAC discipline: exact wide products, a saturating
/// wide running sum, one terminal rounding.
#[inline]
pub fn mac_cell(arith: &mut FixedArith, lhs: &[i32], rhs: impl Iterator<Item = i32>) -> i32 {
    let mut sum = 0i64;
    for (&a, b) in lhs.iter().zip(rhs) {
        sum = arith.accumulate(sum, a as i64 * b as i64);
    }
    arith.cast_wide_rep(sum as i128)
}

pub fn mat_mul_fixed(a: &FixedMatrix, b: &FixedMatrix, arith: &mut FixedArith) -> Result<FixedMatrix, MatrixError> {
    if a.cols != b.rows {
        return Err(MatrixError::DimensionMismatch { op: "matmul_fixed", left: a.shape(), right: b.shape() });
    }
    a.check_format(arith)?;
    b.check_format(arith)?;
    let (m, p) = (a.rows, b.cols);
    let mut out = vec![0i32; m * p];
    for col in 0..p {
        for row in 0..m {
            let rhs = (0..b.rows).map(|k| b.data[k * p + col]);
            out[row * p + col] = mac_cell(arith, a.row_reps(row), rhs);
        }
    }
    Ok(FixedMatrix { rows: m, cols: p, data: out, format: a.format })
}

pub fn dot_fixed(u: &FixedMatrix, v: &FixedMatrix, arith: &mut FixedArith) -> Result<FixedWord, MatrixError> {
    if u.rows != 1 || v.cols != 1 || u.cols != v.rows {
        return Err(MatrixError::DimensionMismatch { op: "dot_fixed", left: u.shape(), right: v.shape() });
    }
    u.check_format(arith)?;
    v.check_format(arith)?;
    let rep = mac_cell(arith, &u.data, v.data.iter().copied());
    Ok(arith.word(rep))
}

/// Exact saturating sum of squares with `2*FL` fraction bits.
pub fn sum_of_squares(arith: &mut FixedArith, v: &[i32]) -> WideWord {
    let mut sum = 0i64;
    for &x in v {
        sum = arith.accumulate(sum, x as i64 * x as i64);
    }
    WideWord::new(sum, 2 * arith.format().fraction_length())
}

/// Euclidean norm of a column vector through the chosen square-root path.
pub fn norm_fixed(v: &FixedMatrix, sqrt_path: SqrtPath, arith: &mut FixedArith) -> Result<FixedWord, MatrixError> {
    if v.cols != 1 {
        return Err(MatrixError::DimensionMismatch { op: "norm_fixed", left: v.shape(), right: (v.rows, 1) });
    }
    v.check_format(arith)?;
    let sum = sum_of_squares(arith, &v.data);
    Ok(arith.sqrt_wide_via(sum, sqrt_path)?)
}

pub fn add_fixed(a: &FixedMatrix, b: &FixedMatrix, arith: &mut FixedArith) -> Result<FixedMatrix, MatrixError> {
    a.same_shape(b, "add_fixed")?;
    a.check_format(arith)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| arith.add_rep(x, y)).collect();
    Ok(FixedMatrix { rows: a.rows, cols: a.cols, data, format: a.format })
}

pub fn sub_fixed(a: &FixedMatrix, b: &FixedMatrix, arith: &mut FixedArith) -> Result<FixedMatrix, MatrixError> {
    a.same_shape(b, "sub_fixed")?;
    a.check_format(arith)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| arith.sub_rep(x, y)).collect();
    Ok(FixedMatrix { rows: a.rows, cols: a.cols, data, format: a.format })
}

pub fn scale_fixed(m: &FixedMatrix, s: FixedWord, arith: &mut FixedArith) -> Result<FixedMatrix, MatrixError> {
    m.check_format(arith)?;
    if s.format() != m.format {
        return Err(MatrixError::FormatMismatch);
    }
    let data = m.data.iter().map(|&x| arith.mul_rep(x, s.rep())).collect();
    Ok(FixedMatrix { rows: m.rows, cols: m.cols, data, format: m.format })
}

/// Cellwise [`convert`] in row-major order.
pub fn quantize_matrix(
    m: &RealMatrix,
    format: FixedFormat,
    mode: RoundingMode,
    mut stream: Option<&mut StochasticStream>,
) -> Result<FixedMatrix, MatrixError> {
    let mut data = Vec::with_capacity(m.data.len());
    for &x in &m.data {
        data.push(convert(x, format, mode, stream.as_deref_mut())?.rep());
    }
    Ok(FixedMatrix { rows: m.rows, cols: m.cols, data, format })
}

/// Quantize through an arithmetic context so saturations are counted.
pub fn quantize_with(m: &RealMatrix, arith: &mut FixedArith) -> Result<FixedMatrix, MatrixError> {
    let mut data = Vec::with_capacity(m.data.len());
    for &x in &m.data {
        data.push(arith.convert_rep(x)?);
    }
    Ok(FixedMatrix { rows: m.rows, cols: m.cols, data, format: arith.format() })
}

pub fn dequantize_matrix(f: &FixedMatrix) -> RealMatrix {
    let eps = f.format.epsilon();
    RealMatrix { rows: f.rows, cols: f.cols, data: f.data.iter().map(|&r| r as f64 * eps).collect() }
}
