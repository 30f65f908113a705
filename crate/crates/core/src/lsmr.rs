//! Truncated LSMR for `min ||Ax - b||`, in `f64` and in fixed point.
//!
//! The solver runs a fixed number of Golub-Kahan steps (by default
//! `min(m, n)`) with no stopping rule. The recurrences are written once,
//! generically over [`LsmrArith`], so the real and fixed-point solvers share
//! the exact same sequence of operations.
//!
//! [`lsmr_solve_multi`] solves many right-hand sides by splitting a column
//! range over a pool of scoped worker threads. Columns never interact, so the
//! result does not depend on the partition.

use std::fmt::Debug;
use std::thread;

use thiserror::Error;

use crate::fixedpoint::{stream_key, FixedArith, FixedError, FixedFormat, FixedWord, RoundingMode};
use crate::matrix::{dequantize_matrix, mac_cell, quantize_with, sum_of_squares, FixedMatrix, MatrixError, RealMatrix};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LsmrError {
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error("invalid LSMR job: {0}")]
    InvalidJob(String),
}

/// Scalar and matrix-vector operations the recurrences are written against.
pub trait LsmrArith {
    type Scalar: Copy + PartialEq + Debug + Send;
    type Matrix: Sync;

    fn zero(&self) -> Self::Scalar;
    fn one(&self) -> Self::Scalar;
    fn shape(a: &Self::Matrix) -> (usize, usize);
    /// `out = a * v`
    fn mat_vec(&mut self, a: &Self::Matrix, v: &[Self::Scalar], out: &mut [Self::Scalar]);
    fn norm(&mut self, v: &[Self::Scalar]) -> Result<Self::Scalar, LsmrError>;
    fn add(&mut self, a: Self::Scalar, b: Self::Scalar) -> Self::Scalar;
    fn sub(&mut self, a: Self::Scalar, b: Self::Scalar) -> Self::Scalar;
    fn mul(&mut self, a: Self::Scalar, b: Self::Scalar) -> Self::Scalar;
    fn div(&mut self, a: Self::Scalar, b: Self::Scalar) -> Result<Self::Scalar, LsmrError>;
    fn neg(&mut self, a: Self::Scalar) -> Self::Scalar;
    fn sqrt(&mut self, a: Self::Scalar) -> Result<Self::Scalar, LsmrError>;
    /// `|b| > |a|`
    fn abs_greater(&mut self, b: Self::Scalar, a: Self::Scalar) -> bool;
    /// +1 for non-negative, -1 for negative.
    fn sign(&self, a: Self::Scalar) -> Self::Scalar;
}

/// `f64` arithmetic.
#[derive(Debug, Clone, Copy, Default)]
pub struct RealArith;

impl LsmrArith for RealArith {
    type Scalar = f64;
    type Matrix = RealMatrix;

    fn zero(&self) -> f64 {
        0.0
    }

    fn one(&self) -> f64 {
        1.0
    }

    fn shape(a: &RealMatrix) -> (usize, usize) {
        a.shape()
    }

    fn mat_vec(&mut self, a: &RealMatrix, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = a.row(r).iter().zip(v).map(|(x, y)| x * y).sum();
        }
    }

    fn norm(&mut self, v: &[f64]) -> Result<f64, LsmrError> {
        Ok(v.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }

    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }

    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }

    fn div(&mut self, a: f64, b: f64) -> Result<f64, LsmrError> {
        Ok(a / b)
    }

    fn neg(&mut self, a: f64) -> f64 {
        -a
    }

    fn sqrt(&mut self, a: f64) -> Result<f64, LsmrError> {
        Ok(a.sqrt())
    }

    fn abs_greater(&mut self, b: f64, a: f64) -> bool {
        b.abs() > a.abs()
    }

    fn sign(&self, a: f64) -> f64 {
        if a < 0.0 {
            -1.0
        } else {
            1.0
        }
    }
}

/// Fixed-point arithmetic over representations, backed by a [`FixedArith`].
#[derive(Debug)]
pub struct FixedLsmrArith<'a> {
    pub arith: &'a mut FixedArith,
}

impl LsmrArith for FixedLsmrArith<'_> {
    type Scalar = i32;
    type Matrix = FixedMatrix;

    fn zero(&self) -> i32 {
        0
    }

    fn one(&self) -> i32 {
        self.arith.format().one_rep()
    }

    fn shape(a: &FixedMatrix) -> (usize, usize) {
        a.shape()
    }

    fn mat_vec(&mut self, a: &FixedMatrix, v: &[i32], out: &mut [i32]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = mac_cell(self.arith, a.row_reps(r), v.iter().copied());
        }
    }

    fn norm(&mut self, v: &[i32]) -> Result<i32, LsmrError> {
        let sum = sum_of_squares(self.arith, v);
        Ok(self.arith.sqrt_wide(sum)?.rep())
    }

    fn add(&mut self, a: i32, b: i32) -> i32 {
        self.arith.add_rep(a, b)
    }

    fn sub(&mut self, a: i32, b: i32) -> i32 {
        self.arith.sub_rep(a, b)
    }

    fn mul(&mut self, a: i32, b: i32) -> i32 {
        self.arith.mul_rep(a, b)
    }

    fn div(&mut self, a: i32, b: i32) -> Result<i32, LsmrError> {
        Ok(self.arith.div_rep(a, b)?)
    }

    fn neg(&mut self, a: i32) -> i32 {
        self.arith.neg_rep(a)
    }

    fn sqrt(&mut self, a: i32) -> Result<i32, LsmrError> {
        Ok(self.arith.sqrt_rep(a)?)
    }

    fn abs_greater(&mut self, b: i32, a: i32) -> bool {
        (b as i64).abs() > (a as i64).abs()
    }

    fn sign(&self, a: i32) -> i32 {
        if a < 0 {
            self.arith.format().minus_one_rep()
        } else {
            self.arith.format().one_rep()
        }
    }
}

/// Plane rotation `(c, s, r)` produced by [`sym`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GivensTriple<S> {
    pub c: S,
    pub s: S,
    pub r: S,
}

/// Rotation of `(a, b)`, dividing by the larger magnitude. `(0, 0)` maps to
/// the identity rotation with `r = 0`.
pub fn sym_with<F: LsmrArith>(ar: &mut F, a: F::Scalar, b: F::Scalar) -> Result<GivensTriple<F::Scalar>, LsmrError> {
    let zero = ar.zero();
    if a == zero && b == zero {
        return Ok(GivensTriple { c: ar.one(), s: zero, r: zero });
    }
    let one = ar.one();
    if ar.abs_greater(b, a) {
        let tau = ar.div(a, b)?;
        let tau_sq = ar.mul(tau, tau);
        let sum = ar.add(one, tau_sq);
        let root = ar.sqrt(sum)?;
        let sign = ar.sign(b);
        let s = ar.div(sign, root)?;
        let c = ar.mul(s, tau);
        let r = ar.div(b, s)?;
        Ok(GivensTriple { c, s, r })
    } else {
        let tau = ar.div(b, a)?;
        let tau_sq = ar.mul(tau, tau);
        let sum = ar.add(one, tau_sq);
        let root = ar.sqrt(sum)?;
        let sign = ar.sign(a);
        let c = ar.div(sign, root)?;
        let s = ar.mul(c, tau);
        let r = ar.div(a, c)?;
        Ok(GivensTriple { c, s, r })
    }
}

pub fn sym(a: f64, b: f64) -> GivensTriple<f64> {
    sym_with(&mut RealArith, a, b).expect("real arithmetic is infallible")
}

pub fn sym_fixed(a: FixedWord, b: FixedWord, arith: &mut FixedArith) -> Result<GivensTriple<FixedWord>, LsmrError> {
    if a.format() != arith.format() || b.format() != arith.format() {
        return Err(FixedError::FormatMismatch.into());
    }
    let t = sym_with(&mut FixedLsmrArith { arith: &mut *arith }, a.rep(), b.rep())?;
    Ok(GivensTriple { c: arith.word(t.c), s: arith.word(t.s), r: arith.word(t.r) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Ran the full iteration budget.
    Completed,
    /// `b = 0`, so `x = 0`.
    ZeroRhs,
    /// `alpha` or `beta` (or a rotation denominator) vanished; the Krylov
    /// space is exhausted.
    Breakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsmrSolution<V> {
    pub x: V,
    pub iterations: usize,
    pub stop: StopReason,
}

/// Work vectors of one solve, sized by `(m, n)` and reused across columns.
#[derive(Debug, Clone)]
pub struct LsmrScratch<S> {
    u: Vec<S>,
    v: Vec<S>,
    h: Vec<S>,
    hbar: Vec<S>,
    x: Vec<S>,
    work_m: Vec<S>,
    work_n: Vec<S>,
}

impl<S: Copy> LsmrScratch<S> {
    pub fn new(m: usize, n: usize, zero: S) -> Self {
        LsmrScratch {
            u: vec![zero; m],
            v: vec![zero; n],
            h: vec![zero; n],
            hbar: vec![zero; n],
            x: vec![zero; n],
            work_m: vec![zero; m],
            work_n: vec![zero; n],
        }
    }

    pub fn solution(&self) -> &[S] {
        &self.x
    }

    fn fits(&self, m: usize, n: usize) -> bool {
        self.u.len() == m && self.x.len() == n
    }
}

fn scale_into<F: LsmrArith>(ar: &mut F, src: &[F::Scalar], by: F::Scalar, dst: &mut [F::Scalar]) -> Result<(), LsmrError> {
    if by == ar.zero() {
        dst.fill(ar.zero());
        return Ok(());
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = ar.div(s, by)?;
    }
    Ok(())
}

/// `y = coef * y + add`
fn axpy_self<F: LsmrArith>(ar: &mut F, coef: F::Scalar, y: &mut [F::Scalar], add: &[F::Scalar]) {
    for (yi, &ai) in y.iter_mut().zip(add) {
        let t = ar.mul(coef, *yi);
        *yi = ar.add(t, ai);
    }
}

/// One truncated-LSMR solve. `at` must be the transpose of `a`; the answer is
/// left in `scratch.solution()`.
pub fn solve_into<F: LsmrArith>(
    ar: &mut F,
    a: &F::Matrix,
    at: &F::Matrix,
    b: &[F::Scalar],
    iters: usize,
    scratch: &mut LsmrScratch<F::Scalar>,
) -> Result<(usize, StopReason), LsmrError> {
    let (m, n) = F::shape(a);
    if F::shape(at) != (n, m) {
        return Err(MatrixError::DimensionMismatch { op: "lsmr transpose", left: (m, n), right: F::shape(at) }.into());
    }
    if b.len() != m {
        return Err(MatrixError::DimensionMismatch { op: "lsmr rhs", left: (m, n), right: (b.len(), 1) }.into());
    }
    let zero = ar.zero();
    let one = ar.one();
    if !scratch.fits(m, n) {
        *scratch = LsmrScratch::new(m, n, zero);
    }
    let LsmrScratch { u, v, h, hbar, x, work_m, work_n } = scratch;
    x.fill(zero);

    let mut beta = ar.norm(b)?;
    if beta == zero {
        return Ok((0, StopReason::ZeroRhs));
    }
    scale_into(ar, b, beta, u)?;
    ar.mat_vec(at, u, work_n);
    let mut alpha = ar.norm(work_n)?;
    if alpha == zero {
        return Ok((0, StopReason::Breakdown));
    }
    scale_into(ar, work_n, alpha, v)?;

    let mut zetabar = ar.mul(alpha, beta);
    let mut alphabar = alpha;
    let mut rho = one;
    let mut rhobar = one;
    let mut cbar = one;
    let mut sbar = zero;
    h.copy_from_slice(v);
    hbar.fill(zero);

    for k in 0..iters {
        // Bidiagonalization step.
        ar.mat_vec(a, v, work_m);
        for (w, &ui) in work_m.iter_mut().zip(u.iter()) {
            let t = ar.mul(alpha, ui);
            *w = ar.sub(*w, t);
        }
        beta = ar.norm(work_m)?;
        scale_into(ar, work_m, beta, u)?;

        ar.mat_vec(at, u, work_n);
        for (w, &vi) in work_n.iter_mut().zip(v.iter()) {
            let t = ar.mul(beta, vi);
            *w = ar.sub(*w, t);
        }
        let alpha_next = ar.norm(work_n)?;
        let exhausted = beta == zero || alpha_next == zero;

        // Rotations.
        let rot = sym_with(ar, alphabar, beta)?;
        let (c, s, rho_next) = (rot.c, rot.s, rot.r);
        alphabar = ar.mul(c, alpha_next);
        // Second rotation acts on cbar * (this step's rho).
        let hat = ar.mul(cbar, rho_next);
        let theta = ar.mul(s, alpha_next);
        let rot_bar = sym_with(ar, hat, theta)?;
        let (cbar_next, sbar_next, rhobar_next) = (rot_bar.c, rot_bar.s, rot_bar.r);
        let zeta = ar.mul(cbar_next, zetabar);
        let t = ar.neg(sbar_next);
        zetabar = ar.mul(t, zetabar);

        let den_prev = ar.mul(rho, rhobar);
        let den_next = ar.mul(rho_next, rhobar_next);
        if den_prev == zero || den_next == zero || rho_next == zero {
            return Ok((k, StopReason::Breakdown));
        }

        // hbar <- -(sbar * rho' * rho') / (rho * rhobar) * hbar + h
        let num = ar.mul(sbar, rho_next);
        let num = ar.mul(num, rho_next);
        let q = ar.div(num, den_prev)?;
        let coef = ar.neg(q);
        axpy_self(ar, coef, hbar, h);

        // x <- zeta / (rho' * rhobar') * hbar + x
        let step = ar.div(zeta, den_next)?;
        for (xi, &hb) in x.iter_mut().zip(hbar.iter()) {
            let t = ar.mul(step, hb);
            *xi = ar.add(t, *xi);
        }

        // h <- -(theta / rho') * h + v'
        scale_into(ar, work_n, alpha_next, v)?;
        let q = ar.div(theta, rho_next)?;
        let coef = ar.neg(q);
        axpy_self(ar, coef, h, v);

        alpha = alpha_next;
        rho = rho_next;
        rhobar = rhobar_next;
        cbar = cbar_next;
        sbar = sbar_next;

        if exhausted {
            return Ok((k + 1, StopReason::Breakdown));
        }
    }
    Ok((iters, StopReason::Completed))
}

/// Real-arithmetic solve of `min ||Ax - b||`; `iters` defaults to `min(m, n)`.
pub fn lsmr_solve(a: &RealMatrix, b: &[f64], iters: Option<usize>) -> Result<LsmrSolution<Vec<f64>>, LsmrError> {
    let (m, n) = a.shape();
    let at = a.transpose();
    let mut scratch = LsmrScratch::new(m, n, 0.0);
    let iters = iters.unwrap_or(m.min(n));
    let (iterations, stop) = solve_into(&mut RealArith, a, &at, b, iters, &mut scratch)?;
    Ok(LsmrSolution { x: scratch.x, iterations, stop })
}

/// Fixed-point solve; `b` is an `m x 1` column and the result is `n x 1`.
pub fn lsmr_solve_fixed(
    a: &FixedMatrix,
    b: &FixedMatrix,
    iters: Option<usize>,
    arith: &mut FixedArith,
) -> Result<LsmrSolution<FixedMatrix>, LsmrError> {
    let (m, n) = a.shape();
    if b.cols() != 1 {
        return Err(MatrixError::DimensionMismatch { op: "lsmr rhs", left: (m, n), right: b.shape() }.into());
    }
    if a.format() != arith.format() || b.format() != arith.format() {
        return Err(MatrixError::FormatMismatch.into());
    }
    let at = a.transpose();
    let mut scratch = LsmrScratch::new(m, n, 0i32);
    let iters = iters.unwrap_or(m.min(n));
    let mut ar = FixedLsmrArith { arith };
    let (iterations, stop) = solve_into(&mut ar, a, &at, b.reps(), iters, &mut scratch)?;
    let x = FixedMatrix::from_reps_unchecked(n, 1, scratch.x, a.format());
    Ok(LsmrSolution { x, iterations, stop })
}

/// Arithmetic used by [`lsmr_solve_multi`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveArithmetic {
    Real,
    /// Inputs are quantized with `mode` and the solve runs in `format`.
    /// Stochastic streams are derived from `(seed, key, column)`.
    Fixed {
        format: FixedFormat,
        mode: RoundingMode,
        seed: u64,
        key: u64,
    },
}

/// Least-squares solve `A X ~ B` restricted to a column range of `B`.
#[derive(Debug, Clone, Copy)]
pub struct LsmrJob<'a> {
    pub a: &'a RealMatrix,
    pub b: &'a RealMatrix,
    pub col_start: usize,
    pub col_count: usize,
    pub iter_count: usize,
}

impl<'a> LsmrJob<'a> {
    /// All columns, `min(m, n)` iterations.
    pub fn new(a: &'a RealMatrix, b: &'a RealMatrix) -> Self {
        LsmrJob { a, b, col_start: 0, col_count: b.cols(), iter_count: a.rows().min(a.cols()) }
    }

    pub fn with_columns(mut self, col_start: usize, col_count: usize) -> Self {
        self.col_start = col_start;
        self.col_count = col_count;
        self
    }

    pub fn with_iterations(mut self, iter_count: usize) -> Self {
        self.iter_count = iter_count;
        self
    }

    pub fn validate(&self) -> Result<(), LsmrError> {
        if self.a.rows() != self.b.rows() {
            return Err(MatrixError::DimensionMismatch { op: "lsmr job", left: self.a.shape(), right: self.b.shape() }.into());
        }
        if self.col_start + self.col_count > self.b.cols() {
            return Err(LsmrError::InvalidJob(format!(
                "column range {}..{} exceeds {} columns",
                self.col_start,
                self.col_start + self.col_count,
                self.b.cols()
            )));
        }
        if self.iter_count == 0 {
            return Err(LsmrError::InvalidJob("iteration budget must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSolution {
    /// `n x col_count`; column `j` solves for `B[:, col_start + j]`.
    pub x: RealMatrix,
    pub saturations: u64,
}

const QUANT_A: u64 = 0;
const QUANT_B: u64 = 1;
const SOLVE: u64 = 2;

struct Prepared<M> {
    a: M,
    at: M,
}

fn split_ranges(start: usize, count: usize, workers: usize) -> Vec<(usize, usize)> {
    let parts = workers.max(1).min(count.max(1));
    let base = count / parts;
    let extra = count % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = start;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push((at, len));
        at += len;
    }
    out
}

/// Solve every column of the job's range; ranges are handed to up to
/// `workers` threads, each owning its scratch and arithmetic context.
pub fn lsmr_solve_multi(job: &LsmrJob<'_>, arithmetic: SolveArithmetic, workers: usize) -> Result<MultiSolution, LsmrError> {
    job.validate()?;
    let (m, n) = job.a.shape();
    let ranges = split_ranges(job.col_start, job.col_count, workers);

    type Chunk = Result<(Vec<f64>, u64), LsmrError>;
    let run_real = |prep: &Prepared<RealMatrix>, (start, len): (usize, usize)| -> Chunk {
        let mut scratch = LsmrScratch::new(m, n, 0.0);
        let mut out = Vec::with_capacity(len * n);
        for col in start..start + len {
            let rhs = job.b.column(col);
            solve_into(&mut RealArith, &prep.a, &prep.at, &rhs, job.iter_count, &mut scratch)?;
            out.extend_from_slice(scratch.solution());
        }
        Ok((out, 0))
    };

    let chunks: Vec<Chunk> = match arithmetic {
        SolveArithmetic::Real => {
            let prep = Prepared { a: job.a.clone(), at: job.a.transpose() };
            run_chunks(&ranges, |r| run_real(&prep, r))
        }
        SolveArithmetic::Fixed { format, mode, seed, key } => {
            let mut qa_arith = FixedArith::with_stream(format, mode, seed, stream_key(&[key, QUANT_A]));
            let qa = quantize_with(job.a, &mut qa_arith)?;
            let prep = Prepared { at: qa.transpose(), a: qa };
            let base_sat = qa_arith.saturations();
            let run_fixed = |(start, len): (usize, usize)| -> Chunk {
                let mut scratch = LsmrScratch::new(m, n, 0i32);
                let mut out = Vec::with_capacity(len * n);
                let mut sats = 0;
                let eps = format.epsilon();
                for col in start..start + len {
                    let col_key = col as u64;
                    let mut qb_arith = FixedArith::with_stream(format, mode, seed, stream_key(&[key, QUANT_B, col_key]));
                    let rhs: Vec<i32> =
                        job.b.column(col).into_iter().map(|x| qb_arith.convert_rep(x)).collect::<Result<_, _>>()?;
                    let mut arith = FixedArith::with_stream(format, mode, seed, stream_key(&[key, SOLVE, col_key]));
                    let mut ar = FixedLsmrArith { arith: &mut arith };
                    solve_into(&mut ar, &prep.a, &prep.at, &rhs, job.iter_count, &mut scratch)?;
                    out.extend(scratch.solution().iter().map(|&r| r as f64 * eps));
                    sats += qb_arith.saturations() + arith.saturations();
                }
                Ok((out, sats))
            };
            let mut chunks = run_chunks(&ranges, run_fixed);
            if let Some(Ok((_, s))) = chunks.first_mut() {
                *s += base_sat;
            }
            chunks
        }
    };

    let mut x = RealMatrix::zeros(n, job.col_count);
    let mut saturations = 0;
    for (&(start, len), chunk) in ranges.iter().zip(chunks) {
        let (values, sats) = chunk?;
        saturations += sats;
        for j in 0..len {
            x.set_column(start - job.col_start + j, &values[j * n..(j + 1) * n]);
        }
    }
    Ok(MultiSolution { x, saturations })
}

fn run_chunks<T: Send>(ranges: &[(usize, usize)], work: impl Fn((usize, usize)) -> T + Sync) -> Vec<T> {
    if ranges.len() <= 1 {
        return ranges.iter().map(|&r| work(r)).collect();
    }
    thread::scope(|scope| {
        let work = &work;
        let handles: Vec<_> = ranges[1..].iter().map(|&r| scope.spawn(move || work(r))).collect();
        let mut out = vec![work(ranges[0])];
        out.extend(handles.into_iter().map(|h| h.join().expect("LSMR worker panicked")));
        out
    })
}

/// Dequantized copy of a fixed solution column.
pub fn fixed_solution_values(sol: &LsmrSolution<FixedMatrix>) -> Vec<f64> {
    dequantize_matrix(&sol.x).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::convert;
    use crate::matrix::quantize_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const Q32: FixedFormat = FixedFormat::Q32_18;

    /// Normal equations `A^T A x = A^T b` solved by Gaussian elimination
    /// with partial pivoting.
    fn dense_least_squares(a: &RealMatrix, b: &[f64]) -> Vec<f64> {
        let n = a.cols();
        let ata = a.transpose().matmul(a).unwrap();
        let atb: Vec<f64> = (0..n).map(|j| (0..a.rows()).map(|i| a.get(i, j) * b[i]).sum()).collect();
        let mut aug: Vec<Vec<f64>> = (0..n).map(|i| {
            let mut row = ata.row(i).to_vec();
            row.push(atb[i]);
            row
        }).collect();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs())).unwrap();
            aug.swap(col, piv);
            for r in col + 1..n {
                let f = aug[r][col] / aug[col][col];
                for c in col..=n {
                    aug[r][c] -= f * aug[col][c];
                }
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|c| aug[r][c] * x[c]).sum();
            x[r] = (aug[r][n] - s) / aug[r][r];
        }
        x
    }

    #[test]
    fn sym_examples() {
        let t = sym(3.0, 4.0);
        assert!((t.c - 0.6).abs() < 1e-15 && (t.s - 0.8).abs() < 1e-15 && (t.r - 5.0).abs() < 1e-14);
        assert_eq!(sym(1.0, 0.0), GivensTriple { c: 1.0, s: 0.0, r: 1.0 });
        assert_eq!(sym(0.0, 1.0), GivensTriple { c: 0.0, s: 1.0, r: 1.0 });
        assert_eq!(sym(0.0, 0.0), GivensTriple { c: 1.0, s: 0.0, r: 0.0 });
        let t = sym(-2.0, 1.0);
        assert!(t.c < 0.0 && (t.r - 5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn sym_unit_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a: f64 = rand::Rng::gen_range(&mut rng, -5.0..5.0);
            let b: f64 = rand::Rng::gen_range(&mut rng, -5.0..5.0);
            let t = sym(a, b);
            assert!((t.c * t.c + t.s * t.s - 1.0).abs() < 1e-12);
            assert!((t.r.abs() - a.hypot(b)).abs() < 1e-12);
            if b.abs() > a.abs() {
                assert!((t.r * t.s - b).abs() < 1e-12);
            } else {
                assert!((t.r * t.c - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sym_fixed_pythagorean() {
        let mut ar = FixedArith::new(Q32, RoundingMode::Nearest).unwrap();
        let w = |x| convert(x, Q32, RoundingMode::Nearest, None).unwrap();
        let t = sym_fixed(w(3.0), w(4.0), &mut ar).unwrap();
        let eps = Q32.epsilon();
        assert!((t.c.value() - 0.6).abs() <= 4.0 * eps);
        assert!((t.s.value() - 0.8).abs() <= 4.0 * eps);
        assert!((t.r.value() - 5.0).abs() <= 16.0 * eps);
        assert_eq!(sym_fixed(w(0.0), w(0.0), &mut ar).unwrap().c, FixedWord::one(Q32));
    }

    #[test]
    fn identity_system() {
        let b = vec![1.5, -2.0, 0.25, 4.0, -0.75];
        let sol = lsmr_solve(&RealMatrix::identity(5), &b, None).unwrap();
        for (x, y) in sol.x.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
        assert_eq!(sol.stop, StopReason::Breakdown);
    }

    #[test]
    fn zero_rhs() {
        let a = RealMatrix::random_uniform(6, 3, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let sol = lsmr_solve(&a, &[0.0; 6], None).unwrap();
        assert_eq!(sol.x, vec![0.0; 3]);
        assert_eq!(sol.stop, StopReason::ZeroRhs);

        let fa = quantize_matrix(&a, Q32, RoundingMode::Nearest, None).unwrap();
        let mut ar = FixedArith::new(Q32, RoundingMode::Nearest).unwrap();
        let sol = lsmr_solve_fixed(&fa, &FixedMatrix::zeros(6, 1, Q32), None, &mut ar).unwrap();
        assert!(sol.x.reps().iter().all(|&r| r == 0));
    }

    #[test]
    fn rhs_length_checked() {
        let a = RealMatrix::identity(3);
        assert!(lsmr_solve(&a, &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn random_tall_system_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = RealMatrix::random_uniform(20, 8, -1.0, 1.0, &mut rng);
            let b: Vec<f64> = (0..20).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let sol = lsmr_solve(&a, &b, None).unwrap();
            let ax = a.matmul(&RealMatrix::column_vector(sol.x.clone())).unwrap();
            let r: Vec<f64> = ax.as_slice().iter().zip(&b).map(|(p, q)| p - q).collect();
            let atr = a.transpose().matmul(&RealMatrix::column_vector(r)).unwrap();
            let atb = a.transpose().matmul(&RealMatrix::column_vector(b.clone())).unwrap();
            let rel = atr.frobenius_norm() / (a.frobenius_norm() * atb.frobenius_norm());
            assert!(rel <= 1e-6, "relative residual {rel}");
            let oracle = dense_least_squares(&a, &b);
            for (x, y) in sol.x.iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normal_residual_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let a = RealMatrix::random_uniform(15, 7, -1.0, 1.0, &mut rng);
            let b: Vec<f64> = (0..15).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let at = a.transpose();
            let mut last = f64::INFINITY;
            for k in 1..=7 {
                let x = lsmr_solve(&a, &b, Some(k)).unwrap().x;
                let ax = a.matmul(&RealMatrix::column_vector(x)).unwrap();
                let r: Vec<f64> = ax.as_slice().iter().zip(&b).map(|(p, q)| p - q).collect();
                let g = at.matmul(&RealMatrix::column_vector(r)).unwrap().frobenius_norm();
                assert!(g <= last * (1.0 + 1e-9) + 1e-12, "k={k}: {g} > {last}");
                last = g;
            }
        }
    }

    #[test]
    fn fixed_identity_system() {
        let b_real = RealMatrix::column_vector(vec![1.5, -2.0, 0.3, 4.0]);
        let b = quantize_matrix(&b_real, Q32, RoundingMode::Nearest, None).unwrap();
        let mut ar = FixedArith::new(Q32, RoundingMode::Nearest).unwrap();
        let sol = lsmr_solve_fixed(&FixedMatrix::identity(4, Q32), &b, None, &mut ar).unwrap();
        for (x, y) in fixed_solution_values(&sol).iter().zip(dequantize_matrix(&b).as_slice()) {
            assert!((x - y).abs() <= 2.0 * Q32.epsilon(), "{x} vs {y}");
        }
    }

    #[test]
    fn fixed_tracks_real_path() {
        // The fixed path drifts from the real one through per-operation
        // rounding; 1e3 ulps on a well-conditioned 16x6 system.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = Q32.epsilon();
        for _ in 0..20 {
            let mut a = RealMatrix::random_uniform(16, 6, -1.0, 1.0, &mut rng);
            for i in 0..6 {
                a.set(i, i, a.get(i, i) + 3.0);
            }
            let b: Vec<f64> = (0..16).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let fa = quantize_matrix(&a, Q32, RoundingMode::Nearest, None).unwrap();
            let fb = quantize_matrix(&RealMatrix::column_vector(b), Q32, RoundingMode::Nearest, None).unwrap();
            let real = lsmr_solve(&dequantize_matrix(&fa), dequantize_matrix(&fb).as_slice(), None).unwrap();
            let mut ar = FixedArith::new(Q32, RoundingMode::Nearest).unwrap();
            let fixed = lsmr_solve_fixed(&fa, &fb, None, &mut ar).unwrap();
            for (x, y) in fixed_solution_values(&fixed).iter().zip(&real.x) {
                assert!((x - y).abs() <= 1e3 * eps, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn split_ranges_cover() {
        assert_eq!(split_ranges(0, 8, 4), vec![(0, 2), (2, 2), (4, 2), (6, 2)]);
        assert_eq!(split_ranges(3, 5, 2), vec![(3, 3), (6, 2)]);
        assert_eq!(split_ranges(0, 2, 4), vec![(0, 1), (1, 1)]);
        assert_eq!(split_ranges(0, 0, 4), vec![(0, 0)]);
    }

    #[test]
    fn multi_single_column_is_plain_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = RealMatrix::random_uniform(10, 4, -1.0, 1.0, &mut rng);
        let b = RealMatrix::random_uniform(10, 1, -1.0, 1.0, &mut rng);
        let multi = lsmr_solve_multi(&LsmrJob::new(&a, &b), SolveArithmetic::Real, 4).unwrap();
        assert_eq!(multi.x.as_slice(), lsmr_solve(&a, b.as_slice(), None).unwrap().x.as_slice());
    }

    #[test]
    fn multi_partitions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = RealMatrix::random_uniform(12, 5, -1.0, 1.0, &mut rng);
        let b = RealMatrix::random_uniform(12, 8, -1.0, 1.0, &mut rng);
        for arith in [
            SolveArithmetic::Real,
            SolveArithmetic::Fixed { format: Q32, mode: RoundingMode::Nearest, seed: 1, key: 2 },
            SolveArithmetic::Fixed { format: Q32, mode: RoundingMode::Stochastic, seed: 1, key: 2 },
        ] {
            let whole = lsmr_solve_multi(&LsmrJob::new(&a, &b), arith, 1).unwrap();
            let left = lsmr_solve_multi(&LsmrJob::new(&a, &b).with_columns(0, 4), arith, 2).unwrap();
            let right = lsmr_solve_multi(&LsmrJob::new(&a, &b).with_columns(4, 4), arith, 3).unwrap();
            assert_eq!(whole.x.columns(0, 4), left.x);
            assert_eq!(whole.x.columns(4, 4), right.x);
            let threaded = lsmr_solve_multi(&LsmrJob::new(&a, &b), arith, 4).unwrap();
            assert_eq!(whole, threaded);
        }
    }

    #[test]
    fn multi_zero_column() {
        let a = RealMatrix::identity(3);
        let b = RealMatrix::new(3, 2, vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        let sol = lsmr_solve_multi(&LsmrJob::new(&a, &b), SolveArithmetic::Real, 2).unwrap();
        assert_eq!(sol.x.column(1), vec![0.0; 3]);
        assert!((sol.x.get(2, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn job_validation() {
        let a = RealMatrix::identity(3);
        let b = RealMatrix::zeros(3, 2);
        assert!(LsmrJob::new(&a, &b).with_columns(1, 2).validate().is_err());
        assert!(LsmrJob::new(&a, &b).with_iterations(0).validate().is_err());
        let bad = RealMatrix::zeros(4, 2);
        assert!(LsmrJob::new(&a, &bad).validate().is_err());
    }
}
