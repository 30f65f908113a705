//! ADMM training of fully connected ReLU networks.
//!
//! Layer `l` (1-based in the docs, 0-based in code) carries a weight matrix
//! `W_l`, a pre-activation `z_l = W_l x_{l-1}` and, for hidden layers, an
//! activation `x_l = relu(z_l)`. Every sweep alternates closed-form or
//! least-squares minimizations over these blocks plus a dual ascent step on
//! the output constraint. The least-squares blocks go through
//! [`lsmr_solve_multi`], so the whole trainer can run with a fixed-point
//! solver while the host state stays in `f64`.

use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixedpoint::{stream_key, FixedFormat, RoundingMode};
use crate::lsmr::{lsmr_solve_multi, LsmrError, LsmrJob, SolveArithmetic};
use crate::matrix::{MatrixError, RealMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdmmError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Lsmr(#[from] LsmrError),
    #[error("non-finite values after {procedure} (layer {layer}, iteration {iteration})")]
    NonFinite { procedure: &'static str, layer: usize, iteration: usize },
}

/// Arithmetic of the least-squares solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arithmetic {
    Real,
    Fixed16,
    Fixed32,
}

impl Arithmetic {
    pub fn format(self) -> Option<FixedFormat> {
        match self {
            Arithmetic::Real => None,
            Arithmetic::Fixed16 => Some(FixedFormat::Q16_10),
            Arithmetic::Fixed32 => Some(FixedFormat::Q32_18),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arithmetic::Real => "real",
            Arithmetic::Fixed16 => "fixed16",
            Arithmetic::Fixed32 => "fixed32",
        }
    }
}

impl std::fmt::Display for Arithmetic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arithmetic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "real" => Ok(Arithmetic::Real),
            "fixed16" => Ok(Arithmetic::Fixed16),
            "fixed32" => Ok(Arithmetic::Fixed32),
            other => Err(format!("unknown arithmetic `{other}` (expected real, fixed16 or fixed32)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `[D, HS_1, ..., HS_{L-1}, OS]`
    pub layer_dims: Vec<usize>,
    /// One per layer, `beta[L-1]` also drives the multiplier update.
    pub beta: Vec<f64>,
    /// One per hidden layer.
    pub gamma: Vec<f64>,
    pub iterations: usize,
    pub arithmetic: Arithmetic,
    pub rounding: RoundingMode,
    pub seed: u64,
    pub workers: usize,
    /// LSMR iteration budget; `None` means `min(m, n)` per solve.
    pub lsmr_iters: Option<usize>,
}

impl NetworkConfig {
    /// Defaults: `beta = gamma = 1`, 100 sweeps, real arithmetic, nearest
    /// rounding, 4 workers.
    pub fn new(layer_dims: Vec<usize>) -> Self {
        let layers = layer_dims.len().saturating_sub(1);
        NetworkConfig {
            beta: vec![1.0; layers],
            gamma: vec![1.0; layers.saturating_sub(1)],
            layer_dims,
            iterations: 100,
            arithmetic: Arithmetic::Real,
            rounding: RoundingMode::Nearest,
            seed: 0,
            workers: 4,
            lsmr_iters: None,
        }
    }

    pub fn with_penalties(mut self, beta: f64, gamma: f64) -> Self {
        self.beta.fill(beta);
        self.gamma.fill(gamma);
        self
    }

    /// Number of weight matrices `L`.
    pub fn layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), AdmmError> {
        let l = self.layers();
        if l < 2 {
            return Err(AdmmError::Config(format!("need at least one hidden layer, got dims {:?}", self.layer_dims)));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(AdmmError::Config("layer dimensions must be positive".into()));
        }
        if self.beta.len() != l || self.gamma.len() != l - 1 {
            return Err(AdmmError::Config(format!(
                "expected {l} beta and {} gamma values, got {} and {}",
                l - 1,
                self.beta.len(),
                self.gamma.len()
            )));
        }
        if !self.beta.iter().chain(&self.gamma).all(|&p| p.is_finite() && p > 0.0) {
            return Err(AdmmError::Config("penalties must be positive and finite".into()));
        }
        if self.lsmr_iters == Some(0) {
            return Err(AdmmError::Config("LSMR iteration budget must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub weights: Vec<RealMatrix>,
    pub z: Vec<RealMatrix>,
    /// Hidden activations `x_1 .. x_{L-1}`.
    pub x: Vec<RealMatrix>,
    pub lambda: RealMatrix,
    pub x0: RealMatrix,
    pub y: RealMatrix,
}

impl NetworkState {
    /// Input of layer `l` (0-based).
    pub fn input(&self, l: usize) -> &RealMatrix {
        if l == 0 {
            &self.x0
        } else {
            &self.x[l - 1]
        }
    }
}

/// Per-procedure time of one sweep. Weight and activation updates may
/// overlap, so the parts can exceed the sweep's wall time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTimings {
    pub weight: Duration,
    pub activation: Duration,
    pub output: Duration,
    pub lagrangian: Duration,
}

impl IterationTimings {
    pub fn total(&self) -> Duration {
        self.weight + self.activation + self.output + self.lagrangian
    }

    fn accumulate(&mut self, other: &IterationTimings) {
        self.weight += other.weight;
        self.activation += other.activation;
        self.output += other.output;
        self.lagrangian += other.lagrangian;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub timings: Vec<IterationTimings>,
    /// Fixed-point saturation events per sweep; all zero in real mode.
    pub saturations: Vec<u64>,
    pub sweep_wall: Vec<Duration>,
}

impl TrainLog {
    pub fn total_timings(&self) -> IterationTimings {
        let mut t = IterationTimings::default();
        for it in &self.timings {
            t.accumulate(it);
        }
        t
    }

    pub fn total_saturations(&self) -> u64 {
        self.saturations.iter().sum()
    }
}

/// How the least-squares blocks are solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveContext {
    pub arithmetic: Arithmetic,
    pub rounding: RoundingMode,
    pub seed: u64,
    pub workers: usize,
    pub lsmr_iters: Option<usize>,
}

impl SolveContext {
    pub fn real() -> Self {
        SolveContext { arithmetic: Arithmetic::Real, rounding: RoundingMode::Nearest, seed: 0, workers: 1, lsmr_iters: None }
    }

    pub fn from_config(cfg: &NetworkConfig) -> Self {
        SolveContext {
            arithmetic: cfg.arithmetic,
            rounding: cfg.rounding,
            seed: cfg.seed,
            workers: cfg.workers.max(1),
            lsmr_iters: cfg.lsmr_iters,
        }
    }

    fn with_workers(self, workers: usize) -> Self {
        SolveContext { workers: workers.max(1), ..self }
    }

    fn solve(&self, a: &RealMatrix, b: &RealMatrix, key: u64) -> Result<(RealMatrix, u64), AdmmError> {
        let mut job = LsmrJob::new(a, b);
        if let Some(k) = self.lsmr_iters {
            job = job.with_iterations(k);
        }
        let arith = match self.arithmetic.format() {
            None => SolveArithmetic::Real,
            Some(format) => SolveArithmetic::Fixed { format, mode: self.rounding, seed: self.seed, key },
        };
        let sol = lsmr_solve_multi(&job, arith, self.workers)?;
        Ok((sol.x, sol.saturations))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub value: RealMatrix,
    pub saturations: u64,
}

const PROC_WEIGHT: u64 = 1;
const PROC_ACTIVATION: u64 = 2;

fn solve_key(iteration: usize, layer: usize, procedure: u64) -> u64 {
    stream_key(&[iteration as u64, layer as u64, procedure])
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Random weights in `[-0.1, 0.1]` and a forward pass; `lambda = 0`.
pub fn init_network(cfg: &NetworkConfig, x0: &RealMatrix, y: &RealMatrix) -> Result<NetworkState, AdmmError> {
    cfg.validate()?;
    let dims = &cfg.layer_dims;
    let l = cfg.layers();
    if x0.rows() != dims[0] || y.rows() != dims[l] || x0.cols() != y.cols() {
        return Err(AdmmError::Config(format!(
            "data shapes {:?} / {:?} do not fit layer dims {:?}",
            x0.shape(),
            y.shape(),
            dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights: Vec<RealMatrix> =
        (0..l).map(|i| RealMatrix::random_uniform(dims[i + 1], dims[i], -0.1, 0.1, &mut rng)).collect();
    let mut z = Vec::with_capacity(l);
    let mut x = Vec::with_capacity(l - 1);
    let mut a = x0.clone();
    for (i, w) in weights.iter().enumerate() {
        let zi = w.matmul(&a)?;
        if i + 1 < l {
            a = zi.map(relu);
            x.push(a.clone());
        }
        z.push(zi);
    }
    Ok(NetworkState { lambda: RealMatrix::zeros(dims[l], y.cols()), weights, z, x, x0: x0.clone(), y: y.clone() })
}

/// `W_l = argmin ||W x_prev - z_l||`, solved as `x_prev^T W^T = z_l^T` one
/// column of `W^T` at a time.
pub fn weight_update(z_l: &RealMatrix, x_prev: &RealMatrix, ctx: &SolveContext, key: u64) -> Result<Update, AdmmError> {
    if z_l.cols() != x_prev.cols() {
        return Err(MatrixError::DimensionMismatch { op: "weight_update", left: z_l.shape(), right: x_prev.shape() }.into());
    }
    let (wt, saturations) = ctx.solve(&x_prev.transpose(), &z_l.transpose(), key)?;
    Ok(Update { value: wt.transpose(), saturations })
}

/// `x_l = (gamma I + beta W^T W)^{-1} (gamma relu(z_l) + beta W^T z_next)`.
pub fn activation_update(
    w_next: &RealMatrix,
    z_next: &RealMatrix,
    z_l: &RealMatrix,
    beta_next: f64,
    gamma_l: f64,
    ctx: &SolveContext,
    key: u64,
) -> Result<Update, AdmmError> {
    if w_next.cols() != z_l.rows() || w_next.rows() != z_next.rows() || z_next.cols() != z_l.cols() {
        return Err(MatrixError::DimensionMismatch { op: "activation_update", left: w_next.shape(), right: z_l.shape() }.into());
    }
    let wt = w_next.transpose();
    let part1 = RealMatrix::identity(z_l.rows()).scale(gamma_l).add(&wt.matmul(w_next)?.scale(beta_next))?;
    let part2 = z_l.map(|v| gamma_l * relu(v)).add(&wt.matmul(z_next)?.scale(beta_next))?;
    let (value, saturations) = ctx.solve(&part1, &part2, key)?;
    Ok(Update { value, saturations })
}

/// Exact minimizer of `gamma (a - relu(z))^2 + beta (z - b)^2`.
pub fn z_hidden_scalar(a: f64, b: f64, gamma: f64, beta: f64) -> f64 {
    let z_pos = ((gamma * a + beta * b) / (gamma + beta)).max(0.0);
    let obj_pos = gamma * (a - z_pos).powi(2) + beta * (z_pos - b).powi(2);
    let z_neg = b.min(0.0);
    let obj_neg = gamma * a * a + beta * (z_neg - b).powi(2);
    if obj_pos <= obj_neg {
        z_pos
    } else {
        z_neg
    }
}

pub fn z_update_hidden(a: &RealMatrix, b: &RealMatrix, gamma: f64, beta: f64) -> Result<RealMatrix, AdmmError> {
    Ok(a.zip_map(b, "z_update_hidden", |a, b| z_hidden_scalar(a, b, gamma, beta))?)
}

/// Minimizer of `(z - y)^2 + beta (z - b)^2 + lambda (z - b)`.
pub fn z_output_scalar(y: f64, b: f64, lambda: f64, beta: f64) -> f64 {
    (2.0 * y + 2.0 * beta * b - lambda) / (2.0 + 2.0 * beta)
}

pub fn z_update_output(y: &RealMatrix, b: &RealMatrix, lambda: &RealMatrix, beta: f64) -> Result<RealMatrix, AdmmError> {
    if lambda.shape() != y.shape() {
        return Err(MatrixError::DimensionMismatch { op: "z_update_output", left: y.shape(), right: lambda.shape() }.into());
    }
    let mut out = y.zip_map(b, "z_update_output", |y, b| 2.0 * y + 2.0 * beta * b)?;
    for (o, &l) in out.as_mut_slice().iter_mut().zip(lambda.as_slice()) {
        *o = (*o - l) / (2.0 + 2.0 * beta);
    }
    Ok(out)
}

pub fn lagrangian_update(lambda: &RealMatrix, beta: f64, z_l: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix, AdmmError> {
    let gap = z_l.sub(b)?;
    Ok(lambda.zip_map(&gap, "lagrangian_update", |l, g| l + beta * g)?)
}

fn check_finite(m: &RealMatrix, procedure: &'static str, layer: usize, iteration: usize) -> Result<(), AdmmError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(AdmmError::NonFinite { procedure, layer, iteration })
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

/// One sweep over all layers.
pub fn sweep(cfg: &NetworkConfig, state: &mut NetworkState, iteration: usize) -> Result<(IterationTimings, u64), AdmmError> {
    let ctx = SolveContext::from_config(cfg);
    let concurrent = ctx.workers >= 2;
    let half = ctx.with_workers(ctx.workers / 2);
    let l = cfg.layers();
    let mut timings = IterationTimings::default();
    let mut saturations = 0;

    for i in 0..l - 1 {
        let wkey = solve_key(iteration, i, PROC_WEIGHT);
        let akey = solve_key(iteration, i, PROC_ACTIVATION);
        let st = &*state;
        let weight_job = |c: &SolveContext| timed(|| weight_update(&st.z[i], st.input(i), c, wkey));
        let activation_job = |c: &SolveContext| {
            timed(|| activation_update(&st.weights[i + 1], &st.z[i + 1], &st.z[i], cfg.beta[i + 1], cfg.gamma[i], c, akey))
        };
        let ((w, tw), (x, ta)) = if concurrent {
            thread::scope(|s| {
                let handle = s.spawn(|| weight_job(&half));
                let a = activation_job(&half);
                (handle.join().expect("weight update worker panicked"), a)
            })
        } else {
            (weight_job(&ctx), activation_job(&ctx))
        };
        let (w, x) = (w?, x?);
        timings.weight += tw;
        timings.activation += ta;
        saturations += w.saturations + x.saturations;
        if cfg.arithmetic == Arithmetic::Real {
            check_finite(&w.value, "weight_update", i, iteration)?;
            check_finite(&x.value, "activation_update", i, iteration)?;
        }
        state.weights[i] = w.value;
        state.x[i] = x.value;

        let (z, t) = timed(|| -> Result<RealMatrix, AdmmError> {
            let b = state.weights[i].matmul(state.input(i))?;
            z_update_hidden(&state.x[i], &b, cfg.gamma[i], cfg.beta[i])
        });
        timings.output += t;
        state.z[i] = z?;
    }

    let last = l - 1;
    let (w, t) = timed(|| weight_update(&state.z[last], state.input(last), &ctx, solve_key(iteration, last, PROC_WEIGHT)));
    timings.weight += t;
    let w = w?;
    saturations += w.saturations;
    if cfg.arithmetic == Arithmetic::Real {
        check_finite(&w.value, "weight_update", last, iteration)?;
    }
    state.weights[last] = w.value;

    let beta = cfg.beta[last];
    let (zb, t) = timed(|| -> Result<(RealMatrix, RealMatrix), AdmmError> {
        let b = state.weights[last].matmul(state.input(last))?;
        let z = z_update_output(&state.y, &b, &state.lambda, beta)?;
        Ok((z, b))
    });
    timings.output += t;
    let (z, b) = zb?;
    state.z[last] = z;

    let (lambda, t) = timed(|| lagrangian_update(&state.lambda, beta, &state.z[last], &b));
    timings.lagrangian += t;
    state.lambda = lambda?;
    Ok((timings, saturations))
}

/// Runs `cfg.iterations` sweeps from a fresh initialization.
pub fn train(cfg: &NetworkConfig, x0: &RealMatrix, y: &RealMatrix) -> Result<(NetworkState, TrainLog), AdmmError> {
    let mut state = init_network(cfg, x0, y)?;
    let mut log = TrainLog::default();
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let (t, s) = sweep(cfg, &mut state, it)?;
        log.sweep_wall.push(start.elapsed());
        log.timings.push(t);
        log.saturations.push(s);
    }
    Ok((state, log))
}

/// Forward pass `x_l = relu(W_l x_{l-1})` with a linear last layer.
pub fn predict(weights: &[RealMatrix], inputs: &RealMatrix) -> Result<RealMatrix, AdmmError> {
    let mut a = inputs.clone();
    for (i, w) in weights.iter().enumerate() {
        a = w.matmul(&a)?;
        if i + 1 < weights.len() {
            a = a.map(relu);
        }
    }
    Ok(a)
}

/// Row index of the largest entry in each column; ties go to the lower row.
pub fn argmax_columns(outputs: &RealMatrix) -> Vec<usize> {
    (0..outputs.cols())
        .map(|c| {
            let mut best = 0;
            for r in 1..outputs.rows() {
                if outputs.get(r, c) > outputs.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(outputs: &RealMatrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_columns(outputs).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}
