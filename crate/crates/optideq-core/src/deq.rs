//! Deep-equilibrium recurrence, fixed-point solver and ensemble inference.
//!
//! A block evolves its hidden state by
//!
//! ```text
//! s_{t+1} = alpha * s_t + beta * cell(W, s_t) + b + x_proj
//! ```
//!
//! starting from `s_0 = b + x_proj`, where `cell(W, s)` is the (possibly
//! impaired) optical product of [`crate::cell`] and
//! `x_proj = W_ip * x + b_ip` is the digital input projection. Iteration
//! stops when the relative step `|s_{t+1} - s_t| / max(|s_t|, 1e-12)` drops
//! to the configured tolerance. Plain iteration is used on purpose: it is
//! exactly the dynamics the analog loop executes, so no acceleration scheme
//! is layered on top.
//!
//! An ensemble model runs `n_blocks` independent blocks, concatenates their
//! fixed points and applies one shared affine head to produce a logit pair.
//! A model that fails to settle within the iteration cap still produces
//! logits; the condition is only flagged, mirroring hardware that cannot
//! throw.

use crate::cell::{Calib, CellKind, CellSpec, FrozenCell, EPS_FLOOR, UNIT_CALIB};
use crate::error::{Error, Result};
use crate::linalg::{norm2, Mat};
use crate::seeds::stage_rng;
use rand::Rng;

/// Hyperparameters of one ensemble model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub n_blocks: usize,
    /// Momentum coefficient; 0.5, fixed by the analog electronics.
    pub alpha: f64,
    /// Recurrence gain.
    pub beta: f64,
    /// Relative L2 convergence tolerance.
    pub tol: f64,
    pub max_iters: usize,
    pub cell: CellSpec,
}

impl ModelConfig {
    pub fn new(d_in: usize, d_hidden: usize, n_blocks: usize, cell: CellSpec) -> Self {
        ModelConfig {
            d_in,
            d_hidden,
            n_blocks,
            alpha: 0.5,
            beta: 0.5,
            tol: 1e-3,
            max_iters: 100,
            cell,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.n_blocks == 0 {
            return Err(Error::config("d_in, d_hidden and n_blocks must be >= 1"));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::config(format!("tol must be in (0, 1), got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be >= 1"));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::config("alpha and beta must be finite"));
        }
        self.cell.validate()
    }
}

/// Trainable tensors of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct DeqBlockParams {
    /// Input projection, `d_hidden x d_in`.
    pub w_ip: Mat,
    pub b_ip: Vec<f64>,
    /// Optical weights, `d_hidden x d_hidden`.
    pub w: Mat,
    /// Recurrence bias.
    pub b: Vec<f64>,
}

impl DeqBlockParams {
    pub fn zeros(d_in: usize, d_hidden: usize) -> Self {
        DeqBlockParams {
            w_ip: Mat::zeros(d_hidden, d_in),
            b_ip: vec![0.0; d_hidden],
            w: Mat::zeros(d_hidden, d_hidden),
            b: vec![0.0; d_hidden],
        }
    }

    fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let (di, dh) = (config.d_in, config.d_hidden);
        if self.w_ip.rows() != dh
            || self.w_ip.cols() != di
            || self.b_ip.len() != dh
            || self.w.rows() != dh
            || self.w.cols() != dh
            || self.b.len() != dh
        {
            return Err(Error::config("block tensor shapes do not match config"));
        }
        Ok(())
    }

    /// `x_proj = W_ip x + b_ip`
    pub fn input_projection(&self, x: &[f64]) -> Vec<f64> {
        let mut p = self.w_ip.matvec(x);
        for (pi, bi) in p.iter_mut().zip(&self.b_ip) {
            *pi += bi;
        }
        p
    }
}

/// Outcome of one fixed-point solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub s_star: Vec<f64>,
    pub iterations: usize,
    /// Final relative L2 step.
    pub residual: f64,
    pub converged: bool,
}

/// One full ensemble: blocks, shared head, and (for impaired cells) the four
/// calibration gains. The frozen cell draws live here too, so a model value
/// is self-contained and safe to share read-only across threads.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub config: ModelConfig,
    pub blocks: Vec<DeqBlockParams>,
    /// Output head, `2 x (n_blocks * d_hidden)`.
    pub w_op: Mat,
    pub b_op: Vec<f64>,
    /// Present exactly when the cell kind is `Aoc`.
    pub calib: Option<Calib>,
    cell: FrozenCell,
}

impl EnsembleModel {
    /// All-zero parameters (calibration gains start at unity).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cell = FrozenCell::new(config.cell.clone(), config.d_hidden)?;
        let blocks = (0..config.n_blocks)
            .map(|_| DeqBlockParams::zeros(config.d_in, config.d_hidden))
            .collect();
        let width = config.n_blocks * config.d_hidden;
        let calib = match config.cell.kind {
            CellKind::Aoc => Some(UNIT_CALIB),
            CellKind::Simple => None,
        };
        Ok(EnsembleModel {
            w_op: Mat::zeros(2, width),
            b_op: vec![0.0; 2],
            blocks,
            calib,
            cell,
            config,
        })
    }

    /// Random initialization.
    ///
    /// Projections draw uniformly at fan-in scale (`U(-1/sqrt(fan_in),
    /// +1/sqrt(fan_in))`); biases start at zero. Each block's optical matrix
    /// is rescaled after drawing so that `beta * |W|_2 <= 0.4`, which makes
    /// the iteration map a contraction at the start of training.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let cfg = &model.config;
        let (di, dh) = (cfg.d_in, cfg.d_hidden);
        let ip_scale = 1.0 / (di as f64).sqrt();
        let w_scale = 1.0 / (dh as f64).sqrt();
        let op_scale = 1.0 / ((cfg.n_blocks * dh) as f64).sqrt();
        let beta = cfg.beta;

        for (i, block) in model.blocks.iter_mut().enumerate() {
            let mut rng = stage_rng(seed, &format!("model.init.block{i}"));
            for v in block.w_ip.as_mut_slice() {
                *v = (2.0 * rng.gen::<f64>() - 1.0) * ip_scale;
            }
            for v in block.w.as_mut_slice() {
                *v = (2.0 * rng.gen::<f64>() - 1.0) * w_scale;
            }
            let sigma = block.w.spectral_norm();
            if beta * sigma > 0.4 {
                block.w.scale(0.4 / (beta * sigma));
            }
        }
        let mut rng = stage_rng(seed, "model.init.head");
        for v in model.w_op.as_mut_slice() {
            *v = (2.0 * rng.gen::<f64>() - 1.0) * op_scale;
        }
        Ok(model)
    }

    pub fn cell(&self) -> &FrozenCell {
        &self.cell
    }

    pub fn calib_or_unit(&self) -> Calib {
        self.calib.unwrap_or(UNIT_CALIB)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_blocks {
            return Err(Error::config("block count does not match config"));
        }
        for b in &self.blocks {
            b.check_shapes(&self.config)?;
        }
        let width = self.config.n_blocks * self.config.d_hidden;
        if self.w_op.rows() != 2 || self.w_op.cols() != width || self.b_op.len() != 2 {
            return Err(Error::config("head shapes do not match config"));
        }
        match (self.config.cell.kind, self.calib.is_some()) {
            (CellKind::Aoc, true) | (CellKind::Simple, false) => Ok(()),
            (CellKind::Aoc, false) => Err(Error::config("impaired model is missing calibration gains")),
            (CellKind::Simple, true) => Err(Error::config("ideal model must not carry calibration gains")),
        }
    }
}

/// One application of the recurrence.
pub fn deq_step(
    s: &[f64],
    params: &DeqBlockParams,
    x_proj: &[f64],
    alpha: f64,
    beta: f64,
    cell: &FrozenCell,
    calib: &Calib,
) -> Result<Vec<f64>> {
    let d = cell.d_hidden();
    if s.len() != d || x_proj.len() != d || params.b.len() != d {
        return Err(Error::config(format!(
            "deq_step dimension mismatch: d_hidden={d}, |s|={}, |x_proj|={}",
            s.len(),
            x_proj.len()
        )));
    }
    let w_eff = cell.prepare_weights(&params.w, calib);
    step_prepared(s, params, x_proj, alpha, beta, cell, &w_eff, calib)
}

fn step_prepared(
    s: &[f64],
    params: &DeqBlockParams,
    x_proj: &[f64],
    alpha: f64,
    beta: f64,
    cell: &FrozenCell,
    w_eff: &Mat,
    calib: &Calib,
) -> Result<Vec<f64>> {
    let mut next = cell.apply_prepared(w_eff, s, calib)?;
    for i in 0..next.len() {
        next[i] = alpha * s[i] + beta * next[i] + params.b[i] + x_proj[i];
    }
    if let Some(bad) = next.iter().find(|v| !v.is_finite()) {
        return Err(Error::numeric("recurrence", format!("state became {bad}")));
    }
    Ok(next)
}

/// Iterate the recurrence from `s_0 = b + x_proj` until the relative step is
/// within tolerance or the iteration cap is hit. Hitting the cap is not an
/// error; the result is returned with `converged = false` and the caller
/// decides.
pub fn solve_fixed_point(
    params: &DeqBlockParams,
    x_proj: &[f64],
    config: &ModelConfig,
    cell: &FrozenCell,
    calib: &Calib,
) -> Result<FixedPointResult> {
    let w_eff = cell.prepare_weights(&params.w, calib);
    solve_prepared(params, x_proj, config, cell, &w_eff, calib)
}

fn solve_prepared(
    params: &DeqBlockParams,
    x_proj: &[f64],
    config: &ModelConfig,
    cell: &FrozenCell,
    w_eff: &Mat,
    calib: &Calib,
) -> Result<FixedPointResult> {
    let mut s: Vec<f64> = params.b.iter().zip(x_proj).map(|(b, x)| b + x).collect();
    let mut residual = f64::INFINITY;
    for iter in 1..=config.max_iters {
        let next = step_prepared(&s, params, x_proj, config.alpha, config.beta, cell, w_eff, calib)?;
        let mut diff2 = 0.0;
        for (n, o) in next.iter().zip(&s) {
            let d = n - o;
            diff2 += d * d;
        }
        residual = diff2.sqrt() / norm2(&s).max(EPS_FLOOR);
        s = next;
        if residual <= config.tol {
            return Ok(FixedPointResult {
                s_star: s,
                iterations: iter,
                residual,
                converged: true,
            });
        }
    }
    Ok(FixedPointResult {
        s_star: s,
        iterations: config.max_iters,
        residual,
        converged: false,
    })
}

/// Everything the backward pass needs about one block's solve.
#[derive(Debug, Clone)]
pub struct BlockSolve {
    pub result: FixedPointResult,
    pub x_proj: Vec<f64>,
    /// Prepared (quantised/distorted/gained) weights used for this pass.
    pub w_eff: Mat,
}

/// Solve every block of the ensemble for one input.
pub fn solve_blocks(model: &EnsembleModel, x: &[f64]) -> Result<Vec<BlockSolve>> {
    if x.len() != model.config.d_in {
        return Err(Error::config(format!(
            "input length {} does not match d_in {}",
            x.len(),
            model.config.d_in
        )));
    }
    let calib = model.calib_or_unit();
    let mut out = Vec::with_capacity(model.blocks.len());
    for params in &model.blocks {
        let x_proj = params.input_projection(x);
        let w_eff = model.cell.prepare_weights(&params.w, &calib);
        let result = solve_prepared(params, &x_proj, &model.config, &model.cell, &w_eff, &calib)?;
        out.push(BlockSolve { result, x_proj, w_eff });
    }
    Ok(out)
}

/// Ensemble forward pass: logits plus per-block solver diagnostics.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: [f64; 2],
    pub blocks: Vec<FixedPointResult>,
}

impl ForwardResult {
    pub fn all_converged(&self) -> bool {
        self.blocks.iter().all(|b| b.converged)
    }

    /// Argmax class; ties go to class 0.
    pub fn predicted_class(&self) -> u8 {
        if self.logits[1] > self.logits[0] {
            1
        } else {
            0
        }
    }
}

pub fn forward(model: &EnsembleModel, x: &[f64]) -> Result<ForwardResult> {
    let solves = solve_blocks(model, x)?;
    let concat = concat_states(&solves);
    let logits = head_logits(model, &concat);
    Ok(ForwardResult {
        logits,
        blocks: solves.into_iter().map(|b| b.result).collect(),
    })
}

pub(crate) fn concat_states(solves: &[BlockSolve]) -> Vec<f64> {
    let mut concat = Vec::with_capacity(solves.iter().map(|b| b.result.s_star.len()).sum());
    for b in solves {
        concat.extend_from_slice(&b.result.s_star);
    }
    concat
}

pub(crate) fn head_logits(model: &EnsembleModel, concat: &[f64]) -> [f64; 2] {
    let y = model.w_op.matvec(concat);
    [y[0] + model.b_op[0], y[1] + model.b_op[1]]
}

/// Parameter accounting, split into the total and the optically executed
/// subset (the recurrence weight matrices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub optical: usize,
}

pub fn parameter_count(model: &EnsembleModel) -> ParameterCount {
    let cfg = &model.config;
    let per_block = cfg.d_hidden * cfg.d_in   // W_ip
        + cfg.d_hidden                        // b_ip
        + cfg.d_hidden * cfg.d_hidden         // W
        + cfg.d_hidden; // b
    let head = 2 * (cfg.n_blocks * cfg.d_hidden) + 2;
    let calib = if model.calib.is_some() { 4 } else { 0 };
    ParameterCount {
        total: cfg.n_blocks * per_block + head + calib,
        optical: cfg.n_blocks * cfg.d_hidden * cfg.d_hidden,
    }
}
