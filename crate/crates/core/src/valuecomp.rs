//! Value projection compression: one SVD over the whole projection, an
//! offline least-squares calibration of both factors against calibration
//! activations, and fusion of the right factor into the output projection.
//!
//! Conventions: activations are rows, `x: t × d_in`, and the value
//! projection is `w: d_in × d_out`, approximated as `left · right` with
//! `left: d_in × r` (produces the cached latent `x·left`) and
//! `right: r × d_out`. The calibration objective is the activation error
//!
//! ```text
//! E(left, right) = ‖x·(left·right − w)‖_F²
//! ```
//!
//! Each calibration iteration performs two exact block minimisations:
//!
//! 1. `right ← (leftᵀ·G·left)⁻¹ · leftᵀ·G·w` with `G = xᵀx`, evaluated as a
//!    least-squares solve for the change to `right` against `x·left`. When
//!    the normal equations are singular the ridge damps the change, so
//!    directions the activations never reach keep their current value;
//! 2. `left ← w·rightᵀ·(right·rightᵀ)⁻¹`, which solves the normal equations
//!    `G·left·(right·rightᵀ) = G·w·rightᵀ` for every `G`, singular or not.
//!
//! Because both steps minimise `E` over one factor with the other fixed, `E`
//! never increases.

use crate::error::{Error, Result};
use crate::linalg::{ridge_solve, svd, truncate, whitened_truncate, LowRankPair};
use crate::matrix::Matrix;
use crate::tensorio::ModelSpec;

/// Default number of calibration iterations (one right pass, one left pass).
pub const DEFAULT_CALIBRATION_ITERS: usize = 1;

#[derive(Debug, Clone)]
pub struct ValueCompressionOptions {
    pub whiten: bool,
    pub calibrate: bool,
    pub iters: usize,
    pub ridge: f64,
    /// Keep the right factor in the artifact. Inference only needs the left
    /// factor and the fused output blocks.
    pub keep_right_factor: bool,
}

impl Default for ValueCompressionOptions {
    fn default() -> Self {
        ValueCompressionOptions {
            whiten: true,
            calibrate: true,
            iters: DEFAULT_CALIBRATION_ITERS,
            ridge: 0.0,
            keep_right_factor: true,
        }
    }
}

/// Low-rank value projection with the right factor folded into `W_o`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedValue {
    left: Matrix,
    right: Option<Matrix>,
    /// Per-query-head blocks `R_v^{(kv(h))} · W_o^{(h)}`, each `r × d_model`,
    /// stacked in head order.
    fused_w_o: Matrix,
}

impl CompressedValue {
    pub fn new(left: Matrix, right: Option<Matrix>, fused_w_o: Matrix, spec: &ModelSpec) -> Result<Self> {
        let r = left.cols();
        let kv_width = spec.n_kv_heads * spec.d_head;
        if left.rows() != spec.d_model {
            return Err(Error::shape(format!(
                "value left factor has {} rows, d_model is {}",
                left.rows(),
                spec.d_model
            )));
        }
        if r == 0 || r > kv_width {
            return Err(Error::invalid(format!("value rank {r} outside 1..={kv_width}")));
        }
        if let Some(right) = &right {
            if right.shape() != (r, kv_width) {
                return Err(Error::shape(format!(
                    "value right factor is {:?}, expected ({r}, {kv_width})",
                    right.shape()
                )));
            }
        }
        if fused_w_o.shape() != (spec.n_heads * r, spec.d_model) {
            return Err(Error::shape(format!(
                "fused output projection is {:?}, expected ({}, {})",
                fused_w_o.shape(),
                spec.n_heads * r,
                spec.d_model
            )));
        }
        Ok(CompressedValue {
            left,
            right,
            fused_w_o,
        })
    }

    pub fn rank(&self) -> usize {
        self.left.cols()
    }

    pub fn left(&self) -> &Matrix {
        &self.left
    }

    pub fn right(&self) -> Option<&Matrix> {
        self.right.as_ref()
    }

    pub fn fused_w_o(&self) -> &Matrix {
        &self.fused_w_o
    }

    /// Fused block consumed by query head `h`.
    pub fn fused_block(&self, h: usize) -> Matrix {
        self.fused_w_o.row_block(h * self.rank(), self.rank())
    }

    /// Drop the right factor, leaving only what inference needs.
    pub fn strip_right(mut self) -> Self {
        self.right = None;
        self
    }

    /// Largest deviation between the stored fused blocks and a fresh fusion
    /// of the stored right factor with `w_o`. `None` if the right factor was
    /// stripped.
    pub fn fusion_deviation(&self, w_o: &Matrix, spec: &ModelSpec) -> Option<Result<f64>> {
        let right = self.right.as_ref()?;
        Some(fuse(right, w_o, spec).map(|f| f.max_abs_diff(&self.fused_w_o)))
    }
}

/// Factor the whole value projection: whitened truncation when calibration
/// activations are supplied, plain truncation otherwise.
pub fn svd_value(w_v: &Matrix, rank: usize, whiten_with: Option<&Matrix>, ridge: f64) -> Result<LowRankPair> {
    match whiten_with {
        Some(x) => whitened_truncate(w_v, x, rank, ridge),
        None => truncate(&svd(w_v)?, rank),
    }
}

fn check_calibration_shapes(pair: &LowRankPair, w: &Matrix, x: &Matrix) -> Result<()> {
    if pair.left.rows() != w.rows() || pair.right.cols() != w.cols() || pair.left.cols() != pair.right.rows() {
        return Err(Error::shape(format!(
            "factors {:?}·{:?} do not approximate a {:?} weight",
            pair.left.shape(),
            pair.right.shape(),
            w.shape()
        )));
    }
    if x.cols() != w.rows() {
        return Err(Error::shape(format!(
            "activations have {} columns, weight has {} rows",
            x.cols(),
            w.rows()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::invalid("calibration needs at least one token"));
    }
    Ok(())
}

/// `‖x·(left·right − w)‖_F²`.
pub fn activation_error(left: &Matrix, right: &Matrix, w: &Matrix, x: &Matrix) -> Result<f64> {
    let pair = LowRankPair::new(left.clone(), right.clone())?;
    if x.rows() == 0 {
        return Ok(0.0);
    }
    check_calibration_shapes(&pair, w, x)?;
    Ok(x.matmul(&pair.product().sub(w)).frobenius_norm_sq())
}

/// Result of [`calibrate_traced`].
#[derive(Debug, Clone)]
pub struct CalibrationTrace {
    pub pair: LowRankPair,
    /// Activation error at the start and after every half-step.
    pub errors: Vec<f64>,
}

/// Offline calibration; see the module docs for the update order.
pub fn calibrate(pair: &LowRankPair, w: &Matrix, x: &Matrix, iters: usize, ridge: f64) -> Result<LowRankPair> {
    calibrate_traced(pair, w, x, iters, ridge).map(|t| t.pair)
}

pub fn calibrate_traced(
    pair: &LowRankPair,
    w: &Matrix,
    x: &Matrix,
    iters: usize,
    ridge: f64,
) -> Result<CalibrationTrace> {
    check_calibration_shapes(pair, w, x)?;
    let xw = x.matmul(w);
    let error = |l: &Matrix, r: &Matrix| x.matmul(l).matmul(r).sub(&xw).frobenius_norm_sq();

    let mut left = pair.left.clone();
    let mut right = pair.right.clone();
    let mut errors = vec![error(&left, &right)];
    for _ in 0..iters {
        right = update_right(&left, &right, x, &xw, ridge)?;
        errors.push(error(&left, &right));
        left = update_left(&right, w, ridge)?;
        errors.push(error(&left, &right));
    }
    Ok(CalibrationTrace {
        pair: LowRankPair { left, right },
        errors,
    })
}

/// Minimiser of `E` over the right factor, starting from `right`: least
/// squares of `x·w` on `x·left`.
pub fn update_right(left: &Matrix, right: &Matrix, x: &Matrix, xw: &Matrix, ridge: f64) -> Result<Matrix> {
    let a = x.matmul(left);
    let residual = xw.sub(&a.matmul(right));
    ridge_solve(&a.t_matmul(&a), &a.t_matmul(&residual), ridge)
        .map(|step| right.add(&step))
        .map_err(|e| Error::numeric(format!("right-factor calibration: {e}")))
}

/// Minimiser of `E` over the left factor: `w·rightᵀ·(right·rightᵀ)⁻¹`.
pub fn update_left(right: &Matrix, w: &Matrix, ridge: f64) -> Result<Matrix> {
    let rrt = right.matmul_t(right);
    let rwt = right.matmul_t(w);
    ridge_solve(&rrt, &rwt, ridge)
        .map(|m| m.transpose())
        .map_err(|e| Error::numeric(format!("left-factor calibration: {e}")))
}

/// Fold the value right factor into the output projection, one block per
/// query head: `W̃_o^{(h)} = R_v^{(kv(h))} · W_o^{(h)}` where
/// `kv(h) = h / (n_heads / n_kv_heads)`.
pub fn fuse(right: &Matrix, w_o: &Matrix, spec: &ModelSpec) -> Result<Matrix> {
    let d_h = spec.d_head;
    if right.cols() != spec.n_kv_heads * d_h {
        return Err(Error::shape(format!(
            "right factor has {} columns, expected {}",
            right.cols(),
            spec.n_kv_heads * d_h
        )));
    }
    if w_o.shape() != (spec.n_heads * d_h, spec.d_model) {
        return Err(Error::shape(format!(
            "output projection is {:?}, expected ({}, {})",
            w_o.shape(),
            spec.n_heads * d_h,
            spec.d_model
        )));
    }
    let share = spec.n_heads / spec.n_kv_heads;
    let blocks: Vec<Matrix> = (0..spec.n_heads)
        .map(|h| {
            let kv = h / share;
            right.col_block(kv * d_h, d_h).matmul(&w_o.row_block(h * d_h, d_h))
        })
        .collect();
    Ok(Matrix::vstack(&blocks))
}

/// Full value path for one layer: SVD, optional calibration, fusion.
pub fn compress_value(
    w_v: &Matrix,
    w_o: &Matrix,
    spec: &ModelSpec,
    rank: usize,
    calib: Option<&Matrix>,
    opts: &ValueCompressionOptions,
) -> Result<CompressedValue> {
    compress_value_split(w_v, w_o, spec, rank, calib, calib, opts)
}

/// As [`compress_value`], with separate activation sets for whitening and
/// for calibration.
pub fn compress_value_split(
    w_v: &Matrix,
    w_o: &Matrix,
    spec: &ModelSpec,
    rank: usize,
    whiten_x: Option<&Matrix>,
    calib_x: Option<&Matrix>,
    opts: &ValueCompressionOptions,
) -> Result<CompressedValue> {
    let kv_width = spec.n_kv_heads * spec.d_head;
    if w_v.shape() != (spec.d_model, kv_width) {
        return Err(Error::shape(format!(
            "value projection is {:?}, expected ({}, {kv_width})",
            w_v.shape(),
            spec.d_model
        )));
    }
    let whiten_x = if opts.whiten { whiten_x } else { None };
    let mut pair = svd_value(w_v, rank, whiten_x, opts.ridge)?;
    if opts.calibrate {
        let x = calib_x.ok_or_else(|| Error::invalid("value calibration requested without activations"))?;
        pair = calibrate(&pair, w_v, x, opts.iters, opts.ridge)?;
    }
    let fused = fuse(&pair.right, w_o, spec)?;
    let right = opts.keep_right_factor.then_some(pair.right);
    CompressedValue::new(pair.left, right, fused, spec)
}
