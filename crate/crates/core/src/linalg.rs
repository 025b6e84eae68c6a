//! Dense kernels: one-sided Jacobi SVD, truncation, Cholesky whitening and
//! ridge-regularised solves.
//!
//! Everything here is deterministic: loops run in a fixed order and there is
//! no parallel reduction, so identical inputs give bit-identical outputs.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Hard cap on Jacobi sweeps.
pub const MAX_SWEEPS: usize = 100;

/// Number of ×10 ridge escalations attempted after the first regularised try.
pub const RIDGE_ESCALATIONS: usize = 3;

/// Thin SVD `a = u · diag(sigma) · vᵀ`, singular values non-increasing.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| {
            self.u[(i, j)] * self.sigma[j]
        });
        scaled.matmul_t(&self.v)
    }

    /// Sum of squared singular values beyond the first `r`.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum()
    }
}

/// A rank-`r` factorisation `w ≈ left · right` with `left: d_in × r` and
/// `right: r × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    pub left: Matrix,
    pub right: Matrix,
}

impl LowRankPair {
    pub fn new(left: Matrix, right: Matrix) -> Result<Self> {
        if left.cols() != right.rows() {
            return Err(Error::shape(format!(
                "low-rank pair inner dimensions differ: {} vs {}",
                left.cols(),
                right.rows()
            )));
        }
        Ok(LowRankPair { left, right })
    }

    pub fn rank(&self) -> usize {
        self.left.cols()
    }

    pub fn product(&self) -> Matrix {
        self.left.matmul(&self.right)
    }
}

fn require_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Full thin SVD via one-sided (Hestenes) Jacobi rotations.
///
/// Returns `min(m, n)` singular triplets. Columns of `u` belonging to zero
/// singular values are completed to an orthonormal set deterministically.
pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    require_finite(a, "svd input")?;
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose());
        return Ok(SvdFactors {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    Ok(svd_tall(a))
}

/// SVD for `m >= n`. Works on the columns of `a` stored as rows of `aᵀ`.
fn svd_tall(a: &Matrix) -> SvdFactors {
    let (m, n) = a.shape();
    let mut cols = a.transpose();
    let mut vt = Matrix::identity(n);
    let tol = (m.max(1) as f64) * f64::EPSILON;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(cols.row(p), cols.row(p));
                let beta = dot(cols.row(q), cols.row(q));
                let gamma = dot(cols.row(p), cols.row(q));
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(cols.row(j), cols.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal singular values keep input column order
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = order.first().map_or(0.0, |&j| norms[j]);
    let negligible = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        for i in 0..n {
            v[(i, k)] = vt[(j, i)];
        }
        if s > negligible && s > 0.0 {
            for i in 0..m {
                u[(i, k)] = cols[(j, i)] / s;
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u, &missing);
    SvdFactors { u, sigma, v }
}

fn rotate_rows(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.cols();
    for k in 0..n {
        let x = a[(p, k)];
        let y = a[(q, k)];
        a[(p, k)] = c * x - s * y;
        a[(q, k)] = s * x + c * y;
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to every other
/// column, trying standard basis vectors in order.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let m = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|k| !missing.contains(k)).collect();
    let mut basis = 0;
    for &k in missing {
        loop {
            assert!(basis < m, "cannot complete orthonormal basis");
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            // two passes of modified Gram-Schmidt
            for _ in 0..2 {
                for &f in &filled {
                    let proj: f64 = (0..m).map(|i| u[(i, f)] * cand[i]).sum();
                    for (i, c) in cand.iter_mut().enumerate() {
                        *c -= proj * u[(i, f)];
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 0.5 {
                for (i, c) in cand.iter().enumerate() {
                    u[(i, k)] = c / norm;
                }
                filled.push(k);
                break;
            }
        }
    }
}

/// Keep the top `r` triplets, splitting `sqrt(sigma)` evenly between the
/// factors: `left = U_r·Σ_r^½`, `right = Σ_r^½·V_rᵀ`.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<LowRankPair> {
    if r == 0 || r > f.sigma.len() {
        return Err(Error::invalid(format!(
            "truncation rank {r} outside 1..={}",
            f.sigma.len()
        )));
    }
    let root: Vec<f64> = f.sigma[..r].iter().map(|s| s.sqrt()).collect();
    let left = Matrix::from_fn(f.u.rows(), r, |i, j| f.u[(i, j)] * root[j]);
    let right = Matrix::from_fn(r, f.v.rows(), |i, j| root[i] * f.v[(j, i)]);
    Ok(LowRankPair { left, right })
}

/// `xᵀ·x`.
pub fn gram(x: &Matrix) -> Matrix {
    x.t_matmul(x)
}

/// Default regulariser for a Gram matrix: `1e-8 · trace / d`.
pub fn default_ridge(gram: &Matrix) -> f64 {
    let d = gram.rows().max(1) as f64;
    1e-8 * gram.trace().abs() / d
}

/// Ridge values to try in order: the requested one, then the default
/// (or the request if larger) escalated ×10 up to [`RIDGE_ESCALATIONS`] times.
fn ridge_schedule(requested: f64, fallback: f64) -> Vec<f64> {
    let mut out = vec![requested];
    let base = requested.max(fallback);
    if base > 0.0 {
        let mut r = if base > requested { base } else { base * 10.0 };
        for _ in 0..=RIDGE_ESCALATIONS {
            out.push(r);
            r *= 10.0;
        }
    }
    out
}

/// Lower-triangular Cholesky factor `c` with `c·cᵀ = a`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape("cholesky of a non-square matrix"));
    }
    require_finite(a, "cholesky input")?;
    let max_diag = (0..n).fold(0.0f64, |m, i| m.max(a[(i, i)].abs()));
    let floor = max_diag * (n.max(1) as f64) * f64::EPSILON;
    let mut c = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= c[(j, k)] * c[(j, k)];
        }
        if !(d > floor) {
            return Err(Error::numeric(format!(
                "matrix not positive definite (pivot {j} = {d:e})"
            )));
        }
        let d = d.sqrt();
        c[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= c[(i, k)] * c[(j, k)];
            }
            c[(i, j)] = s / d;
        }
    }
    Ok(c)
}

/// Inverse of a non-singular lower-triangular matrix.
pub fn lower_triangular_inverse(l: &Matrix) -> Matrix {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    for col in 0..n {
        // forward substitution for e_col
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[(i, k)] * inv[(k, col)];
            }
            inv[(i, col)] = s / l[(i, i)];
        }
    }
    inv
}

/// Cholesky whitening factor of calibration activations.
#[derive(Debug, Clone)]
pub struct Whitening {
    /// Lower triangular, `s·sᵀ = xᵀx + ridge·I`.
    pub s: Matrix,
    pub s_inv: Matrix,
    /// Ridge actually applied after any escalation.
    pub ridge: f64,
}

/// Factor the activation Gram `xᵀx + ridge·I = s·sᵀ`.
///
/// If the factorisation fails the ridge is escalated; an error means the
/// calibration data is degenerate even after regularisation.
pub fn whiten_factor(x: &Matrix, ridge: f64) -> Result<Whitening> {
    if x.rows() == 0 {
        return Err(Error::invalid("whitening needs at least one token"));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be non-negative, got {ridge}")));
    }
    require_finite(x, "calibration activations")?;
    let g = gram(x);
    let d = g.rows();
    let mut last = None;
    for r in ridge_schedule(ridge, default_ridge(&g)) {
        let mut reg = g.clone();
        for i in 0..d {
            reg[(i, i)] += r;
        }
        match cholesky(&reg) {
            Ok(s) => {
                let s_inv = lower_triangular_inverse(&s);
                return Ok(Whitening { s, s_inv, ridge: r });
            }
            Err(e) => last = Some(e),
        }
    }
    Err(Error::numeric(format!(
        "whitening failed after ridge escalation: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Rank-`r` factorisation of `w` minimising the activation error
/// `‖x·(w − left·right)‖_F²` rather than the weight error.
///
/// SVD is applied to `sᵀ·w`; the left factor is unwound through `s⁻ᵀ`.
pub fn whitened_truncate(w: &Matrix, x: &Matrix, r: usize, ridge: f64) -> Result<LowRankPair> {
    if x.cols() != w.rows() {
        return Err(Error::shape(format!(
            "activations have {} columns but weight has {} rows",
            x.cols(),
            w.rows()
        )));
    }
    let wh = whiten_factor(x, ridge)?;
    truncate_whitened(w, &wh, r)
}

/// [`whitened_truncate`] with a precomputed whitening factor, for
/// decomposing several weights against the same activations.
pub fn truncate_whitened(w: &Matrix, wh: &Whitening, r: usize) -> Result<LowRankPair> {
    if wh.s.rows() != w.rows() {
        return Err(Error::shape(format!(
            "whitening is {}-dimensional but weight has {} rows",
            wh.s.rows(),
            w.rows()
        )));
    }
    require_finite(w, "weight")?;
    let f = svd(&wh.s.t_matmul(w))?;
    let pair = truncate(&f, r)?;
    Ok(LowRankPair {
        left: wh.s_inv.t_matmul(&pair.left),
        right: pair.right,
    })
}

/// Solve `(a + ridge·I)·y = b` by LU with partial pivoting.
///
/// A singular system is retried with an escalating ridge before failing.
pub fn ridge_solve(a: &Matrix, b: &Matrix, ridge: f64) -> Result<Matrix> {
    let k = a.rows();
    if a.cols() != k {
        return Err(Error::shape("ridge_solve needs a square system matrix"));
    }
    if b.rows() != k {
        return Err(Error::shape(format!(
            "right-hand side has {} rows, system has {k}",
            b.rows()
        )));
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::invalid(format!("ridge must be non-negative, got {ridge}")));
    }
    require_finite(a, "system matrix")?;
    require_finite(b, "right-hand side")?;
    let fallback = default_ridge(a).max(1e-8 * a.max_abs());
    for r in ridge_schedule(ridge, fallback) {
        let mut m = a.clone();
        for i in 0..k {
            m[(i, i)] += r;
        }
        if let Some(y) = lu_solve(m, b.clone()) {
            return Ok(y);
        }
    }
    Err(Error::numeric("linear system singular after ridge escalation"))
}

fn lu_solve(mut a: Matrix, mut b: Matrix) -> Option<Matrix> {
    let n = a.rows();
    let p = b.cols();
    let floor = a.max_abs() * (n.max(1) as f64) * f64::EPSILON;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap_or(col);
        if !(a[(pivot, col)].abs() > floor) {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                let t = a[(col, j)];
                a[(col, j)] = a[(pivot, j)];
                a[(pivot, j)] = t;
            }
            for j in 0..p {
                let t = b[(col, j)];
                b[(col, j)] = b[(pivot, j)];
                b[(pivot, j)] = t;
            }
        }
        let d = a[(col, col)];
        for i in col + 1..n {
            let f = a[(i, col)] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[(i, j)] -= f * a[(col, j)];
            }
            for j in 0..p {
                b[(i, j)] -= f * b[(col, j)];
            }
        }
    }
    let mut y = Matrix::zeros(n, p);
    for i in (0..n).rev() {
        for j in 0..p {
            let mut s = b[(i, j)];
            for k in i + 1..n {
                s -= a[(i, k)] * y[(k, j)];
            }
            y[(i, j)] = s / a[(i, i)];
        }
    }
    y.is_finite().then_some(y)
}
