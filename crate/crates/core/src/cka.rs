//! Linear centered kernel alignment between attention heads.
//!
//! For representations `a: n × d1` and `b: n × d2` sharing `n` samples, the
//! centred Gram `H·a·aᵀ·H` equals `(H·a)(H·a)ᵀ`, so
//! `tr(G̃_a·G̃_b) = ‖(H·a)ᵀ(H·b)‖_F²`. That identity keeps the cost at
//! `O(n·d1·d2)` instead of forming `n × n` Grams.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Symmetric `h × h` matrix of pairwise head CKA values.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    /// Validates symmetry, unit diagonal and range.
    pub fn new(values: Matrix) -> Result<Self> {
        let h = values.rows();
        if values.cols() != h {
            return Err(Error::shape("similarity matrix must be square"));
        }
        for i in 0..h {
            if (values[(i, i)] - 1.0).abs() > 1e-10 {
                return Err(Error::invalid(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..h {
                let v = values[(i, j)];
                if !(-1e-10..=1.0 + 1e-10).contains(&v) {
                    return Err(Error::invalid(format!("entry ({i},{j}) = {v} outside [0,1]")));
                }
                if (v - values[(j, i)]).abs() > 1e-10 {
                    return Err(Error::invalid(format!("entry ({i},{j}) breaks symmetry")));
                }
            }
        }
        Ok(SimilarityMatrix { values })
    }

    pub fn heads(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }
}

/// Where head representations come from.
#[derive(Debug, Clone, Copy)]
pub enum HeadSource<'a> {
    /// Each head's `d_model × d_head` projection block, rows as samples.
    Weights,
    /// `x · block` for calibration activations `x: t × d_model`.
    Activations(&'a Matrix),
}

fn center_columns(m: &Matrix) -> Matrix {
    let n = m.rows() as f64;
    let means: Vec<f64> = (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m[(i, j)]).sum::<f64>() / n)
        .collect();
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] - means[j])
}

fn hsic_centered(a: &Matrix, b: &Matrix) -> f64 {
    a.t_matmul(b).frobenius_norm_sq()
}

/// Linear CKA in `[0, 1]`.
///
/// Fails with [`Error::DegenerateRepresentation`] when either input has
/// constant rows (its centred Gram vanishes).
pub fn cka_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::shape(format!(
            "representations have {} and {} samples",
            a.rows(),
            b.rows()
        )));
    }
    if a.rows() < 2 {
        return Err(Error::invalid("CKA needs at least two samples"));
    }
    let ca = center_columns(a);
    let cb = center_columns(b);
    let aa = hsic_centered(&ca, &ca);
    let bb = hsic_centered(&cb, &cb);
    let floor = f64::MIN_POSITIVE.sqrt();
    if !(aa > floor) || !(bb > floor) {
        return Err(Error::DegenerateRepresentation);
    }
    let ab = hsic_centered(&ca, &cb);
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(0.0, 1.0))
}

/// Pairwise CKA between the `h = cols / d_head` heads of a key projection.
pub fn head_similarity(w_k: &Matrix, d_head: usize, source: HeadSource<'_>) -> Result<SimilarityMatrix> {
    if d_head == 0 || w_k.cols() % d_head != 0 {
        return Err(Error::shape(format!(
            "{} columns do not split into heads of width {d_head}",
            w_k.cols()
        )));
    }
    let h = w_k.cols() / d_head;
    let reps: Vec<Matrix> = match source {
        HeadSource::Weights => (0..h).map(|i| w_k.col_block(i * d_head, d_head)).collect(),
        HeadSource::Activations(x) => {
            if x.cols() != w_k.rows() {
                return Err(Error::shape(format!(
                    "activations have {} columns, key projection has {} rows",
                    x.cols(),
                    w_k.rows()
                )));
            }
            (0..h)
                .map(|i| x.matmul(&w_k.col_block(i * d_head, d_head)))
                .collect()
        }
    };
    let centered: Vec<Matrix> = reps.iter().map(center_columns).collect();
    let self_hsic: Vec<f64> = centered.iter().map(|c| hsic_centered(c, c)).collect();
    let floor = f64::MIN_POSITIVE.sqrt();
    if reps.first().is_some_and(|r| r.rows() < 2) {
        return Err(Error::invalid("CKA needs at least two samples"));
    }
    if self_hsic.iter().any(|&v| !(v > floor)) {
        return Err(Error::DegenerateRepresentation);
    }

    let pairs: Vec<(usize, usize)> = (0..h).flat_map(|i| (i + 1..h).map(move |j| (i, j))).collect();
    let upper: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let ab = hsic_centered(&centered[i], &centered[j]);
            (ab / (self_hsic[i].sqrt() * self_hsic[j].sqrt())).clamp(0.0, 1.0)
        })
        .collect();
    let mut values = Matrix::identity(h);
    for (&(i, j), &v) in pairs.iter().zip(&upper) {
        values[(i, j)] = v;
        values[(j, i)] = v;
    }
    Ok(SimilarityMatrix { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_matrix, random_orthogonal, rng};

    /// Straight-line evaluation with explicit n×n centering and Gram matrices.
    fn cka_textbook(a: &Matrix, b: &Matrix) -> f64 {
        let n = a.rows();
        let h = Matrix::from_fn(n, n, |i, j| (if i == j { 1.0 } else { 0.0 }) - 1.0 / n as f64);
        let ga = h.matmul(&a.matmul_t(a)).matmul(&h);
        let gb = h.matmul(&b.matmul_t(b)).matmul(&h);
        let hsic = |x: &Matrix, y: &Matrix| x.matmul(y).trace();
        hsic(&ga, &gb) / (hsic(&ga, &ga) * hsic(&gb, &gb)).sqrt()
    }

    #[test]
    fn small_worked_example() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]).unwrap();
        let got = cka_similarity(&a, &b).unwrap();
        let want = cka_textbook(&a, &b);
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        // the centred rows of b are a rotation of those of a
        assert!((got - 1.0).abs() < 1e-14);

        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [2.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0], [1.0, 1.0], [0.0, 3.0]]).unwrap();
        let got = cka_similarity(&a, &b).unwrap();
        assert!((got - cka_textbook(&a, &b)).abs() < 1e-14);
        assert!((got - 0.819_104_127_737_052_4).abs() < 1e-13);
    }

    #[test]
    fn self_and_invariances() {
        let a = random_matrix(10, 3, 1);
        assert!((cka_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let q = random_orthogonal(3, &mut rng(2));
        assert!((cka_similarity(&a, &a.matmul(&q)).unwrap() - 1.0).abs() < 1e-12);
        assert!((cka_similarity(&a, &a.scale(-3.5)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_input_rejected() {
        let a = random_matrix(6, 2, 3);
        let constant = Matrix::from_fn(6, 2, |_, j| j as f64 + 1.0);
        assert!(matches!(
            cka_similarity(&a, &constant),
            Err(Error::DegenerateRepresentation)
        ));
        let mut w = random_matrix(6, 4, 4);
        w.set_col_block(2, &Matrix::zeros(6, 2));
        assert!(matches!(
            head_similarity(&w, 2, HeadSource::Weights),
            Err(Error::DegenerateRepresentation)
        ));
    }

    #[test]
    fn duplicate_heads_and_single_head() {
        let block = random_matrix(8, 2, 5);
        let other = random_matrix(8, 2, 6);
        let w = Matrix::hstack(&[block.clone(), other, block]);
        let s = head_similarity(&w, 2, HeadSource::Weights).unwrap();
        assert!((s.get(0, 2) - 1.0).abs() < 1e-12);

        let s = head_similarity(&random_matrix(8, 3, 7), 3, HeadSource::Weights).unwrap();
        assert_eq!(s.values(), &Matrix::identity(1));
    }

    #[test]
    fn matches_pairwise_calls() {
        let w = random_matrix(8, 8, 8);
        let s = head_similarity(&w, 2, HeadSource::Weights).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j {
                    1.0
                } else {
                    cka_textbook(&w.col_block(2 * i, 2), &w.col_block(2 * j, 2))
                };
                assert!((s.get(i, j) - want).abs() < 1e-12);
            }
        }
        assert!(SimilarityMatrix::new(s.values().clone()).is_ok());
    }

    #[test]
    fn activation_mode_uses_projected_tokens() {
        let w = random_matrix(6, 6, 9);
        let x = random_matrix(20, 6, 10);
        let s = head_similarity(&w, 3, HeadSource::Activations(&x)).unwrap();
        let want = cka_textbook(&x.matmul(&w.col_block(0, 3)), &x.matmul(&w.col_block(3, 3)));
        assert!((s.get(0, 1) - want).abs() < 1e-12);
        assert!(head_similarity(&w, 3, HeadSource::Activations(&random_matrix(20, 5, 1))).is_err());
    }
}
