//! Key projection compression: reorder heads by similarity, then factor each
//! group of `group_size` heads with its own truncated (optionally whitened)
//! SVD.
//!
//! The right factors are never fused: rotary position encoding is applied to
//! full keys, so cached group latents must be expanded back to per-head keys
//! before scoring.

use crate::cka::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::headgroup::{greedy_group, permute_heads, unpermute_outputs, HeadGrouping};
use crate::linalg::{svd, truncate, truncate_whitened, whiten_factor, LowRankPair};
use crate::matrix::Matrix;
use crate::tensorio::ModelSpec;

/// Default number of heads per SVD group.
pub const DEFAULT_GROUP_SIZE: usize = 4;

#[derive(Debug, Clone)]
pub struct KeyCompressionOptions {
    pub group_size: usize,
    /// Reorder heads by similarity before grouping. Off means consecutive
    /// heads are grouped as they come.
    pub reorder: bool,
    /// Whiten against calibration activations when they are supplied.
    pub whiten: bool,
    pub ridge: f64,
}

impl Default for KeyCompressionOptions {
    fn default() -> Self {
        KeyCompressionOptions {
            group_size: DEFAULT_GROUP_SIZE,
            reorder: true,
            whiten: true,
            ridge: 0.0,
        }
    }
}

/// Grouped low-rank key projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedKey {
    grouping: HeadGrouping,
    factors: Vec<LowRankPair>,
    d_head: usize,
}

impl CompressedKey {
    pub fn new(grouping: HeadGrouping, factors: Vec<LowRankPair>, d_head: usize) -> Result<Self> {
        if factors.len() != grouping.num_groups() {
            return Err(Error::invalid(format!(
                "{} factor pairs for {} groups",
                factors.len(),
                grouping.num_groups()
            )));
        }
        let group_width = grouping.group_size() * d_head;
        let d_model = factors.first().map_or(0, |f| f.left.rows());
        for (j, f) in factors.iter().enumerate() {
            if f.left.cols() != f.right.rows() {
                return Err(Error::shape(format!("group {j}: factor inner dimensions differ")));
            }
            if f.left.rows() != d_model || f.right.cols() != group_width {
                return Err(Error::shape(format!(
                    "group {j}: factors {:?}·{:?} do not map {d_model} → {group_width}",
                    f.left.shape(),
                    f.right.shape()
                )));
            }
            if f.rank() == 0 {
                return Err(Error::invalid(format!("group {j} has rank 0")));
            }
        }
        let width: usize = factors.iter().map(LowRankPair::rank).sum();
        if width > grouping.heads() * d_head {
            return Err(Error::invalid(format!(
                "key latent width {width} exceeds uncompressed width {}",
                grouping.heads() * d_head
            )));
        }
        Ok(CompressedKey {
            grouping,
            factors,
            d_head,
        })
    }

    pub fn grouping(&self) -> &HeadGrouping {
        &self.grouping
    }

    pub fn factors(&self) -> &[LowRankPair] {
        &self.factors
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn d_model(&self) -> usize {
        self.factors[0].left.rows()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.factors.iter().map(LowRankPair::rank).collect()
    }

    /// Cached key floats per token: `Σ_j r_gj`.
    pub fn latent_width(&self) -> usize {
        self.factors.iter().map(LowRankPair::rank).sum()
    }

    /// Per-group latents `z_gj = x·L_gj`.
    pub fn project(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        if x.cols() != self.d_model() {
            return Err(Error::shape(format!(
                "input has {} columns, key factors expect {}",
                x.cols(),
                self.d_model()
            )));
        }
        Ok(self.factors.iter().map(|f| x.matmul(&f.left)).collect())
    }

    /// The approximated key projection in original head order.
    pub fn reconstruct_weight(&self) -> Matrix {
        let blocks: Vec<Matrix> = self.factors.iter().map(LowRankPair::product).collect();
        unpermute_outputs(&Matrix::hstack(&blocks), &self.grouping, self.d_head)
            .expect("validated at construction")
    }
}

fn check_ranks(ranks: &[usize], groups: usize, group_width: usize, d_model: usize) -> Result<()> {
    if ranks.len() != groups {
        return Err(Error::invalid(format!(
            "{} group ranks given for {groups} groups",
            ranks.len()
        )));
    }
    let cap = group_width.min(d_model);
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0 || r > cap) {
        return Err(Error::invalid(format!("group rank {bad} outside 1..={cap}")));
    }
    Ok(())
}

/// Split a per-layer key width evenly across `groups` groups.
pub fn uniform_group_ranks(rank_per_group: usize, groups: usize) -> Vec<usize> {
    vec![rank_per_group; groups]
}

/// Compress a key projection: greedy grouping from `sim` (or consecutive
/// grouping when reordering is disabled), then one factorisation per group.
pub fn compress_key(
    w_k: &Matrix,
    spec: &ModelSpec,
    sim: &SimilarityMatrix,
    ranks: &[usize],
    calib: Option<&Matrix>,
    opts: &KeyCompressionOptions,
) -> Result<CompressedKey> {
    let expected = (spec.d_model, spec.n_kv_heads * spec.d_head);
    if w_k.shape() != expected {
        return Err(Error::shape(format!(
            "key projection is {:?}, expected {expected:?}",
            w_k.shape()
        )));
    }
    if sim.heads() != spec.n_kv_heads {
        return Err(Error::shape(format!(
            "similarity covers {} heads, model has {} key heads",
            sim.heads(),
            spec.n_kv_heads
        )));
    }
    let grouping = if opts.reorder {
        greedy_group(sim, opts.group_size)?
    } else {
        HeadGrouping::identity(spec.n_kv_heads, opts.group_size)?
    };
    let x = if opts.whiten { calib } else { None };
    compress_key_with_grouping(w_k, spec.d_head, grouping, ranks, x, opts.ridge)
}

/// Factor each group of an explicitly given grouping. Whitening is used iff
/// `calib` is supplied.
pub fn compress_key_with_grouping(
    w_k: &Matrix,
    d_head: usize,
    grouping: HeadGrouping,
    ranks: &[usize],
    calib: Option<&Matrix>,
    ridge: f64,
) -> Result<CompressedKey> {
    let group_width = grouping.group_size() * d_head;
    check_ranks(ranks, grouping.num_groups(), group_width, w_k.rows())?;
    let permuted = permute_heads(w_k, &grouping, d_head)?;
    let whitening = calib.map(|x| whiten_factor(x, ridge)).transpose()?;
    let factors = ranks
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            let block = permuted.col_block(j * group_width, group_width);
            match &whitening {
                Some(wh) => truncate_whitened(&block, wh, r),
                None => truncate(&svd(&block)?, r),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    CompressedKey::new(grouping, factors, d_head)
}

/// Expand per-group latents back to keys in original head order:
/// `[y_j1 … y_js] = z_gj · R_gj`, concatenated, then inverse-permuted.
pub fn reconstruct_keys(ck: &CompressedKey, z_groups: &[Matrix]) -> Result<Matrix> {
    if z_groups.len() != ck.factors.len() {
        return Err(Error::shape(format!(
            "{} latent blocks for {} groups",
            z_groups.len(),
            ck.factors.len()
        )));
    }
    let t = z_groups.first().map_or(0, Matrix::rows);
    let mut parts = Vec::with_capacity(z_groups.len());
    for (j, (z, f)) in z_groups.iter().zip(&ck.factors).enumerate() {
        if z.cols() != f.rank() || z.rows() != t {
            return Err(Error::shape(format!(
                "group {j}: latent {:?}, expected {t}x{}",
                z.shape(),
                f.rank()
            )));
        }
        parts.push(z.matmul(&f.right));
    }
    let stacked = if t == 0 {
        Matrix::zeros(0, ck.grouping.heads() * ck.d_head)
    } else {
        Matrix::hstack(&parts)
    };
    unpermute_outputs(&stacked, &ck.grouping, ck.d_head)
}
