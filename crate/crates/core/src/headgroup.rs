//! Similarity-aware head reordering.
//!
//! Heads are packed into groups of `group_size` so that similar heads share a
//! grouped low-rank factorisation. The grouping is a permutation of head
//! positions; decoding applies the inverse permutation to restore order.

use serde::{Deserialize, Serialize};

use crate::cka::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Partition of `0..h` into equal groups, and the induced head permutation.
///
/// `permutation[p]` is the original head placed at new position `p`; it is
/// the concatenation of `groups`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GroupingRepr", into = "GroupingRepr")]
pub struct HeadGrouping {
    group_size: usize,
    groups: Vec<Vec<usize>>,
    permutation: Vec<usize>,
    inverse: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GroupingRepr {
    group_size: usize,
    permutation: Vec<usize>,
}

impl TryFrom<GroupingRepr> for HeadGrouping {
    type Error = Error;

    fn try_from(r: GroupingRepr) -> Result<Self> {
        HeadGrouping::from_permutation(r.permutation, r.group_size)
    }
}

impl From<HeadGrouping> for GroupingRepr {
    fn from(g: HeadGrouping) -> Self {
        GroupingRepr {
            group_size: g.group_size,
            permutation: g.permutation,
        }
    }
}

impl HeadGrouping {
    /// Group consecutive heads without reordering.
    pub fn identity(heads: usize, group_size: usize) -> Result<Self> {
        Self::from_permutation((0..heads).collect(), group_size)
    }

    /// Chunk an arbitrary permutation into consecutive groups.
    pub fn from_permutation(permutation: Vec<usize>, group_size: usize) -> Result<Self> {
        let h = permutation.len();
        check_divisible(h, group_size)?;
        let mut inverse = vec![usize::MAX; h];
        for (p, &orig) in permutation.iter().enumerate() {
            if orig >= h || inverse[orig] != usize::MAX {
                return Err(Error::invalid(format!(
                    "{permutation:?} is not a permutation of 0..{h}"
                )));
            }
            inverse[orig] = p;
        }
        let groups = permutation.chunks(group_size).map(<[usize]>::to_vec).collect();
        Ok(HeadGrouping {
            group_size,
            groups,
            permutation,
            inverse,
        })
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn heads(&self) -> usize {
        self.permutation.len()
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// New position → original head.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Original head → new position.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(p, &h)| p == h)
    }
}

fn check_divisible(heads: usize, group_size: usize) -> Result<()> {
    if group_size == 0 {
        return Err(Error::invalid("group size must be at least 1"));
    }
    if heads == 0 || heads % group_size != 0 {
        return Err(Error::invalid(format!(
            "{heads} heads cannot be split into groups of {group_size}"
        )));
    }
    Ok(())
}

/// Greedy grouping by pairwise similarity.
///
/// Seeding: while fewer than `h / group_size` groups exist, the unassigned
/// pair `(i, j)`, `i < j`, with the highest similarity opens a new group
/// (ties go to the lexicographically smallest pair). Filling: every remaining
/// head, in ascending order, joins the non-full group with the highest mean
/// similarity to its members (ties go to the lowest group index).
pub fn greedy_group(sim: &SimilarityMatrix, group_size: usize) -> Result<HeadGrouping> {
    let h = sim.heads();
    check_divisible(h, group_size)?;
    if group_size == 1 {
        return HeadGrouping::identity(h, 1);
    }
    let n_groups = h / group_size;
    let mut assigned = vec![false; h];
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(n_groups);

    while groups.len() < n_groups {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..h {
            if assigned[i] {
                continue;
            }
            for j in i + 1..h {
                if assigned[j] {
                    continue;
                }
                let s = sim.get(i, j);
                // strict comparison keeps the first (smallest) pair on ties
                if best.is_none_or(|(_, _, b)| s > b) {
                    best = Some((i, j, s));
                }
            }
        }
        let (i, j, _) = best.expect("fewer than two unassigned heads while seeding");
        assigned[i] = true;
        assigned[j] = true;
        groups.push(vec![i, j]);
    }

    for head in 0..h {
        if assigned[head] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in groups.iter().enumerate() {
            if g.len() >= group_size {
                continue;
            }
            let mean = g.iter().map(|&m| sim.get(head, m)).sum::<f64>() / g.len() as f64;
            if best.is_none_or(|(_, b)| mean > b) {
                best = Some((gi, mean));
            }
        }
        let (gi, _) = best.expect("no group with spare capacity");
        groups[gi].push(head);
        assigned[head] = true;
    }

    HeadGrouping::from_permutation(groups.concat(), group_size)
}

fn check_block_shape(m: &Matrix, g: &HeadGrouping, d_head: usize) -> Result<()> {
    if m.cols() != g.heads() * d_head {
        return Err(Error::shape(format!(
            "{} columns do not match {} heads of width {d_head}",
            m.cols(),
            g.heads()
        )));
    }
    Ok(())
}

/// Reorder column blocks: block at new position `p` is original block `π(p)`.
pub fn permute_heads(w: &Matrix, g: &HeadGrouping, d_head: usize) -> Result<Matrix> {
    check_block_shape(w, g, d_head)?;
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for (p, &orig) in g.permutation().iter().enumerate() {
        out.set_col_block(p * d_head, &w.col_block(orig * d_head, d_head));
    }
    Ok(out)
}

/// Inverse of [`permute_heads`]: restore original head order.
pub fn unpermute_outputs(y: &Matrix, g: &HeadGrouping, d_head: usize) -> Result<Matrix> {
    check_block_shape(y, g, d_head)?;
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for (p, &orig) in g.permutation().iter().enumerate() {
        out.set_col_block(orig * d_head, &y.col_block(p * d_head, d_head));
    }
    Ok(out)
}
