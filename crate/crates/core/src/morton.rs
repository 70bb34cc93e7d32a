//! Z-order (Morton) reordering of video tokens over their `(t, h, w)` grid.

use crate::error::{Error, Result};
use crate::problem::AttentionProblem;
use crate::tensor::Matrix;

/// Spreads the low 21 bits of `x` so that bit `i` lands on bit `3i`.
#[inline]
fn spread3(x: u64) -> u64 {
    let mut x = x & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

/// Morton code with `w` in the least significant position, then `h`, then `t`.
pub fn morton_code(t: usize, h: usize, w: usize) -> u64 {
    spread3(w as u64) | (spread3(h as u64) << 1) | (spread3(t as u64) << 2)
}

/// Token order for a `(t, h, w)` grid: `order[new] = old` row-major index.
pub fn morton_order(dims: (usize, usize, usize)) -> Vec<usize> {
    let (t, h, w) = dims;
    let mut keyed: Vec<(u64, usize)> = (0..t * h * w)
        .map(|idx| {
            let (ti, rest) = (idx / (h * w), idx % (h * w));
            (morton_code(ti, rest / w, rest % w), idx)
        })
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, idx)| idx).collect()
}

/// A row permutation: `order[new] = old`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &o in &order {
            if o >= order.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Shape("not a permutation".into()));
            }
        }
        Ok(Self { order })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
        }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.order.len()];
        for (new, &old) in self.order.iter().enumerate() {
            inv[old] = new;
        }
        Permutation { order: inv }
    }

    /// Permutes the first `len()` rows of `x`; later rows are kept in place.
    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        let d = x.cols();
        let mut data = Vec::with_capacity(x.data().len());
        for &old in &self.order {
            data.extend_from_slice(x.row(old));
        }
        data.extend_from_slice(&x.data()[self.order.len() * d..]);
        Matrix::from_parts(x.rows(), d, data, x.precision())
    }
}

/// Reorders the video tokens of `problem` along the Morton curve of its grid.
/// Text tokens keep their positions.
pub fn reorder_morton(problem: &AttentionProblem) -> Result<(AttentionProblem, Permutation)> {
    let dims = problem.grid_dims().ok_or(Error::MissingGrid)?;
    let perm = Permutation {
        order: morton_order(dims),
    };
    Ok((apply_permutation(problem, &perm), perm))
}

/// Applies a video-token permutation to queries, keys and values.
pub fn apply_permutation(problem: &AttentionProblem, perm: &Permutation) -> AttentionProblem {
    problem.with_video(
        perm.apply_rows(problem.q_video()),
        perm.apply_rows(problem.k()),
        perm.apply_rows(problem.v()),
    )
}
