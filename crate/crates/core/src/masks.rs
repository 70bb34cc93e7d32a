//! Sparse and compensation masks over `(query block, key block)` pairs.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::ipar::pooled_block_scores;
use crate::problem::{AttentionProblem, BlockGrid, PooledSet};
use crate::tensor::{dot, Matrix, Precision};

/// Boolean `rows x cols` block mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BlockMask {
    pub fn new(rows: usize, cols: usize, fill: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![fill; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize) -> bool {
        self.bits[n * self.cols + m]
    }

    pub fn set(&mut self, n: usize, m: usize, value: bool) {
        self.bits[n * self.cols + m] = value;
    }

    pub fn row(&self, n: usize) -> &[bool] {
        &self.bits[n * self.cols..(n + 1) * self.cols]
    }

    /// Retained block indices of row `n`, ascending.
    pub fn retained(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(n).iter().enumerate().filter(|(_, &b)| b).map(|(m, _)| m)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn row_counts(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|n| self.row(n).iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn all(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&n| !self.row(n).contains(&true))
    }

    pub fn union(&self, other: &BlockMask) -> BlockMask {
        self.zip(other, |a, b| a || b)
    }

    /// Entries set in `self` but not in `other`.
    pub fn and_not(&self, other: &BlockMask) -> BlockMask {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &BlockMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &BlockMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !(a && b))
    }

    fn zip(&self, other: &BlockMask, f: impl Fn(bool, bool) -> bool) -> BlockMask {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "mask shapes differ");
        BlockMask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub(crate) fn check_grid(&self, grid: &BlockGrid) -> Result<()> {
        if self.rows != grid.n_q || self.cols != grid.n_kv {
            return Err(Error::Shape(format!(
                "mask is {}x{}, grid is {}x{}",
                self.rows, self.cols, grid.n_q, grid.n_kv
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SparsityConfig {
    /// Fraction of key blocks each query block keeps at minimum.
    pub top_k_fraction: f64,
    /// Cumulative pooled weight the kept blocks must reach.
    pub weight_threshold: f64,
    /// Video blocks on each side of the diagonal kept unconditionally.
    pub adjacency_radius: usize,
    pub force_text_blocks: bool,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            top_k_fraction: 0.2,
            weight_threshold: 0.0,
            adjacency_radius: 1,
            force_text_blocks: true,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_k_fraction > 0.0 && self.top_k_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "top_k_fraction {} outside (0, 1]",
                self.top_k_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.weight_threshold) {
            return Err(Error::Config(format!(
                "weight threshold {} outside [0, 1]",
                self.weight_threshold
            )));
        }
        Ok(())
    }

    /// Minimum number of blocks kept per row out of `n_kv`.
    pub fn min_blocks(&self, n_kv: usize) -> usize {
        // Absorb representation error such as 0.1 * 30 = 3.0000000000000004.
        let k = (self.top_k_fraction * n_kv as f64 - 1e-9).ceil() as usize;
        k.clamp(1, n_kv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMask {
    /// Union of the importance, adjacency and forced-text masks.
    pub mask: BlockMask,
    pub importance: BlockMask,
    pub adjacency: BlockMask,
    pub retained_count: Vec<usize>,
}

impl SparseMask {
    /// A mask that keeps every block.
    pub fn full(grid: &BlockGrid) -> Self {
        let all = BlockMask::new(grid.n_q, grid.n_kv, true);
        Self {
            retained_count: all.row_counts(),
            mask: all.clone(),
            importance: all,
            adjacency: BlockMask::new(grid.n_q, grid.n_kv, false),
        }
    }

    /// Wraps an explicit block mask (no importance/adjacency breakdown).
    pub fn from_mask(mask: BlockMask, grid: &BlockGrid) -> Result<Self> {
        mask.check_grid(grid)?;
        if let Some(row) = mask.first_empty_row() {
            return Err(Error::EmptyRow { row });
        }
        Ok(Self {
            retained_count: mask.row_counts(),
            importance: mask.clone(),
            adjacency: BlockMask::new(grid.n_q, grid.n_kv, false),
            mask,
        })
    }
}

/// Greedy importance selection plus adjacency and forced text blocks.
///
/// Each row visits blocks by descending pooled weight (ties by ascending
/// index) and keeps them until both the top-k count floor and the
/// cumulative weight target are met.
pub fn build_sparse_mask(a_pool: &Matrix, config: &SparsityConfig, grid: &BlockGrid) -> Result<SparseMask> {
    config.validate()?;
    if a_pool.rows() != grid.n_q || a_pool.cols() != grid.n_kv {
        return Err(Error::Shape("pooled attention does not match the block grid".into()));
    }
    let (n_q, n_kv) = (grid.n_q, grid.n_kv);
    let k_min = config.min_blocks(n_kv);
    let mut importance = BlockMask::new(n_q, n_kv, false);
    let mut order: Vec<usize> = Vec::with_capacity(n_kv);
    for n in 0..n_q {
        let row = a_pool.row(n);
        order.clear();
        order.extend(0..n_kv);
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
        let mut cumulative = 0.0;
        for (kept, &m) in order.iter().enumerate() {
            if kept >= k_min && cumulative >= config.weight_threshold {
                break;
            }
            importance.set(n, m, true);
            cumulative += row[m];
        }
    }
    let r = config.adjacency_radius;
    let adjacency = BlockMask::from_fn(n_q, n_kv, |n, m| {
        (m < grid.n_q && m.abs_diff(n) <= r) || (config.force_text_blocks && grid.is_text_block(m))
    });
    let mask = importance.union(&adjacency);
    Ok(SparseMask {
        retained_count: mask.row_counts(),
        mask,
        importance,
        adjacency,
    })
}

/// Attention gain and pooling error per block pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GainError {
    /// `|Σ_{i,j} s^pool_{i,j}|` over the block pair.
    pub gain: Matrix,
    /// `|Σ_{i,j} Δs_{i,j}|` over the block pair, first-order terms only.
    pub error: Matrix,
    /// Weight-space gain `Σ_{i,j} a^pool_{i,j}`, when computed.
    pub exact_gain: Option<Matrix>,
    /// Weight-space error `Σ_{i,j} |a_{i,j} - a^pool_{i,j}|`, when computed.
    pub exact_error: Option<Matrix>,
}

/// Relaxed attention gain: the pooled block score replicated over the
/// block pair and summed, `|B_q · B_k · s^pool|`.
pub fn attention_gain(scores_pool: &Matrix, grid: &BlockGrid) -> Result<Matrix> {
    if scores_pool.rows() != grid.n_q || scores_pool.cols() != grid.n_kv {
        return Err(Error::Shape("pooled scores do not match the block grid".into()));
    }
    let mut out = Vec::with_capacity(grid.n_q * grid.n_kv);
    for n in 0..grid.n_q {
        let bq = grid.block as f64;
        for m in 0..grid.n_kv {
            out.push((bq * grid.kv_len(m) as f64 * scores_pool.get(n, m)).abs());
        }
    }
    Ok(Matrix::from_parts(grid.n_q, grid.n_kv, out, Precision::Double))
}

/// Column sums of `x - pooled_row` over each block, one `d`-vector per block.
fn centered_block_sums(x: &Matrix, pooled: &Matrix, lens: &[usize]) -> Vec<Vec<f64>> {
    let mut start = 0;
    lens.iter()
        .enumerate()
        .map(|(b, &len)| {
            let centre = pooled.row(b);
            let mut acc = vec![0.0; x.cols()];
            for i in start..start + len {
                for ((a, &xi), &c) in acc.iter_mut().zip(x.row(i)).zip(centre) {
                    *a += xi - c;
                }
            }
            start += len;
            acc
        })
        .collect()
}

/// Relaxed pooling error from the first-order score decomposition
///
/// `Σ_{i∈n, j∈m} Δs_{i,j} = [B_k · Σ_i (q_i - q̄_n) · k̄_m + B_q · q̄_n · Σ_j (k_j - k̄_m)] / √d`
///
/// evaluated without forming token pairs. Both centered sums vanish up to
/// rounding on full blocks.
pub fn pooling_error(problem: &AttentionProblem, pooled: &PooledSet, grid: &BlockGrid) -> Result<Matrix> {
    if pooled.q_pool.rows() != grid.n_q || pooled.k_pool.rows() != grid.n_kv {
        return Err(Error::Shape("pooled set does not match the block grid".into()));
    }
    let d = problem.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let dq = centered_block_sums(problem.q_video(), &pooled.q_pool, &grid.q_block_lens());
    let dk = centered_block_sums(problem.k(), &pooled.k_pool, &grid.kv_block_lens());
    let mut out = Vec::with_capacity(grid.n_q * grid.n_kv);
    let bq = grid.block as f64;
    for (n, dq_n) in dq.iter().enumerate() {
        let qn = pooled.q_pool.row(n);
        for (m, dk_m) in dk.iter().enumerate() {
            let bk = grid.kv_len(m) as f64;
            let first = bk * dot(dq_n, pooled.k_pool.row(m));
            let second = bq * dot(qn, dk_m);
            out.push(((first + second) * scale).abs());
        }
    }
    Ok(Matrix::from_parts(grid.n_q, grid.n_kv, out, Precision::Double))
}

/// Relaxed gain and error for every block pair.
pub fn gain_error(problem: &AttentionProblem, pooled: &PooledSet, grid: &BlockGrid) -> Result<GainError> {
    let scores = pooled_block_scores(pooled)?;
    Ok(GainError {
        gain: attention_gain(&scores, grid)?,
        error: pooling_error(problem, pooled, grid)?,
        exact_gain: None,
        exact_error: None,
    })
}

/// Weight-space gain and error against true full attention, computed by
/// brute force. `a_pool[n, m]` is spread uniformly over the key tokens of
/// block `m` and replicated over the queries of block `n`.
pub fn exact_gain_error(problem: &AttentionProblem, a_pool: &Matrix, grid: &BlockGrid) -> Result<(Matrix, Matrix)> {
    let (weights, _) = crate::oracle::full_attention_oracle(problem.q_video(), problem.k(), problem.v())?;
    let mut gain = Vec::with_capacity(grid.n_q * grid.n_kv);
    let mut error = Vec::with_capacity(grid.n_q * grid.n_kv);
    for n in 0..grid.n_q {
        for m in 0..grid.n_kv {
            let block_len = grid.kv_len(m) as f64;
            let token_weight = a_pool.get(n, m) / block_len;
            gain.push(grid.block as f64 * a_pool.get(n, m));
            let mut e = 0.0;
            for i in grid.q_range(n) {
                let row = &weights.row(i)[grid.kv_range(m)];
                e += row.iter().map(|&a| (a - token_weight).abs()).sum::<f64>();
            }
            error.push(e);
        }
    }
    Ok((
        Matrix::from_parts(grid.n_q, grid.n_kv, gain, Precision::Double),
        Matrix::from_parts(grid.n_q, grid.n_kv, error, Precision::Double),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationMask {
    pub mask: BlockMask,
}

impl CompensationMask {
    pub fn none(grid: &BlockGrid) -> Self {
        Self {
            mask: BlockMask::new(grid.n_q, grid.n_kv, false),
        }
    }

    pub fn all(grid: &BlockGrid) -> Self {
        Self {
            mask: BlockMask::new(grid.n_q, grid.n_kv, true),
        }
    }

    /// Blocks that are both excluded from the sparse mask and compensated.
    pub fn applied(&self, sparse: &SparseMask) -> BlockMask {
        self.mask.and_not(&sparse.mask)
    }
}

/// `M_c[n, m] = gain[n, m] > error[n, m]`, strictly.
pub fn compensation_mask(gain: &Matrix, error: &Matrix, sparse: &SparseMask) -> Result<CompensationMask> {
    gain.check_same_shape(error)?;
    if gain.rows() != sparse.mask.rows() || gain.cols() != sparse.mask.cols() {
        return Err(Error::Shape("gain/error do not match the sparse mask".into()));
    }
    Ok(CompensationMask {
        mask: BlockMask::from_fn(gain.rows(), gain.cols(), |n, m| gain.get(n, m) > error.get(n, m)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(top_k_fraction: f64, weight_threshold: f64, adjacency_radius: usize) -> SparsityConfig {
        SparsityConfig {
            top_k_fraction,
            weight_threshold,
            adjacency_radius,
            force_text_blocks: false,
        }
    }

    #[test]
    fn top_k_one_keeps_everything() {
        let grid = BlockGrid::new(12, 0, 4).unwrap();
        let a = Matrix::from_rows(
            &[vec![0.9, 0.05, 0.05], vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0]],
            Precision::Double,
        )
        .unwrap();
        let s = build_sparse_mask(&a, &config(1.0, 0.0, 0), &grid).unwrap();
        assert!(s.mask.all());
    }

    #[test]
    fn threshold_extends_past_top_k() {
        let grid = BlockGrid::new(12, 0, 4).unwrap();
        // Only row 0 is interesting; other rows keep their diagonal.
        let a = Matrix::from_rows(
            &[vec![0.5, 0.3, 0.2], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            Precision::Double,
        )
        .unwrap();
        let s = build_sparse_mask(&a, &config(1.0 / 3.0, 0.7, 0), &grid).unwrap();
        assert_eq!(s.mask.row(0), &[true, true, false]);
    }

    #[test]
    fn uniform_weights_with_adjacency() {
        let grid = BlockGrid::new(32, 0, 4).unwrap();
        let a = Matrix::new(8, 8, vec![0.125; 64], Precision::Double).unwrap();
        let s = build_sparse_mask(&a, &config(0.25, 0.0, 1), &grid).unwrap();
        for n in 0..8usize {
            let expected: Vec<usize> = {
                let mut v: Vec<usize> = (n.saturating_sub(1)..=(n + 1).min(7)).chain([0, 1]).collect();
                v.sort_unstable();
                v.dedup();
                v
            };
            assert_eq!(s.mask.retained(n).collect::<Vec<_>>(), expected, "row {n}");
        }
        // Hand count: 33 of 64 pairs kept.
        assert_eq!(s.retained_count, vec![2, 3, 4, 5, 5, 5, 5, 4]);
        assert_eq!(
            crate::metrics::sparsity_and_flops(&s, &grid, 4).sparsity,
            1.0 - 33.0 / 64.0
        );
    }

    #[test]
    fn forced_text_blocks() {
        let grid = BlockGrid::new(8, 3, 4).unwrap();
        let a = Matrix::from_rows(&[vec![0.9, 0.1, 0.0], vec![0.1, 0.9, 0.0]], Precision::Double).unwrap();
        let mut c = config(0.1, 0.0, 0);
        c.force_text_blocks = true;
        let s = build_sparse_mask(&a, &c, &grid).unwrap();
        assert_eq!(s.mask.row(0), &[true, false, true]);
        assert_eq!(s.mask.row(1), &[false, true, true]);
    }

    #[test]
    fn invalid_config() {
        let grid = BlockGrid::new(4, 0, 4).unwrap();
        let a = Matrix::new(1, 1, vec![1.0], Precision::Double).unwrap();
        for c in [
            config(0.0, 0.0, 0),
            config(1.5, 0.0, 0),
            config(0.5, -0.1, 0),
            config(0.5, f64::NAN, 0),
        ] {
            assert!(matches!(build_sparse_mask(&a, &c, &grid), Err(Error::Config(_))));
        }
    }

    #[test]
    fn gain_degenerate_cases() {
        let grid = BlockGrid::new(2, 0, 1).unwrap();
        let s = Matrix::from_rows(&[vec![0.0, -1.5], vec![2.0, 0.25]], Precision::Double).unwrap();
        let g = attention_gain(&s, &grid).unwrap();
        assert_eq!(g.data(), &[0.0, 1.5, 2.0, 0.25]);
    }

    #[test]
    fn compensation_is_strict() {
        let grid = BlockGrid::new(4, 0, 2).unwrap();
        let sparse = SparseMask::full(&grid);
        let g = Matrix::new(2, 2, vec![1.0, 2.0, 0.5, 0.0], Precision::Double).unwrap();
        let c = compensation_mask(&g, &g, &sparse).unwrap();
        assert_eq!(c.mask.count(), 0);
        let zero = Matrix::zeros(2, 2, Precision::Double);
        let c = compensation_mask(&g, &zero, &sparse).unwrap();
        assert_eq!(c.mask.count(), 3);
    }

    #[test]
    fn min_blocks_absorbs_rounding() {
        assert_eq!(config(0.1, 0.0, 0).min_blocks(30), 3);
        assert_eq!(config(0.2, 0.0, 0).min_blocks(34), 7);
        assert_eq!(config(1e-6, 0.0, 0).min_blocks(34), 1);
    }
}
