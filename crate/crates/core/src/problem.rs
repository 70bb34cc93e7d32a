//! Attention problems, block geometry and uniform block pooling.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Precision};

/// Default block size for both queries and keys.
pub const DEFAULT_BLOCK: usize = 128;

/// Token-grid shape `(t, h, w)` of the video tokens.
pub type GridDims = (usize, usize, usize);

/// One attention head over a joint video+text sequence.
///
/// Keys and values hold the video tokens in rows `[0, T_v)` followed by the
/// text tokens in rows `[T_v, T_v + T_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProblem {
    q_video: Matrix,
    q_text: Matrix,
    k: Matrix,
    v: Matrix,
    block: usize,
    grid_dims: Option<GridDims>,
}

impl AttentionProblem {
    pub fn new(
        q_video: Matrix,
        q_text: Matrix,
        k: Matrix,
        v: Matrix,
        block: usize,
        grid_dims: Option<GridDims>,
    ) -> Result<Self> {
        let d = q_video.cols();
        let t_v = q_video.rows();
        let t_t = q_text.rows();
        if d == 0 {
            return Err(Error::Shape("head dimension must be positive".into()));
        }
        for (name, m) in [("q_text", &q_text), ("k", &k), ("v", &v)] {
            if m.cols() != d && m.rows() > 0 {
                return Err(Error::Shape(format!("{name} has {} columns, expected {d}", m.cols())));
            }
        }
        if k.rows() != t_v + t_t || v.rows() != t_v + t_t {
            return Err(Error::Shape(format!(
                "keys/values have {}/{} rows, expected {}",
                k.rows(),
                v.rows(),
                t_v + t_t
            )));
        }
        if let Some((t, h, w)) = grid_dims {
            if t * h * w != t_v {
                return Err(Error::Shape(format!(
                    "grid {t}x{h}x{w} does not cover {t_v} video tokens"
                )));
            }
        }
        BlockGrid::new(t_v, t_t, block)?;
        // An empty text query matrix may come in with zero columns.
        let q_text = if t_t == 0 && q_text.cols() != d {
            Matrix::zeros(0, d, q_video.precision())
        } else {
            q_text
        };
        Ok(Self {
            q_video,
            q_text,
            k,
            v,
            block,
            grid_dims,
        })
    }

    pub fn q_video(&self) -> &Matrix {
        &self.q_video
    }

    pub fn q_text(&self) -> &Matrix {
        &self.q_text
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn grid_dims(&self) -> Option<GridDims> {
        self.grid_dims
    }

    pub fn head_dim(&self) -> usize {
        self.q_video.cols()
    }

    pub fn t_video(&self) -> usize {
        self.q_video.rows()
    }

    pub fn t_text(&self) -> usize {
        self.q_text.rows()
    }

    pub fn precision(&self) -> Precision {
        self.q_video.precision()
    }

    /// All queries, video rows first.
    pub fn q_all(&self) -> Matrix {
        self.q_video.vstack(&self.q_text).expect("validated shapes")
    }

    pub fn to_precision(&self, precision: Precision) -> AttentionProblem {
        AttentionProblem {
            q_video: self.q_video.to_precision(precision),
            q_text: self.q_text.to_precision(precision),
            k: self.k.to_precision(precision),
            v: self.v.to_precision(precision),
            block: self.block,
            grid_dims: self.grid_dims,
        }
    }

    pub(crate) fn with_video(&self, q_video: Matrix, k: Matrix, v: Matrix) -> AttentionProblem {
        AttentionProblem {
            q_video,
            q_text: self.q_text.clone(),
            k,
            v,
            block: self.block,
            grid_dims: self.grid_dims,
        }
    }
}

/// Block geometry: `N` video query blocks and `M = N + ceil(T_t / B)` key blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGrid {
    pub n_q: usize,
    pub n_kv: usize,
    pub block: usize,
    pub text_block_start: usize,
    pub last_text_block_len: usize,
    pub t_video: usize,
    pub t_text: usize,
}

impl BlockGrid {
    pub fn new(t_video: usize, t_text: usize, block: usize) -> Result<Self> {
        if block == 0 {
            return Err(Error::BlockSize("block size must be positive".into()));
        }
        if t_video == 0 {
            return Err(Error::BlockSize("at least one video block is required".into()));
        }
        if !t_video.is_multiple_of(block) {
            return Err(Error::BlockSize(format!(
                "{t_video} video tokens do not fill whole blocks of {block}"
            )));
        }
        let n_q = t_video / block;
        let text_blocks = t_text.div_ceil(block);
        let last_text_block_len = if t_text == 0 {
            0
        } else {
            t_text - (text_blocks - 1) * block
        };
        Ok(Self {
            n_q,
            n_kv: n_q + text_blocks,
            block,
            text_block_start: n_q,
            last_text_block_len,
            t_video,
            t_text,
        })
    }

    pub fn text_blocks(&self) -> usize {
        self.n_kv - self.n_q
    }

    pub fn is_text_block(&self, m: usize) -> bool {
        m >= self.text_block_start
    }

    /// Token rows of video query block `n`.
    pub fn q_range(&self, n: usize) -> Range<usize> {
        n * self.block..(n + 1) * self.block
    }

    /// Token rows of key/value block `m` (the last text block may be short).
    pub fn kv_range(&self, m: usize) -> Range<usize> {
        let start = m * self.block;
        let end = ((m + 1) * self.block).min(self.t_video + self.t_text);
        start..end
    }

    pub fn kv_len(&self, m: usize) -> usize {
        self.kv_range(m).len()
    }

    pub fn q_block_lens(&self) -> Vec<usize> {
        vec![self.block; self.n_q]
    }

    pub fn kv_block_lens(&self) -> Vec<usize> {
        (0..self.n_kv).map(|m| self.kv_len(m)).collect()
    }

    pub fn total_kv(&self) -> usize {
        self.t_video + self.t_text
    }
}

pub fn partition(problem: &AttentionProblem) -> Result<BlockGrid> {
    BlockGrid::new(problem.t_video(), problem.t_text(), problem.block())
}

/// Mean of each consecutive block of rows.
///
/// The mean is taken around the block's first row, so a block of identical
/// rows pools to exactly that row.
pub fn block_pool(x: &Matrix, block_lens: &[usize]) -> Result<Matrix> {
    let total: usize = block_lens.iter().sum();
    if total != x.rows() {
        return Err(Error::Shape(format!(
            "block lengths cover {total} rows, matrix has {}",
            x.rows()
        )));
    }
    if block_lens.contains(&0) {
        return Err(Error::Shape("block length must be at least 1".into()));
    }
    let d = x.cols();
    let mut out = Vec::with_capacity(block_lens.len() * d);
    let mut start = 0;
    let mut acc = vec![0.0; d];
    for &len in block_lens {
        let first = x.row(start);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in start + 1..start + len {
            for ((a, &xi), &f) in acc.iter_mut().zip(x.row(i)).zip(first) {
                *a += xi - f;
            }
        }
        out.extend(first.iter().zip(&acc).map(|(&f, &a)| f + a / len as f64));
        start += len;
    }
    Ok(Matrix::from_parts(
        block_lens.len(),
        d,
        out,
        crate::tensor::Precision::Double,
    ))
}

/// Block-pooled representations shared by every pooled-path stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSet {
    /// Pooled video queries, `N x d`.
    pub q_pool: Matrix,
    /// Pooled video keys, `N x d`.
    pub k_v_pool: Matrix,
    /// Pooled keys over every key block (text blocks included), `M x d`.
    pub k_pool: Matrix,
    /// Pooled values over every key block, `M x d`.
    pub v_pool: Matrix,
    /// Pooled video keys followed by raw text keys, `(N + T_t) x d`.
    pub k_mix_pool: Matrix,
}

impl PooledSet {
    pub fn from_problem(problem: &AttentionProblem, grid: &BlockGrid) -> Result<Self> {
        let q_pool = block_pool(problem.q_video(), &grid.q_block_lens())?;
        let kv_lens = grid.kv_block_lens();
        let k_pool = block_pool(problem.k(), &kv_lens)?;
        let v_pool = block_pool(problem.v(), &kv_lens)?;
        let k_v_pool = k_pool.slice_rows(0, grid.n_q);
        let k_text = problem
            .k()
            .slice_rows(grid.t_video, grid.total_kv())
            .to_precision(Precision::Double);
        let k_mix_pool = k_v_pool.vstack(&k_text)?;
        Ok(Self {
            q_pool,
            k_v_pool,
            k_pool,
            v_pool,
            k_mix_pool,
        })
    }
}
