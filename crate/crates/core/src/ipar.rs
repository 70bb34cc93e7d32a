//! Implicit full attention from pooled query-key interactions.
//!
//! Video keys are pooled per block while text keys stay at token
//! granularity. The resulting mixed-granularity softmax is reweighted so
//! each video block carries the mass of its `B` tokens, renormalized per row,
//! and the text columns are summed back into blocks. The output `a_pool` is a
//! per-query-block distribution over all `M` key blocks.

use crate::error::{Error, Result};
use crate::problem::{BlockGrid, PooledSet};
use crate::tensor::{dot, softmax_in_place, Matrix, Precision};

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitAttention {
    /// Block-level implicit full attention, `N x M`.
    pub a_pool: Matrix,
    /// Mixed-granularity softmax before reallocation, `N x (N + T_t)`.
    pub a_mix_pool: Matrix,
    /// Reallocated video block masses, `N x N`.
    pub a_v_reallocated: Matrix,
    /// Reallocated text token weights, `N x T_t`.
    pub a_t_reallocated: Matrix,
    /// Reallocated text weights summed per text block, `N x (M - N)`.
    pub a_t_block: Matrix,
}

/// Raw scaled scores `q · kᵀ / √d` between every pair of rows.
pub fn scaled_scores(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!("{} vs {} columns", q.cols(), k.cols())));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut out = Vec::with_capacity(q.rows() * k.rows());
    for qi in q.row_iter() {
        out.extend(k.row_iter().map(|kj| dot(qi, kj) * scale));
    }
    Ok(Matrix::from_parts(q.rows(), k.rows(), out, Precision::Double))
}

fn row_softmax(scores: Matrix) -> Matrix {
    let (rows, cols) = (scores.rows(), scores.cols());
    let mut data = scores.into_data();
    if cols > 0 {
        data.chunks_exact_mut(cols).for_each(softmax_in_place);
    }
    Matrix::from_parts(rows, cols, data, Precision::Double)
}

/// Pre-softmax pooled block scores `q_pool · k_poolᵀ / √d`, `N x M`.
pub fn pooled_block_scores(pooled: &PooledSet) -> Result<Matrix> {
    scaled_scores(&pooled.q_pool, &pooled.k_pool)
}

/// Softmax of pooled queries against pooled video keys and raw text keys.
pub fn mixed_pooled_attention(pooled: &PooledSet) -> Result<Matrix> {
    if pooled.k_mix_pool.rows() < pooled.k_v_pool.rows() {
        return Err(Error::Shape("mixed keys must start with the pooled video keys".into()));
    }
    Ok(row_softmax(scaled_scores(&pooled.q_pool, &pooled.k_mix_pool)?))
}

/// Softmax over every key block pooled uniformly, text included. This is
/// the baseline that IPAR improves on.
pub fn direct_pooled_attention(pooled: &PooledSet) -> Result<Matrix> {
    Ok(row_softmax(pooled_block_scores(pooled)?))
}

/// Rescales video block weights by the block size and renormalizes each row
/// together with the text token weights.
///
/// Returns `(video block masses N x N, text token weights N x T_t)`; each row
/// of the pair sums to one.
pub fn reallocate(a_mix: &Matrix, grid: &BlockGrid) -> Result<(Matrix, Matrix)> {
    let (n_q, t_t) = (grid.n_q, grid.t_text);
    if a_mix.rows() != n_q || a_mix.cols() != n_q + t_t {
        return Err(Error::Shape(format!(
            "mixed weights are {}x{}, expected {n_q}x{}",
            a_mix.rows(),
            a_mix.cols(),
            n_q + t_t
        )));
    }
    let b = grid.block as f64;
    let mut video = Vec::with_capacity(n_q * n_q);
    let mut text = Vec::with_capacity(n_q * t_t);
    for (row, r) in a_mix.row_iter().enumerate() {
        let (av, at) = r.split_at(n_q);
        let denom = b * av.iter().sum::<f64>() + at.iter().sum::<f64>();
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::DegenerateRow { row });
        }
        video.extend(av.iter().map(|&x| b * x / denom));
        text.extend(at.iter().map(|&x| x / denom));
    }
    Ok((
        Matrix::from_parts(n_q, n_q, video, Precision::Double),
        Matrix::from_parts(n_q, t_t, text, Precision::Double),
    ))
}

/// Builds the block-level implicit full attention `a_pool`.
pub fn implicit_full_attention(pooled: &PooledSet, grid: &BlockGrid) -> Result<ImplicitAttention> {
    if pooled.q_pool.rows() != grid.n_q || pooled.k_mix_pool.rows() != grid.n_q + grid.t_text {
        return Err(Error::Shape("pooled set does not match the block grid".into()));
    }
    let a_mix_pool = mixed_pooled_attention(pooled)?;
    let (a_v, a_t) = reallocate(&a_mix_pool, grid)?;
    let text_blocks = grid.text_blocks();
    let mut a_t_block = Vec::with_capacity(grid.n_q * text_blocks);
    let mut a_pool = Vec::with_capacity(grid.n_q * grid.n_kv);
    for n in 0..grid.n_q {
        let t_row = a_t.row(n);
        let start = a_t_block.len();
        for tb in 0..text_blocks {
            let r = grid.kv_range(grid.text_block_start + tb);
            let (lo, hi) = (r.start - grid.t_video, r.end - grid.t_video);
            a_t_block.push(t_row[lo..hi].iter().sum::<f64>());
        }
        a_pool.extend_from_slice(a_v.row(n));
        a_pool.extend_from_slice(&a_t_block[start..]);
    }
    Ok(ImplicitAttention {
        a_pool: Matrix::from_parts(grid.n_q, grid.n_kv, a_pool, Precision::Double),
        a_mix_pool,
        a_v_reallocated: a_v,
        a_t_reallocated: a_t,
        a_t_block: Matrix::from_parts(grid.n_q, text_blocks, a_t_block, Precision::Double),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows, Precision::Double).unwrap()
    }

    #[test]
    fn reallocate_formula() {
        // B = 4: D = 4 * 0.2 + 0.8 = 1.6.
        let grid = BlockGrid::new(4, 1, 4).unwrap();
        let a = m(&[vec![0.2, 0.8]]);
        let (v, t) = reallocate(&a, &grid).unwrap();
        assert!((v.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((t.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reallocate_text_free() {
        let grid = BlockGrid::new(12, 0, 4).unwrap();
        let a = m(&[vec![0.5, 0.25, 0.25], vec![0.1, 0.6, 0.3], vec![0.2, 0.2, 0.6]]);
        let (v, t) = reallocate(&a, &grid).unwrap();
        assert_eq!(t.cols(), 0);
        assert!(v.max_abs_diff(&a).unwrap() < 1e-15);
    }

    #[test]
    fn reallocate_unit_block_is_identity() {
        let grid = BlockGrid::new(2, 2, 1).unwrap();
        let a = m(&[vec![0.125, 0.375, 0.25, 0.25], vec![0.25, 0.25, 0.25, 0.25]]);
        let (v, t) = reallocate(&a, &grid).unwrap();
        assert_eq!(v.row(0), &[0.125, 0.375]);
        assert_eq!(t.row(0), &[0.25, 0.25]);
        assert_eq!(v.row(1), &[0.25, 0.25]);
    }

    #[test]
    fn reallocate_rejects_zero_row() {
        let grid = BlockGrid::new(2, 1, 2).unwrap();
        let a = m(&[vec![0.0, 0.0]]);
        assert!(matches!(reallocate(&a, &grid), Err(Error::DegenerateRow { row: 0 })));
    }

    #[test]
    fn reallocate_shape_check() {
        let grid = BlockGrid::new(4, 1, 2).unwrap();
        assert!(matches!(reallocate(&m(&[vec![1.0]]), &grid), Err(Error::Shape(_))));
    }
}
