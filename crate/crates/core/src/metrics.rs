//! Alignment metrics, sparsity/FLOP accounting and pooled-path diagnostics.
//!
//! FLOP convention: two operations per multiply-accumulate, four per
//! softmax element (exp, subtract, add, divide), one per plain add or scale.

use crate::error::{Error, Result};
use crate::ipar::{implicit_full_attention, scaled_scores};
use crate::masks::{exact_gain_error, gain_error, SparseMask};
use crate::problem::{AttentionProblem, BlockGrid, PooledSet};
use crate::tensor::Matrix;

/// `Σ|test - reference| / Σ|reference|`.
pub fn normalized_l1(test: &Matrix, reference: &Matrix) -> Result<f64> {
    test.check_same_shape(reference)?;
    let denom: f64 = reference.data().iter().map(|x| x.abs()).sum();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num: f64 = test
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(num / denom)
}

/// Cosine of the angle between the flattened matrices.
pub fn cosine_similarity(test: &Matrix, reference: &Matrix) -> Result<f64> {
    test.check_same_shape(reference)?;
    let (mut dot, mut nt, mut nr) = (0.0, 0.0, 0.0);
    for (&a, &b) in test.data().iter().zip(reference.data()) {
        dot += a * b;
        nt += a * a;
        nr += b * b;
    }
    if nt == 0.0 || nr == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (nt.sqrt() * nr.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopReport {
    /// Fraction of block pairs skipped.
    pub sparsity: f64,
    pub flops_full: u64,
    pub flops_sparse: u64,
    pub flops_overhead: u64,
}

/// Operations spent on the pooled path: pooling, the mixed softmax and
/// reallocation, gain and error, mask selection, rectification.
pub fn pooled_path_flops(grid: &BlockGrid, d: usize) -> u64 {
    let (t_v, t_t) = (grid.t_video as u64, grid.t_text as u64);
    let (n, m, d) = (grid.n_q as u64, grid.n_kv as u64, d as u64);
    let t_kv = t_v + t_t;
    let mixed = n * (n + t_t);
    // One add per pooled element, one divide per pooled row entry.
    let pooling = (t_v + 2 * t_kv) * d + (n + 2 * m) * d;
    let implicit = 2 * mixed * d + 4 * mixed + 4 * mixed;
    let gain = 2 * n * m * d + 2 * n * m;
    // Centered block sums, then two dot products per block pair.
    let error = 2 * (t_v + t_kv) * d + 4 * n * m * d + 3 * n * m;
    let sparse_mask = n * m + 2 * n * m;
    let rectification = 2 * n * m * d + 2 * t_v * d + n * m;
    pooling + implicit + gain + error + sparse_mask + rectification
}

pub fn sparsity_and_flops(mask: &SparseMask, grid: &BlockGrid, d: usize) -> FlopReport {
    let retained = mask.mask.count();
    let sparsity = 1.0 - retained as f64 / (grid.n_q * grid.n_kv) as f64;
    let flops_full = 4 * (grid.t_video * grid.total_kv() * d) as u64;
    let flops_sparse: u64 = (0..grid.n_q)
        .map(|n| {
            mask.mask
                .retained(n)
                .map(|m| 4 * (grid.block * grid.kv_len(m) * d) as u64)
                .sum::<u64>()
        })
        .sum();
    FlopReport {
        sparsity,
        flops_full,
        flops_sparse,
        flops_overhead: pooled_path_flops(grid, d),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenominatorReport {
    /// Per video token `Σ_j exp(s_ij - c_i)`.
    pub s_sum: Vec<f64>,
    /// Per video token, the same sum from the pooled query of its block:
    /// `B · exp(s^pool - c_i)` per video key block plus one term per raw
    /// text key.
    pub s_sum_pool: Vec<f64>,
    pub satisfied_fraction: f64,
    pub tau: f64,
}

/// Compares each video token's true softmax denominator with the one implied
/// by the pooled path. Text keys stay at token granularity there, as in the
/// implicit attention, so only video key blocks are pooled. Both sums share
/// the shift `c_i = max(max_j s_ij, max of the pooled scores)`; a token
/// satisfies the check when `|S - S_pool| < tau · S`.
pub fn denominator_equivalence_report(
    problem: &AttentionProblem,
    pooled: &PooledSet,
    grid: &BlockGrid,
    tau: f64,
) -> Result<DenominatorReport> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Config(format!("tau {tau} must be non-negative")));
    }
    if pooled.k_mix_pool.rows() != grid.n_q + grid.t_text || pooled.q_pool.rows() != grid.n_q {
        return Err(Error::Shape("pooled set does not match the block grid".into()));
    }
    // N x (N + T_t): pooled video keys, then raw text keys.
    let pooled_scores = scaled_scores(&pooled.q_pool, &pooled.k_mix_pool)?;
    let d = problem.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let k = problem.k();
    let block = grid.block as f64;
    let mut s_sum = Vec::with_capacity(grid.t_video);
    let mut s_sum_pool = Vec::with_capacity(grid.t_video);
    let mut satisfied = 0usize;
    let mut scores = vec![0.0; k.rows()];
    for n in 0..grid.n_q {
        let pooled_row = pooled_scores.row(n);
        let pooled_max = pooled_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for i in grid.q_range(n) {
            let qi = problem.q_video().row(i);
            for (s, kj) in scores.iter_mut().zip(k.row_iter()) {
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let shift = scores.iter().copied().fold(pooled_max, f64::max);
            let exact: f64 = scores.iter().map(|&s| (s - shift).exp()).sum();
            let (video, text) = pooled_row.split_at(grid.n_q);
            let approx: f64 = video.iter().map(|&s| block * (s - shift).exp()).sum::<f64>()
                + text.iter().map(|&s| (s - shift).exp()).sum::<f64>();
            if (exact - approx).abs() < tau * exact.abs() {
                satisfied += 1;
            }
            s_sum.push(exact);
            s_sum_pool.push(approx);
        }
    }
    Ok(DenominatorReport {
        s_sum,
        s_sum_pool,
        satisfied_fraction: satisfied as f64 / grid.t_video as f64,
        tau,
    })
}

/// Fraction of block pairs where the relaxed score-space condition
/// `|G| > |E|` agrees with the weight-space condition computed from true
/// full attention.
pub fn gapr_condition_agreement(problem: &AttentionProblem, pooled: &PooledSet, grid: &BlockGrid) -> Result<f64> {
    let relaxed = gain_error(problem, pooled, grid)?;
    let implicit = implicit_full_attention(pooled, grid)?;
    let (exact_gain, exact_error) = exact_gain_error(problem, &implicit.a_pool, grid)?;
    let total = grid.n_q * grid.n_kv;
    let agree = (0..total)
        .filter(|&idx| {
            let r = relaxed.gain.data()[idx] > relaxed.error.data()[idx];
            let e = exact_gain.data()[idx] > exact_error.data()[idx];
            r == e
        })
        .count();
    Ok(agree as f64 / total as f64)
}

/// Everything measured for one variant of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub normalized_l1: f64,
    pub cosine_similarity: f64,
    pub sparsity: f64,
    pub flops_full: u64,
    pub flops_sparse: u64,
    pub flops_overhead: u64,
    /// Stage name and wall time in milliseconds.
    pub wall_time_ms: Vec<(String, f64)>,
    pub gapr_agreement: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::BlockMask;
    use crate::tensor::Precision;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows, Precision::Double).unwrap()
    }

    #[test]
    fn l1_examples() {
        let r = m(&[vec![0.5, 0.5]]);
        assert_eq!(normalized_l1(&r, &r).unwrap(), 0.0);
        assert!((normalized_l1(&m(&[vec![0.4, 0.6]]), &r).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(
            normalized_l1(&r, &m(&[vec![0.0, 0.0]])),
            Err(Error::ZeroReference)
        ));
    }

    #[test]
    fn cosine_examples() {
        let a = m(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = m(&[vec![-1.0, -2.0], vec![3.0, -0.5]]);
        assert!((cosine_similarity(&neg, &a).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&m(&[vec![1.0, 0.0]]), &m(&[vec![0.0, 1.0]])).unwrap(),
            0.0
        );
        assert!(matches!(
            cosine_similarity(&m(&[vec![0.0, 0.0]]), &m(&[vec![0.0, 1.0]])),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn sparsity_ratio() {
        let grid = BlockGrid::new(8, 8, 4).unwrap();
        let mask = SparseMask::from_mask(BlockMask::from_fn(2, 4, |n, m| n == m), &grid).unwrap();
        let r = sparsity_and_flops(&mask, &grid, 16);
        assert_eq!(r.sparsity, 0.75);
        assert_eq!(r.flops_sparse, 4 * 2 * 16 * 16);
    }

    #[test]
    fn full_mask_costs_full() {
        let grid = BlockGrid::new(8, 3, 4).unwrap();
        let r = sparsity_and_flops(&SparseMask::full(&grid), &grid, 8);
        assert_eq!(r.sparsity, 0.0);
        assert_eq!(r.flops_sparse, r.flops_full);
        assert_eq!(r.flops_full, 4 * 8 * 11 * 8);
    }
}
