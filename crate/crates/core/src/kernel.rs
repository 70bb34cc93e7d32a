//! Block-sparse attention with an online softmax.
//!
//! Each video query block streams over its retained key blocks in ascending
//! order, keeping a running row maximum, a running denominator and a running
//! weighted sum of values. Skipped blocks cost nothing. Query blocks are
//! independent and run in parallel; every row is reduced sequentially so the
//! result does not depend on the thread count.

use std::ops::{Add, AddAssign, Mul, Range, Sub};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::masks::SparseMask;
use crate::problem::{AttentionProblem, BlockGrid};
use crate::tensor::{Matrix, Precision};

/// Query/key tile used for text queries, which have no block grid of their own.
pub const TEXT_TILE: usize = 64;

trait Real:
    Copy + Send + Sync + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + AddAssign
{
    const ZERO: Self;
    const NEG_INF: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f32::NEG_INFINITY;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const NEG_INF: Self = f64::NEG_INFINITY;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelStats {
    /// Query-key multiply-accumulates actually performed.
    pub score_macs: u64,
    /// Weight-value multiply-accumulates actually performed.
    pub value_macs: u64,
    /// Key blocks visited, summed over query tiles.
    pub tiles: u64,
}

impl KernelStats {
    fn merge(self, other: KernelStats) -> KernelStats {
        KernelStats {
            score_macs: self.score_macs + other.score_macs,
            value_macs: self.value_macs + other.value_macs,
            tiles: self.tiles + other.tiles,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub o_video: Matrix,
    pub o_text: Matrix,
    /// `ln Σ exp(s)` over the retained keys of each video token.
    pub row_log_denominators: Vec<f64>,
}

impl AttentionOutput {
    /// Video rows followed by text rows.
    pub fn concat(&self) -> Matrix {
        self.o_video.vstack(&self.o_text).expect("same width")
    }
}

/// Online-softmax attention of a tile of query rows over a list of key ranges.
fn attend_tile<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    key_ranges: &[Range<usize>],
    out: &mut [T],
    log_denominators: &mut [f64],
) -> KernelStats {
    let rows = q.len() / d;
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut running_max = vec![T::NEG_INF; rows];
    let mut denom = vec![T::ZERO; rows];
    let mut scores: Vec<T> = Vec::new();
    out.iter_mut().for_each(|o| *o = T::ZERO);
    let mut stats = KernelStats::default();
    for range in key_ranges {
        let cols = range.len();
        scores.resize(cols, T::ZERO);
        for i in 0..rows {
            let qi = &q[i * d..(i + 1) * d];
            let mut tile_max = T::NEG_INF;
            for (s, j) in scores.iter_mut().zip(range.clone()) {
                *s = dot(qi, &k[j * d..(j + 1) * d]) * scale;
                if *s > tile_max {
                    tile_max = *s;
                }
            }
            let acc = &mut out[i * d..(i + 1) * d];
            let prev = running_max[i];
            if tile_max > prev {
                // The first visited tile has prev = -inf and nothing to rescale.
                if prev != T::NEG_INF {
                    let correction = (prev - tile_max).exp();
                    denom[i] = denom[i] * correction;
                    acc.iter_mut().for_each(|a| *a = *a * correction);
                }
                running_max[i] = tile_max;
            }
            let m = running_max[i];
            for (&s, j) in scores.iter().zip(range.clone()) {
                let p = (s - m).exp();
                denom[i] += p;
                for (a, &vj) in acc.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *a += p * vj;
                }
            }
        }
        let macs = (rows * cols * d) as u64;
        stats.score_macs += macs;
        stats.value_macs += macs;
        stats.tiles += 1;
    }
    for i in 0..rows {
        let l = denom[i];
        out[i * d..(i + 1) * d]
            .iter_mut()
            .for_each(|a| *a = T::from_f64(a.to_f64() / l.to_f64()));
        log_denominators[i] = running_max[i].to_f64() + l.to_f64().ln();
    }
    stats
}

fn to_vec<T: Real>(m: &Matrix) -> Vec<T> {
    m.data().iter().map(|&x| T::from_f64(x)).collect()
}

/// Runs `attend_tile` over query tiles in parallel.
fn run_tiles<T: Real>(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    tile_rows: usize,
    ranges_for_tile: impl Fn(usize) -> Vec<Range<usize>> + Sync,
) -> (Vec<f64>, Vec<f64>, KernelStats) {
    let d = q.cols();
    let (qt, kt, vt) = (to_vec::<T>(q), to_vec::<T>(k), to_vec::<T>(v));
    let mut out = vec![T::ZERO; q.rows() * d];
    let mut logden = vec![0.0; q.rows()];
    let stats = out
        .par_chunks_mut(tile_rows * d)
        .zip(logden.par_chunks_mut(tile_rows))
        .zip(qt.par_chunks(tile_rows * d))
        .enumerate()
        .map(|(tile, ((o, l), qtile))| attend_tile(qtile, &kt, &vt, d, &ranges_for_tile(tile), o, l))
        .reduce(KernelStats::default, KernelStats::merge);
    (out.into_iter().map(T::to_f64).collect(), logden, stats)
}

fn dispatch(
    precision: Precision,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    tile_rows: usize,
    ranges_for_tile: impl Fn(usize) -> Vec<Range<usize>> + Sync,
) -> (Matrix, Vec<f64>, KernelStats) {
    let (data, logden, stats) = match precision {
        Precision::Single => run_tiles::<f32>(q, k, v, tile_rows, ranges_for_tile),
        Precision::Double => run_tiles::<f64>(q, k, v, tile_rows, ranges_for_tile),
    };
    (Matrix::from_parts(q.rows(), q.cols(), data, precision), logden, stats)
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() || q.cols() != v.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    Ok(())
}

/// Attention of the video queries over the key blocks retained by `mask`.
///
/// Computes in the precision of `q_v`. Returns the output rows, the
/// per-row log-denominators and operation counts.
pub fn block_sparse_attention(
    q_v: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &SparseMask,
    grid: &BlockGrid,
) -> Result<(Matrix, Vec<f64>, KernelStats)> {
    check_qkv(q_v, k, v)?;
    if q_v.rows() != grid.t_video || k.rows() != grid.total_kv() {
        return Err(Error::Shape("inputs do not match the block grid".into()));
    }
    mask.mask.check_grid(grid)?;
    if let Some(row) = mask.mask.first_empty_row() {
        return Err(Error::EmptyRow { row });
    }
    let ranges = |n: usize| mask.mask.retained(n).map(|m| grid.kv_range(m)).collect::<Vec<_>>();
    Ok(dispatch(q_v.precision(), q_v, k, v, grid.block, ranges))
}

/// Dense attention for text queries, tiled over queries and keys.
pub fn text_full_attention(q_t: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q_t.rows() == 0 {
        return Ok(Matrix::zeros(0, k.cols(), q_t.precision()));
    }
    check_qkv(q_t, k, v)?;
    if k.rows() == 0 {
        return Err(Error::Shape("no keys to attend to".into()));
    }
    let total = k.rows();
    let ranges: Vec<Range<usize>> = (0..total)
        .step_by(TEXT_TILE)
        .map(|s| s..(s + TEXT_TILE).min(total))
        .collect();
    let (out, _, _) = dispatch(q_t.precision(), q_t, k, v, TEXT_TILE, |_| ranges.clone());
    Ok(out)
}

/// The engine's own dense attention for every query of `problem`.
pub fn dense_attention(problem: &AttentionProblem, grid: &BlockGrid) -> Result<(AttentionOutput, KernelStats)> {
    let full = SparseMask::full(grid);
    let (o_video, row_log_denominators, stats) =
        block_sparse_attention(problem.q_video(), problem.k(), problem.v(), &full, grid)?;
    let o_text = text_full_attention(problem.q_text(), problem.k(), problem.v())?;
    Ok((
        AttentionOutput {
            o_video,
            o_text,
            row_log_denominators,
        },
        stats,
    ))
}
