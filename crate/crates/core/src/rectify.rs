//! Rectification of block-sparse attention outputs and the end-to-end
//! pipeline.
//!
//! Critical blocks: the sparse softmax over retained blocks inflates their
//! weights by `1 / R_n`, where `R_n` is the share of full attention the
//! retained blocks hold. Scaling the sparse output by the pooled estimate of
//! `R_n` undoes that. Non-critical blocks: an excluded block whose gain
//! exceeds its pooling error contributes `a_pool[n, m] · v_pool[m]`.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::ipar::{implicit_full_attention, ImplicitAttention};
use crate::kernel::{block_sparse_attention, text_full_attention, AttentionOutput, KernelStats};
use crate::masks::{
    build_sparse_mask, compensation_mask, gain_error, CompensationMask, GainError, SparseMask, SparsityConfig,
};
use crate::problem::{partition, AttentionProblem, BlockGrid, PooledSet};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct RectificationFactors {
    /// Pooled attention mass of the retained blocks, one entry per query block.
    pub r: Vec<f64>,
}

/// `R_n = Σ_{m retained} a_pool[n, m]`, normalized by the row total so that
/// a fully retained row gives exactly one.
pub fn rectification_factors(a_pool: &Matrix, mask: &SparseMask) -> Result<RectificationFactors> {
    if a_pool.rows() != mask.mask.rows() || a_pool.cols() != mask.mask.cols() {
        return Err(Error::Shape("pooled attention does not match the mask".into()));
    }
    let r = (0..a_pool.rows())
        .map(|n| {
            let (kept, total) = a_pool
                .row(n)
                .iter()
                .zip(mask.mask.row(n))
                .fold((0.0, 0.0), |(kept, total), (&a, &keep)| {
                    (if keep { kept + a } else { kept }, total + a)
                });
            kept / total
        })
        .collect();
    Ok(RectificationFactors { r })
}

/// `o'_i = R_n · o_i + Σ_{m: ¬M̂ ∧ M_c} a_pool[n, m] · v_pool[m]` for every
/// video token `i` of query block `n`.
pub fn apply_rectification(
    o_v: &Matrix,
    factors: &RectificationFactors,
    implicit: &ImplicitAttention,
    sparse: &SparseMask,
    comp: &CompensationMask,
    v_pool: &Matrix,
    grid: &BlockGrid,
) -> Result<Matrix> {
    let d = o_v.cols();
    if o_v.rows() != grid.t_video
        || factors.r.len() != grid.n_q
        || v_pool.rows() != grid.n_kv
        || v_pool.cols() != d
        || implicit.a_pool.rows() != grid.n_q
        || implicit.a_pool.cols() != grid.n_kv
    {
        return Err(Error::Shape("rectification inputs do not match the block grid".into()));
    }
    sparse.mask.check_grid(grid)?;
    comp.mask.check_grid(grid)?;
    let applied = comp.applied(sparse);
    let precision = o_v.precision();
    let mut out = Vec::with_capacity(o_v.data().len());
    let mut compensation = vec![0.0; d];
    for n in 0..grid.n_q {
        let r_n = factors.r[n];
        compensation.iter_mut().for_each(|c| *c = 0.0);
        let mut any = false;
        for m in applied.retained(n) {
            any = true;
            let w = implicit.a_pool.get(n, m);
            for (c, &v) in compensation.iter_mut().zip(v_pool.row(m)) {
                *c += w * v;
            }
        }
        for i in grid.q_range(n) {
            let row = o_v.row(i);
            if any {
                out.extend(
                    row.iter()
                        .zip(&compensation)
                        .map(|(&o, &c)| precision.round(r_n * o + c)),
                );
            } else {
                out.extend(row.iter().map(|&o| precision.round(r_n * o)));
            }
        }
    }
    Matrix::new(o_v.rows(), d, out, precision)
}

/// Which parts of the rectification stage run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RectifyMode {
    /// Plain block-sparse attention.
    None,
    /// Critical-block rescaling only.
    FactorsOnly,
    /// Rescaling plus gain-gated compensation.
    Gated,
    /// Rescaling plus compensation of every excluded block.
    CompensateAll,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub pooling: Duration,
    pub implicit_attention: Duration,
    pub compensation_mask: Duration,
    pub sparse_mask: Duration,
    pub kernel: Duration,
    pub text: Duration,
    pub rectification: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.pooling
            + self.implicit_attention
            + self.compensation_mask
            + self.sparse_mask
            + self.kernel
            + self.text
            + self.rectification
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub output: AttentionOutput,
    pub factors: RectificationFactors,
    pub implicit: ImplicitAttention,
    pub pooled: PooledSet,
    pub grid: BlockGrid,
    pub sparse_mask: SparseMask,
    pub gain_error: GainError,
    pub comp_mask: CompensationMask,
    pub kernel_stats: KernelStats,
    pub timings: StageTimings,
    pub mode: RectifyMode,
}

impl PipelineResult {
    /// Blocks that actually received compensation.
    pub fn applied_compensation(&self) -> crate::masks::BlockMask {
        self.comp_mask.applied(&self.sparse_mask)
    }

    /// `R_n + Σ_{m compensated} a_pool[n, m]` per query block.
    pub fn implied_row_mass(&self) -> Vec<f64> {
        let applied = self.applied_compensation();
        (0..self.grid.n_q)
            .map(|n| self.factors.r[n] + applied.retained(n).map(|m| self.implicit.a_pool.get(n, m)).sum::<f64>())
            .collect()
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot = start.elapsed();
    out
}

/// Full rectified pipeline with gain-gated compensation.
pub fn rectified_attention_pipeline(problem: &AttentionProblem, config: &SparsityConfig) -> Result<PipelineResult> {
    run_pipeline(problem, config, RectifyMode::Gated)
}

/// Pooling, implicit attention, masks, sparse kernel, text attention and the
/// rectification stage selected by `mode`. Every mode shares all stages up to
/// rectification.
pub fn run_pipeline(problem: &AttentionProblem, config: &SparsityConfig, mode: RectifyMode) -> Result<PipelineResult> {
    config.validate()?;
    let grid = partition(problem)?;
    let mut timings = StageTimings::default();
    let pooled = timed(&mut timings.pooling, || PooledSet::from_problem(problem, &grid))?;
    let implicit = timed(&mut timings.implicit_attention, || {
        implicit_full_attention(&pooled, &grid)
    })?;
    let sparse_mask = timed(&mut timings.sparse_mask, || {
        build_sparse_mask(&implicit.a_pool, config, &grid)
    })?;
    let (gain_error, comp_mask) = timed(&mut timings.compensation_mask, || -> Result<_> {
        let ge = gain_error(problem, &pooled, &grid)?;
        let comp = match mode {
            RectifyMode::Gated => compensation_mask(&ge.gain, &ge.error, &sparse_mask)?,
            RectifyMode::CompensateAll => CompensationMask::all(&grid),
            RectifyMode::None | RectifyMode::FactorsOnly => CompensationMask::none(&grid),
        };
        Ok((ge, comp))
    })?;
    let (o_video, row_log_denominators, kernel_stats) = timed(&mut timings.kernel, || {
        block_sparse_attention(problem.q_video(), problem.k(), problem.v(), &sparse_mask, &grid)
    })?;
    let o_text = timed(&mut timings.text, || {
        text_full_attention(problem.q_text(), problem.k(), problem.v())
    })?;
    let factors = rectification_factors(&implicit.a_pool, &sparse_mask)?;
    let o_video = match mode {
        RectifyMode::None => o_video,
        _ => timed(&mut timings.rectification, || {
            apply_rectification(
                &o_video,
                &factors,
                &implicit,
                &sparse_mask,
                &comp_mask,
                &pooled.v_pool,
                &grid,
            )
        })?,
    };
    Ok(PipelineResult {
        output: AttentionOutput {
            o_video,
            o_text,
            row_log_denominators,
        },
        factors,
        implicit,
        pooled,
        grid,
        sparse_mask,
        gain_error,
        comp_mask,
        kernel_stats,
        timings,
        mode,
    })
}
