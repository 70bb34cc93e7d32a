//! Running pipeline variants against the dense oracle.

use std::fmt;
use std::str::FromStr;

use rectattn::metrics::{gapr_condition_agreement, pooled_path_flops};
use rectattn::rectify::StageTimings;
use rectattn::{
    build_sparse_mask, cosine_similarity, full_attention_oracle, implicit_full_attention, normalized_l1, partition,
    run_pipeline, sparsity_and_flops, AttentionProblem, Matrix, PipelineResult, PooledSet, RectifyMode, SparsityConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Report schema version written into every JSON report.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Tolerance for the mass and factor invariants.
pub const MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// The dense double-precision oracle itself.
    Full,
    SparseUnrectified,
    SparseRectified,
    /// Critical-block rescaling without any compensation.
    SparseRectifiedNoGapr,
    /// Rescaling plus compensation of every excluded block.
    CompensateAll,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::SparseUnrectified,
        Variant::SparseRectified,
        Variant::SparseRectifiedNoGapr,
        Variant::CompensateAll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SparseUnrectified => "sparse-unrectified",
            Variant::SparseRectified => "sparse-rectified",
            Variant::SparseRectifiedNoGapr => "sparse-rectified-no-gapr",
            Variant::CompensateAll => "compensate-all",
        }
    }

    pub fn mode(self) -> Option<RectifyMode> {
        match self {
            Variant::Full => None,
            Variant::SparseUnrectified => Some(RectifyMode::None),
            Variant::SparseRectified => Some(RectifyMode::Gated),
            Variant::SparseRectifiedNoGapr => Some(RectifyMode::FactorsOnly),
            Variant::CompensateAll => Some(RectifyMode::CompensateAll),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown variant `{s}`")))
    }
}

/// Serialized per-variant result. Wall times are kept out so reports are
/// reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub schema_version: u32,
    pub variant: Variant,
    pub top_k_fraction: f64,
    pub weight_threshold: f64,
    pub adjacency_radius: usize,
    pub force_text_blocks: bool,
    pub normalized_l1: f64,
    pub cosine_similarity: f64,
    pub sparsity: f64,
    pub flops_full: u64,
    pub flops_sparse: u64,
    pub flops_overhead: u64,
    pub gapr_agreement: f64,
    pub checks_passed: bool,
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub report: VariantReport,
    /// Video rows of the variant's output.
    pub output_video: Matrix,
    pub timings: StageTimings,
    /// Names of failed invariant checks; empty when `report.checks_passed`.
    pub failed_checks: Vec<String>,
}

/// Re-checks the mask and mass invariants of a pipeline run.
pub fn check_invariants(result: &PipelineResult) -> Vec<String> {
    let mut failed = Vec::new();
    let grid = &result.grid;
    let sm = &result.sparse_mask;
    if sm.mask.first_empty_row().is_some() {
        failed.push("every row retains a block".into());
    }
    if sm.mask != sm.importance.union(&sm.adjacency) {
        failed.push("mask is importance or adjacency".into());
    }
    if sm.retained_count != sm.mask.row_counts() {
        failed.push("retained counts".into());
    }
    for row in result.implicit.a_pool.row_iter() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > MASS_TOLERANCE || row.iter().any(|&x| x < 0.0) {
            failed.push("a_pool rows are distributions".into());
            break;
        }
    }
    if result
        .factors
        .r
        .iter()
        .any(|&r| !(r > 0.0 && r <= 1.0 + MASS_TOLERANCE))
    {
        failed.push("R in (0, 1]".into());
    }
    if result.implied_row_mass().iter().any(|&m| m > 1.0 + MASS_TOLERANCE) {
        failed.push("implied row mass <= 1".into());
    }
    if !result.applied_compensation().is_disjoint(&sm.mask) {
        failed.push("compensation disjoint from retained blocks".into());
    }
    if result.output.o_video.rows() != grid.t_video {
        failed.push("output shape".into());
    }
    failed
}

/// Shared reference data for evaluating several variants of one problem.
pub struct Reference {
    /// Oracle output for the video queries.
    pub video: Matrix,
    pub gapr_agreement: f64,
}

impl Reference {
    pub fn new(problem: &AttentionProblem) -> Result<Self> {
        let (_, video) = full_attention_oracle(problem.q_video(), problem.k(), problem.v())?;
        let grid = partition(problem)?;
        let pooled = PooledSet::from_problem(problem, &grid)?;
        let gapr_agreement = gapr_condition_agreement(problem, &pooled, &grid)?;
        Ok(Self { video, gapr_agreement })
    }
}

pub fn evaluate_variant(
    problem: &AttentionProblem,
    config: &SparsityConfig,
    variant: Variant,
    reference: &Reference,
) -> Result<VariantOutcome> {
    let grid = partition(problem)?;
    let d = problem.head_dim();
    let base =
        |normalized_l1, cosine_similarity, sparsity, flops_sparse, flops_overhead, checks_passed| VariantReport {
            schema_version: REPORT_SCHEMA_VERSION,
            variant,
            top_k_fraction: config.top_k_fraction,
            weight_threshold: config.weight_threshold,
            adjacency_radius: config.adjacency_radius,
            force_text_blocks: config.force_text_blocks,
            normalized_l1,
            cosine_similarity,
            sparsity,
            flops_full: 4 * (grid.t_video * grid.total_kv() * d) as u64,
            flops_sparse,
            flops_overhead,
            gapr_agreement: reference.gapr_agreement,
            checks_passed,
        };
    let Some(mode) = variant.mode() else {
        let video = reference.video.clone();
        let report = base(
            normalized_l1(&video, &reference.video)?,
            cosine_similarity(&video, &reference.video)?,
            0.0,
            4 * (grid.t_video * grid.total_kv() * d) as u64,
            0,
            true,
        );
        return Ok(VariantOutcome {
            report,
            output_video: video,
            timings: StageTimings::default(),
            failed_checks: Vec::new(),
        });
    };
    let result = run_pipeline(problem, config, mode)?;
    let failed_checks = check_invariants(&result);
    let flops = sparsity_and_flops(&result.sparse_mask, &grid, d);
    let overhead = match mode {
        RectifyMode::None => flops.flops_overhead - rectification_flops(&grid, d),
        _ => flops.flops_overhead,
    };
    let video = result.output.o_video;
    let report = base(
        normalized_l1(&video, &reference.video)?,
        cosine_similarity(&video, &reference.video)?,
        flops.sparsity,
        flops.flops_sparse,
        overhead,
        failed_checks.is_empty(),
    );
    Ok(VariantOutcome {
        report,
        output_video: video,
        timings: result.timings,
        failed_checks,
    })
}

fn rectification_flops(grid: &rectattn::BlockGrid, d: usize) -> u64 {
    let (n, m) = (grid.n_q as u64, grid.n_kv as u64);
    2 * n * m * (d as u64) + 2 * grid.t_video as u64 * d as u64 + n * m
}

/// Evaluates every variant against one shared oracle run.
pub fn evaluate(
    problem: &AttentionProblem,
    config: &SparsityConfig,
    variants: &[Variant],
) -> Result<Vec<VariantOutcome>> {
    if variants.is_empty() {
        return Err(HarnessError::Config("at least one variant is required".into()));
    }
    config.validate()?;
    let reference = Reference::new(problem)?;
    variants
        .iter()
        .map(|&v| evaluate_variant(problem, config, v, &reference))
        .collect()
}

/// Picks `top_k_fraction = k / M` whose mask sparsity on `problem` is
/// closest to `target`, keeping the other knobs of `base`. Ties go to the
/// larger `k`.
pub fn calibrate_top_k(
    problem: &AttentionProblem,
    base: &SparsityConfig,
    target: f64,
) -> Result<(SparsityConfig, f64)> {
    let grid = partition(problem)?;
    let pooled = PooledSet::from_problem(problem, &grid)?;
    let implicit = implicit_full_attention(&pooled, &grid)?;
    let mut best: Option<(SparsityConfig, f64)> = None;
    for k in (1..=grid.n_kv).rev() {
        let config = SparsityConfig {
            top_k_fraction: k as f64 / grid.n_kv as f64,
            ..*base
        };
        let mask = build_sparse_mask(&implicit.a_pool, &config, &grid)?;
        let sparsity = sparsity_and_flops(&mask, &grid, problem.head_dim()).sparsity;
        if best.is_none_or(|(_, s)| (sparsity - target).abs() < (s - target).abs()) {
            best = Some((config, sparsity));
        }
    }
    Ok(best.expect("at least one key block"))
}

/// Pooled-path FLOPs for a problem of this geometry.
pub fn overhead_flops(problem: &AttentionProblem) -> Result<u64> {
    Ok(pooled_path_flops(&partition(problem)?, problem.head_dim()))
}
