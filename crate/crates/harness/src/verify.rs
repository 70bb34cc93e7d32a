//! Self-checks behind `rectattn verify`: kernel against the masked oracle,
//! zero-sparsity identity and the pipeline invariants on random problems.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rectattn::rectify::rectification_factors;
use rectattn::{
    block_sparse_attention, build_sparse_mask, full_attention_oracle, masked_attention_oracle, partition,
    rectified_attention_pipeline, AttentionProblem, BlockGrid, BlockMask, Matrix, Precision, SparseMask,
    SparsityConfig,
};

use crate::error::Result;
use crate::experiment::{check_invariants, MASS_TOLERANCE};
use crate::synth::{gaussian, stream_rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// Standard Gaussian problem with `B ∈ {4, 8, 16}`, `T_v ≤ 512`,
/// `T_t ≤ 32`.
pub fn random_problem(rng: &mut ChaCha8Rng, precision: Precision) -> Result<AttentionProblem> {
    let block = [4, 8, 16][rng.random_range(0..3)];
    let t_v = block * rng.random_range(1..=(512 / block).min(32));
    let t_t = rng.random_range(0..=32);
    let d = [8, 16, 32][rng.random_range(0..3)];
    let mut draw = |rows: usize| -> Result<Matrix> {
        let data = gaussian(rng, rows * d);
        Ok(Matrix::new(rows, d, data, precision)?)
    };
    let q_video = draw(t_v)?;
    let q_text = draw(t_t)?;
    let k = draw(t_v + t_t)?;
    let v = draw(t_v + t_t)?;
    Ok(AttentionProblem::new(q_video, q_text, k, v, block, None)?)
}

/// Random mask with every row non-empty.
pub fn random_mask(rng: &mut ChaCha8Rng, grid: &BlockGrid) -> Result<SparseMask> {
    let density = rng.random_range(0.05..1.0);
    let mut mask = BlockMask::new(grid.n_q, grid.n_kv, false);
    for n in 0..grid.n_q {
        for m in 0..grid.n_kv {
            mask.set(n, m, rng.random_bool(density));
        }
        let forced = rng.random_range(0..grid.n_kv);
        mask.set(n, forced, true);
    }
    Ok(SparseMask::from_mask(mask, grid)?)
}

fn random_config(rng: &mut ChaCha8Rng) -> SparsityConfig {
    SparsityConfig {
        top_k_fraction: rng.random_range(0.01..=1.0),
        weight_threshold: rng.random_range(0.0..=1.0),
        adjacency_radius: rng.random_range(0..=3),
        force_text_blocks: rng.random_bool(0.5),
    }
}

/// Maximum kernel-vs-oracle deviation over `instances` random problems in
/// both precisions, and whether it stays within tolerance.
pub fn kernel_oracle_suite(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = stream_rng(seed, Stream::QueryBase);
    let mut worst = [0.0f64; 2];
    let mut passed = true;
    for i in 0..instances {
        let precision = if i % 2 == 0 {
            Precision::Double
        } else {
            Precision::Single
        };
        let problem = random_problem(&mut rng, precision)?;
        let grid = partition(&problem)?;
        let mask = random_mask(&mut rng, &grid)?;
        let (out, _, _) = block_sparse_attention(problem.q_video(), problem.k(), problem.v(), &mask, &grid)?;
        let (_, exact) = masked_attention_oracle(
            &problem.q_video().to_precision(Precision::Double),
            &problem.k().to_precision(Precision::Double),
            &problem.v().to_precision(Precision::Double),
            &mask.mask,
            &grid,
        )?;
        let err = out.max_abs_diff(&exact)?;
        let slot = usize::from(precision == Precision::Single);
        worst[slot] = worst[slot].max(err);
        passed &= err <= precision.kernel_tolerance();
    }
    Ok(CheckResult {
        name: "kernel matches masked oracle".into(),
        passed,
        detail: format!(
            "{instances} instances, max error double {:.3e}, single {:.3e}",
            worst[0], worst[1]
        ),
    })
}

/// `top_k_fraction = 1` pipeline against dense attention in single precision.
pub fn zero_sparsity_suite(seed: u64, instances: usize) -> Result<CheckResult> {
    let mut rng = stream_rng(seed, Stream::KeyBase);
    let config = SparsityConfig {
        top_k_fraction: 1.0,
        ..SparsityConfig::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let problem = random_problem(&mut rng, Precision::Single)?;
        let result = rectified_attention_pipeline(&problem, &config)?;
        let exact = problem.to_precision(Precision::Double);
        let (_, full) = full_attention_oracle(&exact.q_all(), exact.k(), exact.v())?;
        worst = worst.max(result.output.concat().max_abs_diff(&full)?);
    }
    Ok(CheckResult {
        name: "zero sparsity equals full attention".into(),
        passed: worst <= Precision::Single.kernel_tolerance(),
        detail: format!("{instances} instances, max error {worst:.3e}"),
    })
}

/// Pipeline invariants plus mask and factor monotonicity on random configs.
/// Returns the number of violations next to the check result.
pub fn invariant_suite(seed: u64, configs: usize) -> Result<(CheckResult, Vec<String>)> {
    let mut rng = stream_rng(seed, Stream::Value);
    let mut violations = Vec::new();
    for i in 0..configs {
        let problem = random_problem(&mut rng, Precision::Double)?;
        let config = random_config(&mut rng);
        let result = rectified_attention_pipeline(&problem, &config)?;
        for failed in check_invariants(&result) {
            violations.push(format!("config {i}: {failed}"));
        }
        let grid = &result.grid;
        let a_pool = &result.implicit.a_pool;
        let grown_k = SparsityConfig {
            top_k_fraction: (config.top_k_fraction + rng.random_range(0.0..0.5)).min(1.0),
            ..config
        };
        let grown_p = SparsityConfig {
            weight_threshold: (config.weight_threshold + rng.random_range(0.0..0.5)).min(1.0),
            ..config
        };
        for (what, grown) in [("top_k_fraction", grown_k), ("weight threshold", grown_p)] {
            let bigger = build_sparse_mask(a_pool, &grown, grid)?;
            if !result.sparse_mask.mask.is_subset_of(&bigger.mask) {
                violations.push(format!("config {i}: mask not monotone in {what}"));
            }
            let r_big = rectification_factors(a_pool, &bigger)?;
            if result
                .factors
                .r
                .iter()
                .zip(&r_big.r)
                .any(|(small, big)| *small > big + 1e-12)
            {
                violations.push(format!("config {i}: R not monotone in {what}"));
            }
        }
        if result
            .factors
            .r
            .iter()
            .any(|&r| !(r > 0.0 && r <= 1.0 + MASS_TOLERANCE))
        {
            violations.push(format!("config {i}: R outside (0, 1]"));
        }
    }
    let check = CheckResult {
        name: "pipeline invariants".into(),
        passed: violations.is_empty(),
        detail: format!("{configs} configs, {} violations", violations.len()),
    };
    Ok((check, violations))
}

/// Everything `rectattn verify` runs.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        kernel_oracle_suite(seed, 100)?,
        zero_sparsity_suite(seed, 20)?,
        invariant_suite(seed, 200)?.0,
    ])
}
