//! Config-driven experiment runs and sparsity sweeps.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use rectattn::morton::reorder_morton;
use rectattn::{implicit_full_attention, partition, AttentionProblem, PooledSet, SparsityConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::{evaluate, Variant, VariantOutcome, VariantReport};
use crate::io::{create_dir, load_problem, write_csv, write_json, write_rsat, CsvRow};
use crate::synth::{gen_synthetic, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemSource {
    Synthetic(SyntheticSpec),
    /// Directory holding RSAT tensors and `problem.json`, as written by `gen`.
    Rsat(PathBuf),
}

impl ProblemSource {
    pub fn load(&self) -> Result<AttentionProblem> {
        match self {
            ProblemSource::Synthetic(spec) => gen_synthetic(spec),
            ProblemSource::Rsat(dir) => load_problem(dir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: ProblemSource,
    #[serde(default)]
    pub sparsity: SparsityConfig,
    pub variants: Vec<Variant>,
    pub out_dir: PathBuf,
    /// Reorder video tokens along the Morton curve before running.
    #[serde(default)]
    pub reorder: bool,
    /// Also write the implicit block attention as `a_pool.rsat`.
    #[serde(default)]
    pub dump_a_pool: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(HarnessError::Config("at least one variant is required".into()));
        }
        self.sparsity.validate()?;
        Ok(())
    }

    fn problem(&self) -> Result<AttentionProblem> {
        let problem = self.source.load()?;
        if self.reorder {
            Ok(reorder_morton(&problem)?.0)
        } else {
            Ok(problem)
        }
    }
}

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const TIMINGS_JSON: &str = "timings.json";
pub const A_POOL_RSAT: &str = "a_pool.rsat";

pub fn report_file_name(variant: Variant) -> String {
    format!("report-{variant}.json")
}

#[derive(Debug, Serialize)]
struct TimingEntry {
    top_k_fraction: f64,
    variant: Variant,
    /// Stage name to milliseconds.
    stages: Vec<(String, f64)>,
}

fn timing_entry(o: &VariantOutcome) -> TimingEntry {
    let t = &o.timings;
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    TimingEntry {
        top_k_fraction: o.report.top_k_fraction,
        variant: o.report.variant,
        stages: [
            ("pooling", t.pooling),
            ("implicit_attention", t.implicit_attention),
            ("compensation_mask", t.compensation_mask),
            ("sparse_mask", t.sparse_mask),
            ("kernel", t.kernel),
            ("text", t.text),
            ("rectification", t.rectification),
            ("total", t.total()),
        ]
        .into_iter()
        .map(|(name, d)| (name.to_string(), ms(d)))
        .collect(),
    }
}

/// Runs every configured variant and writes `report-<variant>.json`,
/// `summary.csv` and `timings.json` into the output directory. Nothing is
/// written unless every variant succeeded.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<VariantReport>> {
    config.validate()?;
    let problem = config.problem()?;
    let outcomes = evaluate(&problem, &config.sparsity, &config.variants)?;
    let a_pool = if config.dump_a_pool {
        let grid = partition(&problem)?;
        Some(implicit_full_attention(&PooledSet::from_problem(&problem, &grid)?, &grid)?.a_pool)
    } else {
        None
    };
    let out = &config.out_dir;
    create_dir(out)?;
    for o in &outcomes {
        write_json(&out.join(report_file_name(o.report.variant)), &o.report)?;
    }
    let rows: Vec<CsvRow> = outcomes.iter().map(|o| CsvRow::from(&o.report)).collect();
    write_csv(&out.join(SUMMARY_CSV), &rows)?;
    let timings: Vec<TimingEntry> = outcomes.iter().map(timing_entry).collect();
    write_json(&out.join(TIMINGS_JSON), &timings)?;
    if let Some(a_pool) = a_pool {
        write_rsat(&out.join(A_POOL_RSAT), &a_pool)?;
    }
    Ok(outcomes.into_iter().map(|o| o.report).collect())
}

pub fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(HarnessError::Config("top-k fraction list is empty".into()));
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(HarnessError::Config(format!("top-k fraction {f} is outside (0, 1]")));
    }
    Ok(())
}

/// Evaluates the configured variants at each top-k fraction, in input
/// order. Fractions run concurrently; the result does not depend on the
/// thread count.
pub fn sweep_rows(config: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<VariantOutcome>> {
    config.validate()?;
    validate_fractions(fractions)?;
    let problem = config.problem()?;
    let per_fraction: Vec<Vec<VariantOutcome>> = fractions
        .par_iter()
        .map(|&f| {
            let sparsity = SparsityConfig {
                top_k_fraction: f,
                ..config.sparsity
            };
            evaluate(&problem, &sparsity, &config.variants)
        })
        .collect::<Result<_>>()?;
    Ok(per_fraction.into_iter().flatten().collect())
}

/// Runs [`sweep_rows`] and writes `sweep.csv` plus `timings.json`.
/// Returns the CSV path.
pub fn sweep_sparsity(config: &ExperimentConfig, fractions: &[f64]) -> Result<PathBuf> {
    let outcomes = sweep_rows(config, fractions)?;
    let out = &config.out_dir;
    create_dir(out)?;
    let rows: Vec<CsvRow> = outcomes.iter().map(|o| CsvRow::from(&o.report)).collect();
    let path = out.join(SWEEP_CSV);
    write_csv(&path, &rows)?;
    let timings: Vec<TimingEntry> = outcomes.iter().map(timing_entry).collect();
    write_json(&out.join(TIMINGS_JSON), &timings)?;
    Ok(path)
}

/// Fractions of the demo sweep.
pub const DEMO_FRACTIONS: [f64; 3] = [0.5, 0.2, 0.1];

/// Variants of the demo sweep.
pub const DEMO_VARIANTS: [Variant; 3] = [
    Variant::SparseUnrectified,
    Variant::SparseRectifiedNoGapr,
    Variant::SparseRectified,
];

/// Seed-42 default synthetic problem with the demo variants.
pub fn demo_config(out_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        source: ProblemSource::Synthetic(SyntheticSpec::default()),
        sparsity: SparsityConfig::default(),
        variants: DEMO_VARIANTS.to_vec(),
        out_dir: out_dir.to_path_buf(),
        reorder: false,
        dump_a_pool: false,
    }
}
