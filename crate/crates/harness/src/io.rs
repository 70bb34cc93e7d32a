//! Problem directories, atomic file writes and the flat CSV export.

use std::fs;
use std::io::Write;
use std::path::Path;

use rectattn::problem::GridDims;
use rectattn::rsat::{encode, read_matrix, Tensor};
use rectattn::{AttentionProblem, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::{Variant, VariantReport};
use crate::synth::SyntheticSpec;

pub const PROBLEM_FILES: [&str; 4] = ["q_video.rsat", "q_text.rsat", "k.rsat", "v.rsat"];
pub const PROBLEM_META: &str = "problem.json";

/// Sidecar describing the RSAT tensors of a problem directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemMeta {
    pub schema_version: u32,
    pub block: usize,
    pub grid: Option<GridDims>,
    /// Generator parameters, when the problem is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

/// Writes `bytes` to `path` through a sibling temp file and a rename, so
/// readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| HarnessError::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|()| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(HarnessError::io(path, e));
    }
    Ok(())
}

pub fn write_rsat(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode(&Tensor::from_matrix(m))?)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Saves a problem as four RSAT tensors plus `problem.json`.
pub fn save_problem(dir: &Path, problem: &AttentionProblem, synthetic: Option<&SyntheticSpec>) -> Result<()> {
    create_dir(dir)?;
    let tensors = [problem.q_video(), problem.q_text(), problem.k(), problem.v()];
    for (name, m) in PROBLEM_FILES.iter().zip(tensors) {
        write_rsat(&dir.join(name), m)?;
    }
    let meta = ProblemMeta {
        schema_version: 1,
        block: problem.block(),
        grid: problem.grid_dims(),
        synthetic: synthetic.copied(),
    };
    write_json(&dir.join(PROBLEM_META), &meta)
}

pub fn load_problem(dir: &Path) -> Result<AttentionProblem> {
    let meta_path = dir.join(PROBLEM_META);
    let meta: ProblemMeta = read_json(&meta_path)?;
    let mut mats = Vec::with_capacity(4);
    for name in PROBLEM_FILES {
        let path = dir.join(name);
        let m = read_matrix(&path).map_err(|e| match e {
            rectattn::Error::Io(io) => HarnessError::io(&path, io),
            other => other.into(),
        })?;
        mats.push(m);
    }
    let v = mats.pop().expect("four tensors");
    let k = mats.pop().expect("four tensors");
    let q_text = mats.pop().expect("four tensors");
    let q_video = mats.pop().expect("four tensors");
    Ok(AttentionProblem::new(q_video, q_text, k, v, meta.block, meta.grid)?)
}

/// Column order of every CSV the harness writes.
pub const CSV_HEADER: [&str; 10] = [
    "top_k_fraction",
    "variant",
    "sparsity",
    "normalized_l1",
    "cosine_similarity",
    "flops_full",
    "flops_sparse",
    "flops_overhead",
    "gapr_agreement",
    "checks_passed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub top_k_fraction: f64,
    pub variant: Variant,
    pub sparsity: f64,
    pub normalized_l1: f64,
    pub cosine_similarity: f64,
    pub flops_full: u64,
    pub flops_sparse: u64,
    pub flops_overhead: u64,
    pub gapr_agreement: f64,
    pub checks_passed: bool,
}

impl From<&VariantReport> for CsvRow {
    fn from(r: &VariantReport) -> Self {
        Self {
            top_k_fraction: r.top_k_fraction,
            variant: r.variant,
            sparsity: r.sparsity,
            normalized_l1: r.normalized_l1,
            cosine_similarity: r.cosine_similarity,
            flops_full: r.flops_full,
            flops_sparse: r.flops_sparse,
            flops_overhead: r.flops_overhead,
            gapr_agreement: r.gapr_agreement,
            checks_passed: r.checks_passed,
        }
    }
}

pub fn csv_bytes(rows: &[CsvRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner()
        .map_err(|e| HarnessError::Config(format!("flushing CSV: {e}")))
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

/// Reads a CSV written by [`write_csv`], checking the header.
pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    parse_csv(&bytes)
}

pub fn parse_csv(bytes: &[u8]) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(HarnessError::Schema(format!(
            "expected columns {}, found {}",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| HarnessError::Schema(e.to_string())))
        .collect()
}
