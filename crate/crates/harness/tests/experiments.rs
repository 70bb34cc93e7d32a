use std::path::PathBuf;

use rectattn::{partition, run_pipeline, RectifyMode, SparsityConfig};
use rectattn_harness::experiment::{calibrate_top_k, evaluate, Variant, VariantReport};
use rectattn_harness::io::{csv_bytes, parse_csv, read_csv, read_json, CsvRow};
use rectattn_harness::plot::{render_svg, Metric};
use rectattn_harness::runner::{
    demo_config, report_file_name, run_experiment, sweep_rows, sweep_sparsity, ExperimentConfig, ProblemSource,
    DEMO_FRACTIONS, SUMMARY_CSV, TIMINGS_JSON,
};
use rectattn_harness::synth::{gen_synthetic, SyntheticSpec};
use rectattn_harness::HarnessError;
use sha2::{Digest, Sha256};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn blessing() -> bool {
    std::env::var("RECTATTN_BLESS").as_deref() == Ok("1")
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + b.abs())
}

fn assert_rows_close(got: &[CsvRow], expected: &[CsvRow]) {
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(expected) {
        assert_eq!(g.variant, e.variant);
        assert_eq!(
            (g.flops_full, g.flops_sparse, g.flops_overhead),
            (e.flops_full, e.flops_sparse, e.flops_overhead)
        );
        assert_eq!(g.checks_passed, e.checks_passed);
        for (a, b) in [
            (g.top_k_fraction, e.top_k_fraction),
            (g.sparsity, e.sparsity),
            (g.normalized_l1, e.normalized_l1),
            (g.cosine_similarity, e.cosine_similarity),
            (g.gapr_agreement, e.gapr_agreement),
        ] {
            assert!(close(a, b), "{} {a} vs {b}", g.variant);
        }
    }
}

/// Masked softmax attention over the allowed key tokens, one row at a time.
fn naive_masked(problem: &rectattn::AttentionProblem, allowed: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    let (q, k, v) = (problem.q_video(), problem.k(), problem.v());
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    (0..q.rows())
        .map(|i| {
            let keys: Vec<usize> = (0..k.rows()).filter(|&j| allowed(i, j)).collect();
            let s: Vec<f64> = keys
                .iter()
                .map(|&j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() * scale)
                .collect();
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..d)
                .map(|c| keys.iter().zip(&e).map(|(&j, w)| w / z * v.get(j, c)).sum())
                .collect()
        })
        .collect()
}

fn naive_l1(test: &[Vec<f64>], reference: &[Vec<f64>]) -> f64 {
    let diff: f64 = test
        .iter()
        .flatten()
        .zip(reference.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .sum();
    diff / reference.iter().flatten().map(|x| x.abs()).sum::<f64>()
}

#[test]
fn unrectified_error_matches_naive_masked_attention() {
    let problem = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let config = SparsityConfig::default();
    let report = &evaluate(&problem, &config, &[Variant::SparseUnrectified]).unwrap()[0].report;
    let result = run_pipeline(&problem, &config, RectifyMode::None).unwrap();
    let grid = partition(&problem).unwrap();
    let key_block = |j: usize| {
        if j < grid.t_video {
            j / grid.block
        } else {
            grid.n_q + (j - grid.t_video) / grid.block
        }
    };
    let mask = &result.sparse_mask.mask;
    let sparse = naive_masked(&problem, |i, j| mask.get(i / grid.block, key_block(j)));
    let full = naive_masked(&problem, |_, _| true);
    let expected = naive_l1(&sparse, &full);
    assert!(
        (report.normalized_l1 - expected).abs() < 1e-12,
        "{} vs {expected}",
        report.normalized_l1
    );
    let retained = mask.count() as f64;
    assert!((report.sparsity - (1.0 - retained / (grid.n_q * grid.n_kv) as f64)).abs() < 1e-15);
}

#[test]
fn report_at_eighty_percent_sparsity() {
    let problem = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let (config, sparsity) = calibrate_top_k(&problem, &SparsityConfig::default(), 0.8).unwrap();
    assert!((sparsity - 0.8).abs() < 0.05, "{sparsity}");
    let dir = tempfile::tempdir().unwrap();
    let experiment = ExperimentConfig {
        source: ProblemSource::Synthetic(SyntheticSpec::default()),
        sparsity: config,
        variants: vec![Variant::SparseUnrectified, Variant::SparseRectified],
        out_dir: dir.path().to_path_buf(),
        reorder: false,
        dump_a_pool: false,
    };
    let reports = run_experiment(&experiment).unwrap();
    assert!(reports[1].normalized_l1 < reports[0].normalized_l1);
    assert!(reports.iter().all(|r| r.checks_passed));
    let on_disk: VariantReport = read_json(&dir.path().join(report_file_name(Variant::SparseRectified))).unwrap();
    assert_eq!(on_disk, reports[1]);

    let path = fixture("report_sparsity80.csv");
    let rows: Vec<CsvRow> = reports.iter().map(CsvRow::from).collect();
    if blessing() {
        std::fs::write(&path, csv_bytes(&rows).unwrap()).unwrap();
    }
    assert_rows_close(&rows, &read_csv(&path).unwrap());
    assert_rows_close(&read_csv(&dir.path().join(SUMMARY_CSV)).unwrap(), &rows);
    assert!(dir.path().join(TIMINGS_JSON).exists());
}

#[test]
fn moderate_sparsity_with_threshold() {
    let problem = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let config = SparsityConfig {
        top_k_fraction: 0.2,
        weight_threshold: 0.3,
        adjacency_radius: 1,
        force_text_blocks: true,
    };
    let out = evaluate(
        &problem,
        &config,
        &[Variant::SparseUnrectified, Variant::SparseRectified],
    )
    .unwrap();
    assert!(out[1].report.normalized_l1 < out[0].report.normalized_l1);
    assert!(out[1].report.cosine_similarity > out[0].report.cosine_similarity);
}

#[test]
fn demo_sweep_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let csv = sweep_sparsity(&demo_config(dir.path()), &DEMO_FRACTIONS).unwrap();
    let rows = read_csv(&csv).unwrap();
    let path = fixture("demo_sweep.csv");
    if blessing() {
        std::fs::copy(&csv, &path).unwrap();
    }
    assert_rows_close(&rows, &read_csv(&path).unwrap());
    let sparsity: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == Variant::SparseRectified)
        .map(|r| r.sparsity)
        .collect();
    assert!(sparsity.windows(2).all(|w| w[0] < w[1]), "{sparsity:?}");
    for level in rows.chunks(3) {
        assert!(level[2].normalized_l1 < level[0].normalized_l1);
    }
}

#[test]
fn svg_digest_of_demo_fixture() {
    let rows = read_csv(&fixture("demo_sweep.csv")).unwrap();
    let path = fixture("demo_svg.sha256");
    let digests: String = Metric::ALL
        .iter()
        .map(|&m| {
            let svg = render_svg(&rows, m).unwrap();
            let hex: String = Sha256::digest(svg.as_bytes())
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            format!("{hex}  {}.svg\n", m.name())
        })
        .collect();
    if blessing() {
        std::fs::write(&path, &digests).unwrap();
    }
    assert_eq!(digests, std::fs::read_to_string(&path).unwrap());
}

#[test]
fn full_fraction_has_zero_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep_rows(&demo_config(dir.path()), &[1.0]).unwrap();
    assert_eq!(rows.len(), 3);
    for o in &rows {
        assert_eq!(o.report.sparsity, 0.0);
        assert_eq!(o.report.flops_sparse, o.report.flops_full);
        assert!(o.report.normalized_l1 < 1e-12);
    }
}

#[test]
fn full_variant_is_exact() {
    let problem = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let r = &evaluate(&problem, &SparsityConfig::default(), &[Variant::Full]).unwrap()[0].report;
    assert_eq!(r.normalized_l1, 0.0);
    assert_eq!(r.sparsity, 0.0);
    assert_eq!(r.flops_overhead, 0);
}

#[test]
fn bad_fractions_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = demo_config(&dir.path().join("out"));
    for fractions in [&[][..], &[0.0], &[1.5], &[f64::NAN]] {
        let err = sweep_sparsity(&config, fractions).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)), "{err}");
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn empty_variants_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        variants: Vec::new(),
        ..demo_config(dir.path())
    };
    assert!(matches!(run_experiment(&config), Err(HarnessError::Config(_))));
}

#[test]
fn missing_input_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = ExperimentConfig {
        source: ProblemSource::Rsat(dir.path().join("nowhere")),
        ..demo_config(&out)
    };
    let err = run_experiment(&config).unwrap_err();
    assert!(matches!(err, HarnessError::Io { .. }), "{err}");
    assert!(!out.exists());
}

#[test]
fn csv_schema_is_checked() {
    assert!(matches!(parse_csv(b"a,b\n1,2\n"), Err(HarnessError::Schema(_))));
    assert!(render_svg(&[], Metric::NormalizedL1).is_err());
    let rows = read_csv(&fixture("demo_sweep.csv")).unwrap();
    assert_eq!(parse_csv(&csv_bytes(&rows).unwrap()).unwrap(), rows);
}

#[test]
fn rsat_problem_source_matches_synthetic() {
    let dir = tempfile::tempdir().unwrap();
    let from_fixture = ExperimentConfig {
        source: ProblemSource::Rsat(fixture("synthetic_seed42")),
        ..demo_config(&dir.path().join("a"))
    };
    let a = run_experiment(&from_fixture).unwrap();
    let b = run_experiment(&demo_config(&dir.path().join("b"))).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(dir.path().join("a").join(SUMMARY_CSV)).unwrap(),
        std::fs::read(dir.path().join("b").join(SUMMARY_CSV)).unwrap()
    );
}

#[test]
fn morton_reorder_keeps_reports_valid() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        reorder: true,
        dump_a_pool: true,
        ..demo_config(dir.path())
    };
    let reports = run_experiment(&config).unwrap();
    assert!(reports.iter().all(|r| r.checks_passed));
    let a_pool = rectattn::rsat::read_matrix(&dir.path().join("a_pool.rsat")).unwrap();
    assert_eq!(a_pool.rows(), 32);
    assert_eq!(a_pool.cols(), 34);
    let config_path = dir.path().join("config.json");
    rectattn_harness::io::write_json(&config_path, &config).unwrap();
    let back: ExperimentConfig = read_json(&config_path).unwrap();
    assert_eq!(back, config);
}
