use std::path::Path;
use std::process::{Command, Output};

fn rectattn(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rectattn"))
        .args(args)
        .env("RECTATTN_THREADS", threads)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_run_sweep_plot() {
    let dir = tempfile::tempdir().unwrap();
    let problem = dir.path().join("problem");
    let out = rectattn(&["gen", "--out", path(&problem)], "1");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic_seed42");
    for name in ["q_video.rsat", "q_text.rsat", "k.rsat", "v.rsat"] {
        assert_eq!(
            std::fs::read(problem.join(name)).unwrap(),
            std::fs::read(fixture.join(name)).unwrap()
        );
    }

    let run = dir.path().join("run");
    let out = rectattn(
        &["run", "--input", path(&problem), "--out", path(&run), "--dump-a-pool"],
        "2",
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("sparse-rectified "));
    for name in [
        "summary.csv",
        "timings.json",
        "a_pool.rsat",
        "report-sparse-unrectified.json",
    ] {
        assert!(run.join(name).exists(), "{name}");
    }

    let sweep = dir.path().join("sweep");
    let out = rectattn(&["sweep", "--out", path(&sweep), "--topk-list", "0.5,0.2,0.1"], "0");
    assert!(out.status.success());
    let expected = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/demo_sweep.csv");
    assert_eq!(
        std::fs::read(sweep.join("sweep.csv")).unwrap(),
        std::fs::read(expected).unwrap()
    );

    let plots = dir.path().join("plots");
    let out = rectattn(
        &["plot", "--csv", path(&sweep.join("sweep.csv")), "--out", path(&plots)],
        "1",
    );
    assert!(out.status.success());
    let svg = std::fs::read_to_string(plots.join("normalized_l1.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn missing_input_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = rectattn(
        &[
            "run",
            "--input",
            path(&dir.path().join("missing")),
            "--out",
            path(&out_dir),
        ],
        "1",
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot access"));
    assert!(!out_dir.exists());
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = rectattn(&["sweep", "--out", path(&out_dir), "--topk-list", "0.5,2"], "1");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));
    let out = rectattn(&["run", "--out", path(&out_dir), "--variants", "bogus"], "1");
    assert!(!out.status.success());
    let out = rectattn(&["verify"], "many");
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("RECTATTN_THREADS"));
    assert!(!out_dir.exists());
}

#[test]
fn verify_passes() {
    let out = rectattn(&["verify", "--seed", "3"], "0");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "{stdout}");
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 3);
    assert!(!stdout.contains("FAIL "));
}

#[test]
fn config_file_drives_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{
  "source": {"synthetic": {"seed": 5, "t_v": 128, "t_t": 8, "d": 16, "block": 8, "grid": [2, 8, 8],
             "alpha": 1.0, "beta": 2.0, "sigma": 0.3, "precision": "double"}},
  "sparsity": {"top_k_fraction": 0.3, "weight_threshold": 0.0, "adjacency_radius": 1, "force_text_blocks": true},
  "variants": ["full", "compensate-all"],
  "out_dir": "ignored"
}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = rectattn(&["run", "--config", path(&config), "--out", path(&out_dir)], "1");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("report-full.json").exists());
    assert!(out_dir.join("report-compensate-all.json").exists());
}
