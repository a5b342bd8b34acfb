//! Binary-level checks: flag handling, exit codes, file formats, and the
//! documented behaviors of each subcommand on small inputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pwflow::Target;

fn pwflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwflow")).args(args).output().expect("binary runs")
}

fn pwflow_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stdout).lines().map(str::to_string).collect()
}

fn keyvals(out: &Output) -> Vec<(String, String)> {
    stdout_lines(out)
        .iter()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

/// Writes a small circle-of-Gaussians sample file and returns its path.
fn sample_file(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let path = dir.join("samples.txt");
    Target::by_name("circle-of-gaussians")
        .unwrap()
        .sample(n, seed)
        .unwrap()
        .save_text(&path, false)
        .unwrap();
    path
}

/// Trains a small fixed-k model and returns the model path.
fn quick_model(dir: &Path, k: &str, seed: &str) -> PathBuf {
    let input = sample_file(dir, 400, 7);
    let model = dir.join("model.pnf");
    let out = Command::new(env!("CARGO_BIN_EXE_pwflow"))
        .args(["train", "--clusters", k, "--hidden", "8,8", "--max-epochs", "30"])
        .args(["--patience-frac", "0.5", "--batch-size", "128", "--seed", seed])
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(&model)
        .output()
        .expect("train runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    model
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(pwflow(&["--help"]).status.code(), Some(0));
    assert_eq!(pwflow(&["--version"]).status.code(), Some(0));
    assert_eq!(pwflow(&["benchmark", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_problems_exit_one() {
    // Unknown flag, missing required flag, conflicting cluster flags.
    assert_eq!(pwflow(&["benchmark", "--bogus"]).status.code(), Some(1));
    assert_eq!(pwflow(&["sample", "-n", "5", "--out", "x"]).status.code(), Some(1));
    assert_eq!(
        pwflow(&["train", "--input", "x", "--out", "y", "--clusters", "2", "--auto-k", "2..4"])
            .status
            .code(),
        Some(1)
    );
    let out = pwflow(&["benchmark", "--target", "nonagon", "--out", "/tmp/nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown target"));
}

#[test]
fn malformed_sample_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "x0 x1\n1.0 2.0\n3.0 not-a-number\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pwflow"))
        .args(["train", "--input"])
        .arg(&bad)
        .args(["--out", "m.pnf"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "error should locate the bad line: {err}");
}

#[test]
fn training_needs_enough_samples() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample_file(dir.path(), 60, 3);
    let out = Command::new(env!("CARGO_BIN_EXE_pwflow"))
        .args(["train", "--input"])
        .arg(&input)
        .args(["--out", "m.pnf"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("125"));
}

#[test]
fn train_reports_the_scan_and_per_cluster_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample_file(dir.path(), 600, 5);
    let model = dir.path().join("model.pnf");
    let out = Command::new(env!("CARGO_BIN_EXE_pwflow"))
        .args(["train", "--auto-k", "2..4", "--hidden", "16,16", "--max-epochs", "30"])
        .args(["--patience-frac", "0.5", "--batch-size", "128", "--seed", "9"])
        .arg("--input")
        .arg(&input)
        .arg("--out")
        .arg(&model)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("chosen_k="));
    assert!(text.contains("silhouette_scan=2:"), "scan curve missing: {text}");
    assert!(text.contains("cluster.0.epochs="));
    assert!(model.exists());
}

#[test]
fn same_seed_trains_byte_identical_models() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = quick_model(dir_a.path(), "2", "11");
    let b = quick_model(dir_b.path(), "2", "11");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_model(dir.path(), "2", "12");
    let model = model.to_str().unwrap();
    let run = |seed: &str, name: &str| -> Vec<u8> {
        let out = pwflow_in(
            dir.path(),
            &["sample", "--model", model, "-n", "200", "--seed", seed, "--out", name],
        );
        assert!(out.status.success());
        std::fs::read(dir.path().join(name)).unwrap()
    };
    assert_eq!(run("5", "a.txt"), run("5", "b.txt"));
    assert_ne!(run("5", "c.txt"), run("6", "d.txt"));
}

#[test]
fn single_component_models_sample_with_component_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_model(dir.path(), "1", "13");
    let out = pwflow_in(
        dir.path(),
        &[
            "sample",
            "--model",
            model.to_str().unwrap(),
            "-n",
            "100",
            "--provenance",
            "--out",
            "prov.txt",
        ],
    );
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("prov.txt")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "x0 x1 component z0 z1");
    for line in lines {
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[2], "0", "one-component model must label every draw 0");
    }
}

#[test]
fn evaluate_speaks_key_value_lines_for_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_model(dir.path(), "2", "14");
    let model = model.to_str().unwrap();

    let out = pwflow_in(
        dir.path(),
        &["evaluate", "--model", model, "--target", "circle-of-gaussians", "-n", "500"],
    );
    assert!(out.status.success());
    let kv = keyvals(&out);
    for key in ["target", "kl", "mc_error", "n", "clipped"] {
        assert!(kv.iter().any(|(k, _)| k == key), "missing {key}: {kv:?}");
    }
    let kl: f64 = kv.iter().find(|(k, _)| k == "kl").unwrap().1.parse().unwrap();
    assert!(kl.is_finite());

    let samples = sample_file(dir.path(), 300, 15);
    let out = pwflow_in(
        dir.path(),
        &["evaluate", "--model", model, "--samples", samples.to_str().unwrap()],
    );
    assert!(out.status.success());
    let kv = keyvals(&out);
    for key in ["avg_log_likelihood", "error_2sigma", "n"] {
        assert!(kv.iter().any(|(k, _)| k == key), "missing {key}: {kv:?}");
    }
}

#[test]
fn evaluate_rejects_dimension_mismatches_as_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_model(dir.path(), "2", "16");
    let three_d = dir.path().join("3d.txt");
    std::fs::write(&three_d, "1.0 2.0 3.0\n4.0 5.0 6.0\n").unwrap();
    let out = pwflow_in(
        dir.path(),
        &["evaluate", "--model", model.to_str().unwrap(), "--samples", three_d.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn corrupted_models_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_model(dir.path(), "2", "17");
    let mut bytes = std::fs::read(&model).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("bad.pnf");
    std::fs::write(&bad, bytes).unwrap();
    let out = pwflow_in(
        dir.path(),
        &["sample", "--model", bad.to_str().unwrap(), "-n", "5", "--out", "x.txt"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn benchmark_writes_the_documented_files_and_a_parseable_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("bench");
    let out = Command::new(env!("CARGO_BIN_EXE_pwflow"))
        .args(["benchmark", "--target", "circle-of-gaussians", "--runs", "1"])
        .args(["--train-samples", "500", "--kl-samples", "200", "--dump-samples", "100"])
        .args(["--clusters", "2", "--hidden", "8,8", "--max-epochs", "25"])
        .args(["--patience-frac", "0.5", "--batch-size", "128", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let rows = pwflow_cli::report::parse_report(&out_dir.join("report.tsv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].method, "maf");
    assert_eq!(rows[0].cost, 1.0, "single-flow cost is 1 by definition");
    assert_eq!(rows[1].method, "pnf");
    // runs=1: the combined error must equal the single run's error.
    let meta = std::fs::read_to_string(
        out_dir.join("circle-of-gaussians.pnf.run0.meta"),
    )
    .unwrap();
    let run_err: f64 = meta
        .lines()
        .find_map(|l| l.strip_prefix("mc_error="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((rows[1].kl_error - run_err).abs() < 1e-15);

    for name in [
        "timing.txt",
        "circle-of-gaussians.maf.run0.meta",
        "circle-of-gaussians.maf.samples.txt",
        "circle-of-gaussians.pnf.samples.txt",
    ] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
}
