//! End-to-end tests of the `gradsense` binary.

use std::path::Path;
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_gradsense")
}

fn run(args: &[&str]) -> Output {
    Command::new(binary()).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.conf");
    let base = "\
# desk-scale smoke experiment
dataset = synth
synth_pattern = blocks
synth_shape = 1x8x8
num_classes = 2
arch = mlp:h=8
batch_size = 2
iterations = 3
alpha = 0.999
tv_weight = 0.005
strategy = constant
constant_s = 1
record_every = 0
";
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

#[test]
fn attack_runs_end_to_end_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "methods = magia,dlg\nseeds = 1,2\n");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    for out in [&out_a, &out_b] {
        let result = run(&["attack", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(
            result.status.success(),
            "stdout: {}\nstderr: {}",
            String::from_utf8_lossy(&result.stdout),
            String::from_utf8_lossy(&result.stderr)
        );
    }

    let report_a = std::fs::read_to_string(out_a.join("report.csv")).unwrap();
    let report_b = std::fs::read_to_string(out_b.join("report.csv")).unwrap();
    assert_eq!(report_a.lines().count(), 5, "header plus 4 runs:\n{report_a}");
    assert!(report_a.lines().nth(1).unwrap().starts_with("dlg-s1,"));

    // Identical up to the wall-time column, which measures real time.
    let strip_wall = |text: &str| -> String {
        text.lines()
            .map(|line| {
                let mut cols: Vec<&str> = line.split(',').collect();
                cols.pop();
                cols.join(",")
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip_wall(&report_a), strip_wall(&report_b));

    for method in ["magia", "dlg"] {
        for seed in [1, 2] {
            let trace_a = std::fs::read(out_a.join(format!("trace_{method}_s{seed}.csv"))).unwrap();
            let trace_b = std::fs::read(out_b.join(format!("trace_{method}_s{seed}.csv"))).unwrap();
            assert_eq!(trace_a, trace_b, "trace for {method} seed {seed} differs");
            for slot in 0..2 {
                let img = out_a.join(format!("recon_{method}_s{seed}_{slot:02}.pgm"));
                let a = std::fs::read(&img).unwrap();
                let b = std::fs::read(out_b.join(img.file_name().unwrap())).unwrap();
                assert_eq!(a, b, "image {img:?} differs");
            }
        }
    }
}

#[test]
fn method_and_seed_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "methods = magia,dlg\nseeds = 1,2,3\n");
    let out = dir.path().join("out");
    let result = run(&[
        "attack",
        "--config",
        config.to_str().unwrap(),
        "--method",
        "dlg",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(report.lines().nth(1).unwrap().starts_with("dlg-s9,"));
}

#[test]
fn set_overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "methods = dlg\nseeds = 1\n");
    let out = dir.path().join("out");
    let result = run(&[
        "attack",
        "--config",
        config.to_str().unwrap(),
        "--set",
        "iterations=2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let trace = std::fs::read_to_string(out.join("trace_dlg_s1.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3); // header + 2 iterations
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "hyperdrive = on\n");
    let result = run(&["attack", "--config", config.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&result.stderr).contains("hyperdrive"));
}

#[test]
fn bad_strategy_exits_with_config_code_and_lists_options() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "strategy = warp\n");
    let result = run(&["attack", "--config", config.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("rev_const"), "{stderr}");
}

#[test]
fn unwritable_output_dir_fails_without_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "methods = dlg\nseeds = 1\n");
    // A file where the output directory should be makes creation fail.
    let blocker = dir.path().join("blocked");
    std::fs::write(&blocker, b"file, not dir").unwrap();
    let out = blocker.join("sub");
    let result = run(&["attack", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(3));
    assert!(!out.join("report.csv").exists());
}

#[test]
fn verify_defaults_pass_and_write_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("verify_report.json");
    let result = run(&["verify", "--trials", "50", "--report", report.to_str().unwrap()]);
    assert!(
        result.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("[PASS] coefficient-identity"), "{stdout}");
    assert!(stdout.contains("chain-head-counterexample"), "{stdout}");
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("\"all_passed\": true"), "{json}");
}

#[test]
fn verify_rejects_excessive_identity_range() {
    let result = run(&["verify", "--b-max", "100"]);
    assert_eq!(result.status.code(), Some(3));
}

#[test]
fn bench_prints_a_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let result = run(&["bench", "--config", config.to_str().unwrap(), "--iterations", "3"]);
    assert!(result.status.success());
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("ratio:"), "{stdout}");
}
