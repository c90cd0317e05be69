//! Black-box tests of the installed binary: exit codes, artifact layout,
//! config precedence, and byte-stable re-runs.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_irdfusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Recursively collects (relative path, bytes) for every file under a root,
/// sorted so two trees can be compared entry by entry.
fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, acc: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, acc);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                acc.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc);
    acc.sort_by(|a, b| a.0.cmp(&b.0));
    acc
}

const TINY: &[&str] = &[
    "--h", "4", "--w", "4", "--n-objects-max", "1", "--epochs", "2", "--n-train", "3", "--n-test",
    "2", "--k", "2",
];

#[test]
fn no_arguments_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("Usage"), "usage text should land on stderr");
}

#[test]
fn help_and_version_exit_clean() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["fuse", "--help"]).status.code(), Some(0));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn identity_check_passes_and_reports_json() {
    let out = run(&["check-identity", "--seeds", "10"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("\"pass\": true"), "stdout: {text}");
    assert!(text.contains("\"max_deviation\""));
}

#[test]
fn an_unreachable_tolerance_is_a_verification_failure() {
    let out = run(&["check-identity", "--seeds", "5", "--tol", "1e-20"]);
    assert_eq!(out.status.code(), Some(2), "impossibly tight tolerance must exit 2");
    assert!(stdout_of(&out).contains("\"pass\": false"));
}

#[test]
fn gradient_check_passes_from_the_command_line() {
    let out = run(&["grad-check", "--k", "1"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("\"pass\": true"));
}

#[test]
fn mismatched_map_shapes_are_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small");
    let large = dir.path().join("large");
    let gen_small = run(&["gen-data", "--h", "4", "--w", "4", "--n-train", "1", "--n-test", "1",
        "--out", small.to_str().unwrap()]);
    assert_eq!(gen_small.status.code(), Some(0), "stderr: {}", stderr_of(&gen_small));
    let gen_large = run(&["gen-data", "--h", "6", "--w", "6", "--n-train", "1", "--n-test", "1",
        "--out", large.to_str().unwrap()]);
    assert_eq!(gen_large.status.code(), Some(0), "stderr: {}", stderr_of(&gen_large));

    let out = run(&[
        "fuse",
        "--map-v", small.join("train_0000_v.irdt").to_str().unwrap(),
        "--map-t", large.join("train_0000_t.irdt").to_str().unwrap(),
        "--out", dir.path().join("fused").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(
        err.contains("[8, 4, 4]") && err.contains("[8, 6, 6]"),
        "both shapes should be spelled out, got: {err}"
    );
}

#[test]
fn invalid_values_name_the_offending_field() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--dropout-p", "-0.2", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("dropout_p"), "stderr: {}", stderr_of(&out));

    let out = run(&["train", "--k", "0", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains('K'), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_config_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, "{\"bogus_key\": 1}").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--out",
        dir.path().join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("bogus_key"), "stderr: {}", stderr_of(&out));
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        "{\"K\": 2, \"h\": 4, \"w\": 4, \"epochs\": 1, \"n_train\": 2, \"n_test\": 1}",
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--k", "3", "--out",
        out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let report = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    assert!(report.contains("\"K\": 3"), "flag should win over the file: {report}");
}

#[test]
fn training_writes_report_and_reloadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let gen = run(&[&["gen-data"][..], TINY, &["--out", data.to_str().unwrap()]].concat());
    assert_eq!(gen.status.code(), Some(0), "stderr: {}", stderr_of(&gen));

    let trained = run(&[
        &["train"][..],
        TINY,
        &["--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()],
    ]
    .concat());
    assert_eq!(trained.status.code(), Some(0), "stderr: {}", stderr_of(&trained));
    assert!(run_dir.join("report.json").is_file());
    assert!(run_dir.join("checkpoint").join("checkpoint.json").is_file());

    let eval = run(&[
        "eval",
        "--checkpoint", run_dir.join("checkpoint").to_str().unwrap(),
        "--data", data.to_str().unwrap(),
    ]);
    assert_eq!(eval.status.code(), Some(0), "stderr: {}", stderr_of(&eval));
    assert!(stdout_of(&eval).contains("\"soft_iou\""));
}

#[test]
fn fusing_a_generated_pair_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let fused = dir.path().join("fused");
    let gen = run(&[&["gen-data"][..], TINY, &["--out", data.to_str().unwrap()]].concat());
    assert_eq!(gen.status.code(), Some(0));

    let out = run(&[
        "fuse",
        "--map-v", data.join("train_0000_v.irdt").to_str().unwrap(),
        "--map-t", data.join("train_0000_t.irdt").to_str().unwrap(),
        "--k", "2",
        "--out", fused.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    for name in ["fuse.json", "fused.irdt", "fused.pgm", "iter1_v.pgm", "iter1_t.pgm",
        "iter2_v.pgm", "iter2_t.pgm"] {
        assert!(fused.join(name).is_file(), "missing artifact {name}");
    }
    let manifest = std::fs::read_to_string(fused.join("fuse.json")).unwrap();
    assert!(manifest.contains("\"lambdas_v\""));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let gen = run(&[&["gen-data"][..], TINY, &["--out", out_dir.to_str().unwrap()]].concat());
        assert_eq!(gen.status.code(), Some(0));
    }
    assert_eq!(tree_bytes(&a), tree_bytes(&b), "gen-data must be reproducible");

    let (ra, rb) = (dir.path().join("run_a"), dir.path().join("run_b"));
    for out_dir in [&ra, &rb] {
        let trained = run(&[
            &["train"][..],
            TINY,
            &["--data", a.to_str().unwrap(), "--out", out_dir.to_str().unwrap()],
        ]
        .concat());
        assert_eq!(trained.status.code(), Some(0), "stderr: {}", stderr_of(&trained));
    }
    assert_eq!(tree_bytes(&ra), tree_bytes(&rb), "train must be reproducible");
}
