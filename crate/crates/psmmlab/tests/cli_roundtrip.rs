//! End-to-end runs of the compiled binary: synth -> pool -> split ->
//! train -> eval -> report, plus the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_psmmlab"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary should spawn");
    assert!(
        out.status.success(),
        "psmmlab {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

#[test]
fn the_binary_runs_the_whole_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let splits = dir.path().join("splits");
    let run = dir.path().join("run");
    let evald = dir.path().join("eval");
    let report = dir.path().join("report.txt");

    run_ok(&[
        "synth", "--root", &p(&data), "--subjects", "1", "--frames", "4", "--side", "8",
        "--seed", "3",
    ]);
    assert!(data.join("A_001/real_1/color/frame_0000.png").exists());

    let out = run_ok(&["pool", "--root", &p(&data), "--k", "3", "--modalities", "color"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("pooled"));
    assert!(data.join("A_001/real_1/color/dyn/dyn_0000.png").exists());

    run_ok(&["split", "--root", &p(&data), "--protocol", "2_1", "--out", &p(&splits)]);
    let train_manifest = std::fs::read_to_string(splits.join("train.txt")).unwrap();
    assert!(train_manifest.contains("A_001/real_1/color"));
    assert!(splits.join("valid.txt").exists());
    assert!(splits.join("test.txt").exists());

    run_ok(&[
        "train", "--root", &p(&data), "--protocol", "2_1", "--variant", "nhf", "--preset",
        "toy", "--modalities", "color", "--norm", "none", "--epochs", "1", "--batch", "4",
        "--lr", "0.01", "--decay-epochs", "", "--k", "3", "--seed", "5", "--out", &p(&run),
    ]);
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.contains("epoch=1"), "{log}");
    assert!(run.join("checkpoint/index.txt").exists());
    assert!(run.join("checkpoint/weights.bin").exists());

    let out = run_ok(&[
        "eval", "--root", &p(&data), "--protocol", "2_1", "--ckpt",
        &p(&run.join("checkpoint")), "--out", &p(&evald), "--split", "train",
        "--threshold-split", "train",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("threshold="), "{stdout}");
    assert!(stdout.contains("acer"), "{stdout}");
    assert!(evald.join("scores_train.txt").exists());
    assert!(evald.join("report.kv").exists());

    let out = run_ok(&["report", &p(&evald.join("report.kv")), "--out", &p(&report)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("2_1"), "{stdout}");
    assert!(report.exists());
}

#[test]
fn input_errors_exit_with_code_2() {
    let out = bin()
        .args(["train", "--root", "/nonexistent", "--protocol", "1_1", "--variant", "bogus",
               "--out", "/tmp/never"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("variant"));

    let out = bin().args(["pool", "--root", "/nonexistent-psmmlab", "--k", "3"]).output().unwrap();
    assert_eq!(exit_code(&out), 2);

    // Clap usage errors share the input-error code.
    let out = bin().args(["no-such-command"]).output().unwrap();
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn checkpoint_mismatches_exit_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    run_ok(&[
        "synth", "--root", &p(&data), "--subjects", "1", "--frames", "4", "--side", "8",
        "--seed", "9",
    ]);
    run_ok(&[
        "train", "--root", &p(&data), "--protocol", "2_1", "--variant", "nhf", "--preset",
        "toy", "--modalities", "color", "--norm", "none", "--epochs", "1", "--batch", "4",
        "--lr", "0.01", "--decay-epochs", "", "--k", "3", "--seed", "5", "--out", &p(&run),
    ]);
    let out = bin()
        .args([
            "eval", "--root", &p(&data), "--protocol", "2_1", "--ckpt",
            &p(&run.join("checkpoint")), "--out", &p(&dir.path().join("eval")), "--split",
            "train", "--threshold-split", "train", "--variant", "psmm",
        ])
        .output()
        .unwrap();
    assert_eq!(
        exit_code(&out),
        4,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn gradcheck_subcommand_reports_a_pass() {
    let out = run_ok(&[
        "gradcheck", "--variant", "sdnet", "--preset", "toy", "--modalities", "color",
        "--norm", "none", "--samples", "25", "--seed", "1",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pass=true"), "{stdout}");
}

#[test]
fn the_thread_cap_is_validated() {
    let out = bin()
        .env("PSMMLAB_THREADS", "not-a-number")
        .args(["synth", "--root", "/tmp/ignored", "--subjects", "1"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 2);

    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("PSMMLAB_THREADS", "2")
        .args([
            "synth", "--root", &p(&dir.path().join("d")), "--subjects", "1", "--frames", "2",
            "--side", "8",
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0);
}
