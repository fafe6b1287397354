//! End-to-end exercise of the CLI: each stage command run in pipeline
//! order against a shared output directory, plus failure modes.

use std::path::Path;
use std::process::{Command, Output};

fn deepkem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepkem"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    // Small enough for CI, big enough to contain the 15 mm tumor.
    let out = dir.join("out");
    let cfg = format!(
        "\
phantom.width = 32
phantom.height = 32
phantom.pixel_size_mm = 3.0
geometry.n_angles = 40
sim.total_counts = 1e5
schedule.frames = 2x300, 2x1500
composite.windows = 0-600, 600-3600
kernel.k = 8
kernel.window = 7
recon.iterations = 4
train.iterations = 5
train.d = 5
train.hidden_channels = 3
methods = mlem, kem, deep-kem
output.dir = {}
",
        out.display()
    );
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn staged_commands_produce_the_full_artifact_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    for stage in [
        vec!["simulate", "--config", cfg],
        vec!["rebin", "--config", cfg],
        vec!["build-kernel", "--config", cfg],
        vec!["train-kernel", "--config", cfg],
        vec!["reconstruct", "--config", cfg, "--method", "mlem"],
        vec!["reconstruct", "--config", cfg, "--method", "kem"],
        vec!["reconstruct", "--config", cfg, "--method", "deep-kem"],
        vec!["attention", "--config", cfg, "--method", "deep-kem"],
        vec!["metrics", "--config", cfg],
    ] {
        let result = deepkem(&stage);
        assert!(
            result.status.success(),
            "stage {stage:?} failed:\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&result.stdout),
            String::from_utf8_lossy(&result.stderr)
        );
    }

    for path in [
        "phantom/labels.kr",
        "sino/counts_000.kr",
        "composites/composite_0.kr",
        "priors/prior_0.kr",
        "kernels/empirical.kkm",
        "kernels/deep.kkm",
        "network/network.knet",
        "network/train_loss.csv",
        "recon/mlem/frame_003.kr",
        "recon/kem/frame_003.kr",
        "recon/deep-kem/frame_003.kr",
        "metrics/frames.csv",
    ] {
        assert!(out.join(path).exists(), "missing artifact {path}");
    }

    let metrics = std::fs::read_to_string(out.join("metrics/frames.csv")).unwrap();
    assert!(metrics.starts_with("method,frame,snr_db\n"));
    // 3 methods x 4 frames + header.
    assert_eq!(metrics.lines().count(), 1 + 3 * 4);

    let attention: Vec<_> = std::fs::read_dir(out.join("attention")).unwrap().collect();
    assert!(!attention.is_empty());
}

#[test]
fn run_all_matches_staged_outputs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_tiny_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let staged_out = dir.path().join("out");

    for stage in [
        vec!["simulate", "--config", cfg],
        vec!["rebin", "--config", cfg],
        vec!["build-kernel", "--config", cfg],
        vec!["train-kernel", "--config", cfg],
        vec!["reconstruct", "--config", cfg, "--method", "deep-kem"],
    ] {
        assert!(deepkem(&stage).status.success());
    }

    let all_out = dir.path().join("all");
    let result = deepkem(&[
        "run-all",
        "--config",
        cfg,
        "--out",
        all_out.to_str().unwrap(),
    ]);
    assert!(
        result.status.success(),
        "run-all failed: {}",
        String::from_utf8_lossy(&result.stderr)
    );

    for artifact in [
        "sino/counts_001.kr",
        "kernels/empirical.kkm",
        "kernels/deep.kkm",
        "network/network.knet",
        "recon/deep-kem/frame_002.kr",
    ] {
        let a = std::fs::read(staged_out.join(artifact)).unwrap();
        let b = std::fs::read(all_out.join(artifact)).unwrap();
        assert_eq!(a, b, "artifact {artifact} differs between staged and run-all");
    }
}

#[test]
fn missing_artifacts_fail_with_stage_tagged_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_tiny_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();

    // rebin before simulate: no manifest yet.
    let result = deepkem(&["rebin", "--config", cfg]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("error:"), "stderr: {stderr}");
    assert!(stderr.contains("simulate"), "stderr: {stderr}");
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "kernel.window = 20\n").unwrap();
    let result = deepkem(&["simulate", "--config", path.to_str().unwrap()]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("odd"), "stderr: {stderr}");
}

#[test]
fn seed_override_changes_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_tiny_config(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    assert!(deepkem(&["simulate", "--config", cfg, "--out", out_a.to_str().unwrap()])
        .status
        .success());
    assert!(deepkem(&[
        "simulate",
        "--config",
        cfg,
        "--out",
        out_b.to_str().unwrap(),
        "--seed",
        "7",
    ])
    .status
    .success());
    assert!(deepkem(&[
        "simulate",
        "--config",
        cfg,
        "--out",
        out_c.to_str().unwrap(),
        "--seed",
        "7",
    ])
    .status
    .success());

    let a = std::fs::read(out_a.join("sino/counts_000.kr")).unwrap();
    let b = std::fs::read(out_b.join("sino/counts_000.kr")).unwrap();
    let c = std::fs::read(out_c.join("sino/counts_000.kr")).unwrap();
    assert_ne!(a, b, "different seeds must change the sampled counts");
    assert_eq!(b, c, "same seed must reproduce counts bit-exactly");
}
