//! Black-box tests of the command-line interface.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cinesynth"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        "[phantom]\nnum_frames = 3\nnum_slices = 4\ngrid_size = 48\nin_plane_spacing = 2.5\n",
    )
    .unwrap();
    path
}

#[test]
fn phantom_writes_labels_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("phantom");
    let status = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["phantom", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("labels.nii.gz").exists());
    assert!(out.join("frame_times.txt").exists());
    assert!(out.join("config.resolved.toml").exists());

    let vol = cinesynth::nifti::read(out.join("labels.nii.gz")).unwrap();
    assert_eq!(vol.header.rank(), 4);
    assert_eq!(vol.header.extent(0), 48);
    assert_eq!(vol.header.extent(2), 4);
    assert_eq!(vol.header.extent(3), 3);

    // Frame times: one line per frame.
    let times = std::fs::read_to_string(out.join("frame_times.txt")).unwrap();
    assert_eq!(times.lines().count(), 3);

    // The snapshot reproduces the run.
    let snap = cinesynth::config::RunConfig::from_file(out.join("config.resolved.toml")).unwrap();
    assert_eq!(snap.phantom.num_frames, 3);
    assert_eq!(snap.phantom.grid_size, 48);
}

#[test]
fn unknown_config_key_fails_with_key_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[phantom]\nnum_framez = 3\n").unwrap();
    let out = bin()
        .args(["--config"])
        .arg(&cfg)
        .args(["phantom", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("num_framez"), "stderr: {stderr}");
    assert!(stderr.starts_with("error:"), "single parsable line");
}

#[test]
fn missing_synth_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["synth", "--checkpoint"])
        .arg(dir.path().join("none.ckpt"))
        .args(["--out"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--labels") || stderr.contains("--phantom"), "{stderr}");
}

#[test]
fn help_lists_every_subcommand() {
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["phantom", "preprocess", "train", "synth", "montage", "report"] {
        assert!(text.contains(cmd), "help must list {cmd}");
    }
}

#[test]
fn out_root_env_var_prefixes_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let status = bin()
        .env("CINESYNTH_OUT_ROOT", dir.path())
        .args(["--config"])
        .arg(&cfg)
        .args(["phantom", "--out", "nested/phantom"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("nested/phantom/labels.nii.gz").exists());
}
