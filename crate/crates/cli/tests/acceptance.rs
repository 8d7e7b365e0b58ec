//! CLI acceptance: byte-level determinism of every pipeline, config
//! precedence, and error paths.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_terradiff"))
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("reading {}: {e}", p.display()))
}

/// Runs the whole pipeline (synth-gen, train, translate, change-detect,
/// roc) into `root` with a fixed seed.
fn full_pipeline(root: &Path) {
    let data = root.join("data");
    ok(bin()
        .args([
            "synth-gen",
            "--seed",
            "11",
            "--count",
            "6",
            "--size",
            "32",
            "--changes",
            "1",
        ])
        .arg("--out-dir")
        .arg(&data)
        .output()
        .unwrap());

    let ckpt = root.join("model.ckpt");
    ok(bin()
        .args(["train", "--seed", "11"])
        .arg("--data")
        .arg(data.join("manifest.txt"))
        .arg("--out-checkpoint")
        .arg(&ckpt)
        .args([
            "--epochs",
            "2",
            "--batch",
            "2",
            "--patch",
            "32",
            "--base-width",
            "8",
            "--mid-width",
            "12",
            "--t-steps",
            "64",
        ])
        .output()
        .unwrap());

    ok(bin()
        .args(["translate", "--seed", "11"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--input")
        .arg(data.join("sample_0005_lr.rsr"))
        .arg("--out")
        .arg(root.join("translated.rsr"))
        .args([
            "--n-noisy",
            "2",
            "--n-ddim",
            "4",
            "--d",
            "2",
            "--patch",
            "32",
            "--t-steps",
            "64",
        ])
        .output()
        .unwrap());

    ok(bin()
        .args([
            "change-detect",
            "--seed",
            "11",
            "--omega",
            "0.05",
            "--w-otsu",
            "31",
        ])
        .arg("--pre")
        .arg(data.join("sample_0000_hr.rsr"))
        .arg("--post")
        .arg(data.join("sample_0000_post.rsr"))
        .arg("--truth")
        .arg(data.join("sample_0000_truth.rsr"))
        .arg("--out-map")
        .arg(root.join("map.rsr"))
        .arg("--out-overlay")
        .arg(root.join("overlay.png"))
        .output()
        .unwrap());

    ok(bin()
        .args(["roc", "--seed", "11", "--w-otsu", "31"])
        .arg("--pre")
        .arg(data.join("sample_0000_hr.rsr"))
        .arg("--post")
        .arg(data.join("sample_0000_post.rsr"))
        .arg("--truth")
        .arg(data.join("sample_0000_truth.rsr"))
        .arg("--out-csv")
        .arg(root.join("roc.csv"))
        .output()
        .unwrap());
}

#[test]
fn acceptance_11_pipelines_are_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    full_pipeline(&a);
    full_pipeline(&b);

    let mut compared = Vec::new();
    // every generated raster + the manifest
    for entry in std::fs::read_dir(a.join("data")).unwrap() {
        let name = entry.unwrap().file_name();
        let pa = a.join("data").join(&name);
        let pb = b.join("data").join(&name);
        assert_eq!(read(&pa), read(&pb), "mismatch in {name:?}");
        compared.push(PathBuf::from(&name));
    }
    for name in [
        "model.ckpt",
        "model.curve.csv",
        "translated.rsr",
        "map.rsr",
        "roc.csv",
    ] {
        assert_eq!(
            read(&a.join(name)),
            read(&b.join(name)),
            "mismatch in {name}"
        );
        compared.push(PathBuf::from(name));
    }

    // the ROC table carries the full sweep
    let roc = String::from_utf8(read(&a.join("roc.csv"))).unwrap();
    assert_eq!(roc.lines().count(), 102, "header + 101 rows");

    println!(
        "ACCEPTANCE 11 (CLI determinism): PASS — {} artifacts byte-identical across independent reruns",
        compared.len()
    );
}

#[test]
fn config_file_flags_precedence() {
    let dir = tempfile::tempdir().unwrap();

    // generate a small input to translate
    let data = dir.path().join("data");
    ok(bin()
        .args(["synth-gen", "--seed", "3", "--count", "1", "--size", "32"])
        .arg("--out-dir")
        .arg(&data)
        .output()
        .unwrap());
    let ckpt = dir.path().join("m.ckpt");
    ok(bin()
        .args(["train", "--seed", "3"])
        .arg("--data")
        .arg(data.join("manifest.txt"))
        .arg("--out-checkpoint")
        .arg(&ckpt)
        .args([
            "--epochs",
            "1",
            "--batch",
            "1",
            "--patch",
            "32",
            "--base-width",
            "4",
            "--mid-width",
            "6",
            "--t-steps",
            "16",
        ])
        .output()
        .unwrap());

    // file sets n_noisy = 4; the flag overrides it to 2
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        "n_noisy = 4\nn_ddim = 4\nd = 2\npatch = 32\nt_steps = 16\n",
    )
    .unwrap();
    let out_rsr = dir.path().join("t.rsr");
    ok(bin()
        .arg("--config")
        .arg(&cfg_path)
        .args(["translate", "--seed", "3", "--n-noisy", "2"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--input")
        .arg(data.join("sample_0000_lr.rsr"))
        .arg("--out")
        .arg(&out_rsr)
        .output()
        .unwrap());
    let sidecar = dir.path().join("t.rsr.cfg");
    let echoed = String::from_utf8(read(&sidecar)).unwrap();
    assert!(
        echoed.lines().any(|l| l == "n_noisy = 2"),
        "flag must win:\n{echoed}"
    );
    assert!(
        echoed.lines().any(|l| l == "n_ddim = 4"),
        "file value holds:\n{echoed}"
    );

    // the sidecar is a fixed point: rerunning from it echoes itself
    let out2 = dir.path().join("t2.rsr");
    ok(bin()
        .arg("--config")
        .arg(&sidecar)
        .arg("translate")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--input")
        .arg(data.join("sample_0000_lr.rsr"))
        .arg("--out")
        .arg(&out2)
        .output()
        .unwrap());
    assert_eq!(read(&sidecar), read(&dir.path().join("t2.rsr.cfg")));
    assert_eq!(read(&out_rsr), read(&out2), "same config, same output");
}

#[test]
fn invalid_arguments_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();

    // omega outside [0, 1]
    let out = bin()
        .args(["change-detect", "--omega", "1.5"])
        .arg("--pre")
        .arg(dir.path().join("x.rsr"))
        .arg("--post")
        .arg(dir.path().join("y.rsr"))
        .arg("--out-map")
        .arg(dir.path().join("m.rsr"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(
        msg.contains("omega"),
        "error names the offending key: {msg}"
    );

    // translating with a missing checkpoint fails cleanly
    let out = bin()
        .arg("translate")
        .arg("--checkpoint")
        .arg(dir.path().join("nope.ckpt"))
        .arg("--input")
        .arg(dir.path().join("nope.rsr"))
        .arg("--out")
        .arg(dir.path().join("o.rsr"))
        .output()
        .unwrap();
    assert!(!out.status.success());

    // unknown key in the config file
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["synth-gen", "--count", "1"])
        .arg("--out-dir")
        .arg(dir.path().join("d"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    // unknown subcommand
    let out = bin().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}
