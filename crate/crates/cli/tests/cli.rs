use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fullglow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fullglow")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const TINY: &str = "n_blocks=2\nn_flows=1\nimage_size=8\nhidden_channels=4\niterations=3\ncheckpoint_interval=2\ninit_batch=2\n";

/// Generates data and trains a tiny model; returns the temp dir, data dir
/// and checkpoint path.
fn trained(extra: &str) -> (TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    let out = fullglow(&["gen-data", "--n", "4", "--size", "8", "--seed", "3", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, format!("{TINY}{extra}")).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let out = fullglow(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (dir, data, ckpt)
}

#[test]
fn gen_data_writes_every_pair() {
    let dir = TempDir::new().unwrap();
    let out = fullglow(&["gen-data", "--n", "3", "--size", "16", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let files = std::fs::read_dir(dir.path().join("pairs")).unwrap().count();
    assert_eq!(files, 9);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&fullglow(&["frobnicate"])), 1);
    assert_eq!(code(&fullglow(&["verify", "--fast"])), 1);
    assert_eq!(code(&fullglow(&[])), 1);
    assert_eq!(code(&fullglow(&["--help"])), 0);
}

#[test]
fn invalid_configs_exit_with_two_and_name_the_keys() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    fullglow(&["gen-data", "--n", "1", "--size", "8", "--out", s(&data)]);
    let cfg = dir.path().join("bad.cfg");
    let ckpt = dir.path().join("m.ckpt");

    std::fs::write(&cfg, "image_size=12\nlr=0\n").unwrap();
    let out = fullglow(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("image_size") && stderr(&out).contains("lr"), "{}", stderr(&out));

    std::fs::write(&cfg, "n_blocks=2\nwarmup=10\n").unwrap();
    let out = fullglow(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("warmup"), "{}", stderr(&out));
    assert!(!ckpt.exists(), "no work before validation");
}

#[test]
fn missing_inputs_exit_with_four() {
    let dir = TempDir::new().unwrap();
    let out = fullglow(&["bpd", "--ckpt", s(&dir.path().join("none.ckpt")), "--data", s(dir.path())]);
    assert_eq!(code(&out), 4);
    let out = fullglow(&["train", "--data", s(&dir.path().join("nothing")), "--out", s(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn train_writes_checkpoint_trace_and_config() {
    let (dir, data, ckpt) = trained("");
    assert!(ckpt.exists());
    let trace = std::fs::read_to_string(dir.path().join("model.trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "iteration,loss,bpd_source,bpd_target");
    assert_eq!(lines.len(), 4);
    assert!(dir.path().join("model.run.cfg").exists());

    let out = fullglow(&["bpd", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let value: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(value.is_finite());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (dir, data, ckpt) = trained("");
    let first = std::fs::read(&ckpt).unwrap();
    let cfg = dir.path().join("run.cfg");
    let again = dir.path().join("again.ckpt");
    let out = fullglow(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&again)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(first, std::fs::read(&again).unwrap());

    let out = fullglow(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt), "--iterations", "5", "--resume"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trace = std::fs::read_to_string(dir.path().join("model.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3, "resumed run traces iterations 3 and 4 only");
}

#[test]
fn sample_writes_n_files_and_zero_temperature_ignores_the_seed() {
    let (dir, data, ckpt) = trained("use_boundary=true\n");
    let seg = data.join("pairs/00000_seg.ppm");
    let run = |seed: &str, t: &str, out: &Path| {
        let o = fullglow(&["sample", "--ckpt", s(&ckpt), "--cond", s(&seg), "--temperature", t, "--n", "3", "--seed", seed, "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run("1", "0", &a);
    run("2", "0", &b);
    assert_eq!(std::fs::read_dir(&a).unwrap().count(), 3);
    for i in 0..3 {
        let name = format!("sample_{i:03}.ppm");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    let c = dir.path().join("c");
    let d = dir.path().join("d");
    run("1", "1.0", &c);
    run("2", "1.0", &d);
    assert_ne!(std::fs::read(c.join("sample_000.ppm")).unwrap(), std::fs::read(d.join("sample_000.ppm")).unwrap());
}

#[test]
fn transfer_writes_an_image_and_leaves_inputs_alone() {
    let (dir, data, ckpt) = trained("");
    let photo = data.join("pairs/00000_photo.ppm");
    let seg_a = data.join("pairs/00000_seg.ppm");
    let seg_b = data.join("pairs/00001_seg.ppm");
    let before = std::fs::read(&photo).unwrap();
    let out_img = dir.path().join("moved.ppm");
    let out = fullglow(&[
        "transfer",
        "--ckpt",
        s(&ckpt),
        "--content-photo",
        s(&photo),
        "--content-seg",
        s(&seg_a),
        "--target-seg",
        s(&seg_b),
        "--out",
        s(&out_img),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(std::fs::read(&out_img).unwrap().starts_with(b"P6"));
    assert_eq!(before, std::fs::read(&photo).unwrap());
}

#[test]
fn mismatched_image_size_is_a_validation_error() {
    let (dir, _, ckpt) = trained("");
    let big = dir.path().join("big");
    fullglow(&["gen-data", "--n", "1", "--size", "16", "--out", s(&big)]);
    let out = fullglow(&["sample", "--ckpt", s(&ckpt), "--cond", s(&big.join("pairs/00000_seg.ppm")), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn quick_verify_exits_zero() {
    let out = fullglow(&["verify", "--quick"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}{}", stderr(&out));
    assert_eq!(stdout.lines().filter(|l| l.starts_with('[')).count(), 11);
}
