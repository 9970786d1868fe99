//! End-to-end runs of the binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_subjvid");

const TINY: &str = r#"{
  "schema_version": 1,
  "name": "tiny",
  "data": {"n_subjects": 2, "seed": 0},
  "pretrain": {"steps": 6},
  "encoder": {"steps": 4, "batch": 4},
  "customize": {"token_steps": 3, "weight_steps": 3},
  "sampling": {"frames": 3},
  "ttro": {"iters": 2},
  "ablation": {"seeds": 2, "subjects": 2, "workers": 1}
}"#;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = run(args, cwd);
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--config", s(&config)], &root);
    Fixture {
        _dir: dir,
        root,
        data,
        config,
    }
}

#[test]
fn full_pipeline_through_the_cli() {
    let f = fixture();
    let root = &f.root;
    for name in ["manifest.json", "base.ckpt", "encoder.ckpt", "logs/pretrain_loss.csv", "subject_01/ref_0.png"] {
        assert!(f.data.join(name).exists(), "{name} missing");
    }

    let subject = f.data.join("subject_00");
    let ckpt = root.join("s0.ckpt");
    ok(&["customize", "--subject", s(&subject), "--out", s(&ckpt), "--config", s(&f.config)], root);
    let loss = fs::read_to_string(root.join("s0.loss.csv")).unwrap();
    assert!(loss.starts_with("phase,step,loss\n"));
    assert_eq!(loss.lines().filter(|l| l.starts_with("token,")).count(), 3);
    assert_eq!(loss.lines().filter(|l| l.starts_with("heldout_")).count(), 3);

    let run_dir = root.join("runs/gen");
    let attn = root.join("attn");
    ok(
        &[
            "generate", "--ckpt", s(&ckpt), "--prompt", "a <S*> circle moving left on grass", "--frames", "3", "--spm", "on",
            "--tpm", "off", "--seed", "4", "--dump-attn", s(&attn), "--out", s(&run_dir),
        ],
        root,
    );
    for f in ["frames/video/frame_000.png", "frames/video/frame_002.png", "frames/video/reference.png", "latents/video.svta", "logs/video_steps.csv", "logs/timing.csv"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let steps = fs::read_to_string(run_dir.join("logs/video_steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 101, "header plus one row per step");
    let dump = subjvid::archive::Archive::load(&attn.join("attention.svta"), subjvid::archive::Kind::Archive).unwrap();
    assert!(dump.tensors.contains_key("flow/from_reference"));
    assert!(dump.tensors.contains_key("cost/reference_to_f00"));
    assert!(dump.tensors.keys().any(|k| k.starts_with("video/dec.0/f02/")));

    let latents = run_dir.join("latents/video.svta");
    let out = ok(
        &["ttro", "--in", s(&latents), "--ckpt", s(&ckpt), "--refs", s(&subject), "--iters", "2", "--lambda", "100", "--mask", "attn"],
        root,
    );
    assert_eq!(out.lines().filter(|l| l.starts_with("iteration")).count(), 2);
    let rewards = fs::read_to_string(run_dir.join("logs/ttro_rewards.csv")).unwrap();
    assert_eq!(rewards.lines().count(), 3);
    assert!(run_dir.join("latents/ttro.svta").exists());

    // Generated latents carry no ground-truth masks.
    let (c, err) = code(
        &["ttro", "--in", s(&latents), "--ckpt", s(&ckpt), "--refs", s(&subject), "--mask", "gt"],
        root,
    );
    assert_eq!(c, 2, "{err}");

    ok(&["eval", "--latents", s(&run_dir.join("latents/ttro.svta")), "--ckpt", s(&ckpt), "--refs", s(&subject)], root);
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("latents,prompt,proxy_t,proxy_i,smoothness,counted_frames\n"));

    let table = ok(&["timing", "--run", s(&run_dir)], root);
    assert!(table.contains("sample"));
    assert!(table.contains("frames per video: 3"));
}

#[test]
fn ablate_twice_gives_identical_metrics() {
    let f = fixture();
    let runs_a = f.root.join("a");
    let runs_b = f.root.join("b");
    ok(&["ablate", "--config", s(&f.config), "--data", s(&f.data), "--runs", s(&runs_a)], &f.root);
    ok(&["ablate", "--config", s(&f.config), "--data", s(&f.data), "--runs", s(&runs_b)], &f.root);
    let a = fs::read(runs_a.join("tiny/metrics.csv")).unwrap();
    let b = fs::read(runs_b.join("tiny/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 5);
    for name in ["summary.csv", "sign_tests.csv", "summary.svg", "config.json", "logs/timing.csv"] {
        assert!(runs_a.join("tiny").join(name).exists(), "{name} missing");
    }
    let table = ok(&["timing", "--run", s(&runs_a.join("tiny"))], &f.root);
    assert!(table.contains("ttro"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let bad_cfg = root.join("bad.json");
    fs::write(&bad_cfg, r#"{"schema_version": 1, "unknown_key": true}"#).unwrap();
    let (c, err) = code(&["gen-data", "--out", "x", "--config", s(&bad_cfg), "--skip-models"], root);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("unknown_key"), "{err}");

    let future = root.join("future.json");
    fs::write(&future, r#"{"schema_version": 3}"#).unwrap();
    assert_eq!(code(&["gen-data", "--out", "x", "--config", s(&future), "--skip-models"], root).0, 2);

    // Flag errors are usage errors.
    assert_eq!(code(&["generate", "--ckpt", "m", "--prompt", "p", "--spm", "maybe"], root).0, 2);
    assert_eq!(code(&["no-such-command"], root).0, 2);

    // Missing or corrupt inputs are runtime failures.
    let (c, _) = code(&["generate", "--ckpt", "missing.ckpt", "--prompt", "a <S*> circle"], root);
    assert_eq!(c, 3);
    let junk = root.join("junk.ckpt");
    fs::write(&junk, b"NOPE\x01\x00\x00\x00").unwrap();
    let (c, err) = code(&["generate", "--ckpt", s(&junk), "--prompt", "a <S*> circle"], root);
    assert_eq!(c, 3);
    assert!(err.contains("bad magic"), "{err}");

    ok(&["gen-data", "--out", s(&root.join("corpus")), "--skip-models"], root);
    let (c, err) = code(&["ablate", "--data", s(&root.join("corpus")), "--runs", s(&root.join("runs"))], root);
    assert_eq!(c, 3, "{err}");
    assert!(err.contains("base.ckpt"), "{err}");
}

#[test]
fn timing_of_an_empty_log_is_an_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    fs::create_dir_all(run_dir.join("logs")).unwrap();
    fs::write(run_dir.join("logs/timing.csv"), "").unwrap();
    let table = ok(&["timing", "--run", s(&run_dir)], dir.path());
    assert_eq!(table.lines().count(), 1, "{table}");
    assert_eq!(fs::read_to_string(run_dir.join("timing.csv")).unwrap(), "stage,count,seconds,share\n");
}
