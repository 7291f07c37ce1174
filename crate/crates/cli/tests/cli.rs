use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_onlineaug"))
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    let text = format!(
        r#"seed = 1
out_dir = "{out}"
{extra}

[dataset]
source = "glyphs"
pool = 96
reduced = 64
test = 32
size = 8

[trainer]
max_steps = 4
batch_size = 8
eval_batch = 16

[trainer.model]
cnn_widths = [4, 4, 8, 8]

[trainer.weights.dvae]
base_width = 2
hidden = 8

[trainer.weights.pvae]
base_width = 2
hidden = 8
"#,
        out = dir.join("runs").display()
    );
    fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn train(cfg: &Path, args: &[&str]) -> PathBuf {
    let out = run(bin().arg("train").arg("--config").arg(cfg).args(args));
    assert!(out.status.success());
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn baseline_run_writes_its_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let dir = train(&cfg, &["--augmenters", "none", "--deterministic"]);
    assert_eq!(dir.file_name().unwrap(), "baseline-seed1");
    let s = summary(&dir);
    assert_eq!(s["mode"], "baseline");
    assert_eq!(s["status"], "completed");
    assert_eq!(s["steps"], 4);
    assert_eq!(s["metric_kind"], "top1");
    assert_eq!(fs::read_to_string(dir.join("metrics.jsonl")).unwrap().lines().count(), 4);
    assert!(dir.join("checkpoint.ckpt").exists());
    assert!(fs::read_to_string(dir.join("config-resolved.txt")).unwrap().contains("max_steps = 4"));

    // eval reproduces the number in the summary
    let out = run(bin().arg("eval").arg("--checkpoint").arg(dir.join("checkpoint.ckpt")));
    assert!(out.status.success());
    let e: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(e, s["eval"]);

    // a second run never overwrites the first
    let again = train(&cfg, &["--augmenters", "none"]);
    assert_eq!(again.file_name().unwrap(), "baseline-seed1-2");
    assert_eq!(
        fs::read(dir.join("metrics.jsonl")).unwrap(),
        fs::read(again.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn zero_steps_writes_an_empty_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let dir = train(&cfg, &["--augmenters", "astn", "--max-steps", "0", "--seed", "5"]);
    assert_eq!(dir.file_name().unwrap(), "astn-seed5");
    assert_eq!(fs::read(dir.join("metrics.jsonl")).unwrap(), b"");
    let s = summary(&dir);
    assert_eq!(s["mode"], "augmented");
    assert_eq!(s["steps"], 0);
}

#[test]
fn same_seed_gives_identical_logs_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let a = train(&cfg, &["--augmenters", "comb"]);
    let b = train(&cfg, &["--augmenters", "comb"]);
    assert_ne!(a, b);
    for f in ["metrics.jsonl", "checkpoint.ckpt", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = train(&cfg, &["--augmenters", "comb", "--seed", "2"]);
    assert_ne!(fs::read(a.join("metrics.jsonl")).unwrap(), fs::read(c.join("metrics.jsonl")).unwrap());
}

#[test]
fn resuming_from_an_intermediate_checkpoint_finishes_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "checkpoint_every = 2");
    let full = train(&cfg, &["--augmenters", "astn,pvae"]);
    let mid = full.join("checkpoints/step-000002.ckpt");
    assert!(mid.exists());
    assert!(!full.join("checkpoints/step-000004.ckpt").exists());
    let out = run(bin().arg("train").arg("--resume").arg(&mid));
    assert!(out.status.success());
    let resumed = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert_eq!(summary(&resumed)["resumed_from"], 2);
    let lines: Vec<String> = fs::read_to_string(full.join("metrics.jsonl")).unwrap().lines().map(String::from).collect();
    let tail: Vec<String> = fs::read_to_string(resumed.join("metrics.jsonl")).unwrap().lines().map(String::from).collect();
    assert_eq!(tail, lines[2..]);
    assert_eq!(fs::read(full.join("checkpoint.ckpt")).unwrap(), fs::read(resumed.join("checkpoint.ckpt")).unwrap());
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");

    let out = run(bin().args(["eval", "--checkpoint"]).arg(tmp.path().join("nope.ckpt")));
    assert_eq!(out.status.code(), Some(4));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[trainer]\nbatch_size = 0\n").unwrap();
    let out = run(bin().arg("train").arg("--config").arg(&bad));
    assert_eq!(out.status.code(), Some(2));
    fs::write(&bad, "unknown_key = 3\n").unwrap();
    assert_eq!(run(bin().arg("train").arg("--config").arg(&bad)).status.code(), Some(2));
    assert_eq!(run(bin().arg("train").arg("--config").arg(&cfg).args(["--augmenters", "astn,bogus"])).status.code(), Some(2));

    // a checkpoint evaluated against a different config
    let dir = train(&cfg, &["--augmenters", "none", "--max-steps", "1"]);
    let ck = dir.join("checkpoint.ckpt");
    let out = run(bin().arg("eval").arg("--checkpoint").arg(&ck).arg("--config").arg(&cfg));
    assert_eq!(out.status.code(), Some(5));
    let out = run(bin().arg("train").arg("--config").arg(&cfg).arg("--resume").arg(&ck));
    assert_eq!(out.status.code(), Some(5));

    let out = run(bin().args(["gradcheck", "--component", "corrupted", "--instances", "3"]));
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAILED"));
}

#[test]
fn panels_of_untrained_augmenters_repeat_the_original() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let dir = train(&cfg, &["--augmenters", "comb", "--max-steps", "0"]);
    let ck = dir.join("checkpoint.ckpt");
    let panels = tmp.path().join("panels");

    let out = run(bin().arg("viz").arg("--checkpoint").arg(&ck).arg("--out-dir").arg(&panels).args(["--n", "0"]));
    assert!(out.status.success());
    assert!(!panels.exists() || fs::read_dir(&panels).unwrap().count() == 0);

    let out = run(bin().arg("viz").arg("--checkpoint").arg(&ck).arg("--out-dir").arg(&panels).args(["--n", "3"]));
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("columns: original | astn-fwd | astn-inv | dvae | pvae"));
    let mut files: Vec<_> = fs::read_dir(&panels).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 3);
    for f in files {
        let img = image::open(&f).unwrap().to_rgb8();
        let (w, h) = img.dimensions();
        // five equal tiles separated by gaps; every tile equals the first
        let tile = (w - 4 * 2) / 5;
        for k in 1..5 {
            for y in 0..h {
                for x in 0..tile {
                    assert_eq!(img.get_pixel(x, y), img.get_pixel(k * (tile + 2) + x, y), "{} tile {k}", f.display());
                }
            }
        }
    }
}
