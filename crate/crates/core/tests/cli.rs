//! End-to-end runs of the `almp` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "seeds = 0

[model]
d_model = 16
layers = 1
heads = 2
d_ff = 32
max_len = 32

[lora]
rank = 2

[train]
lr = 0.001
batch_size = 8
max_epochs = 1
related_max_epochs = 1
base_max_epochs = 1

[tasks]
symbols = 6
min_len = 2
max_len = 4
related_train = 16
related_val = 8
related_test = 8
target_pool_train = 16
target_pool_val = 8
target_test = 8
target_train = 8
target_val = 8

[eval]
frozen_trials = 2
sigtest_rounds = 50
";

fn almp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_almp"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.ini");
    std::fs::write(&p, text).unwrap();
    p
}

fn run(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--ratios", "0,50"];
    args.extend_from_slice(extra);
    almp(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn run_is_byte_deterministic_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&cfg, &a, &[])), 0);
    assert_eq!(code(&run(&cfg, &b, &["--jobs", "2"])), 0);
    for f in ["results.csv", "grid.csv", "significance.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let text = std::fs::read_to_string(a.join("results.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("task,method,seed,metric,value,prune_unit,prune_reset,ratio_or_threshold"));
    let methods: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    for m in ["zero_shot", "lora_target", "frozen_merge", "merge", "merge_del"] {
        assert!(methods.contains(m), "missing {m} in {methods:?}");
    }
    assert!(a.join("scores").join("merge.csv").exists());
}

#[test]
fn resume_reuses_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("run");
    assert_eq!(code(&run(&cfg, &out, &[])), 0);
    let results = std::fs::read(out.join("results.csv")).unwrap();
    let stamp = std::fs::metadata(out.join("base.ckpt")).unwrap().modified().unwrap();

    // Without --resume an existing run directory is refused.
    assert_eq!(code(&run(&cfg, &out, &[])), 2);
    // A finished run is left alone.
    let done = run(&cfg, &out, &["--resume"]);
    assert_eq!(code(&done), 0);
    assert!(String::from_utf8_lossy(&done.stdout).contains("nothing to do"));
    // An interrupted run picks up the saved checkpoints and reproduces the results.
    std::fs::remove_file(out.join("results.csv")).unwrap();
    assert_eq!(code(&run(&cfg, &out, &["--resume"])), 0);
    assert_eq!(std::fs::read(out.join("results.csv")).unwrap(), results);
    assert_eq!(std::fs::metadata(out.join("base.ckpt")).unwrap().modified().unwrap(), stamp);
    // Resuming under a changed configuration is refused.
    let other = config(&dir.path().join("other").tap_mkdir(), &TINY.replace("lr = 0.001", "lr = 0.002"));
    assert_eq!(code(&run(&other, &out, &["--resume"])), 2);
}

trait Mkdir {
    fn tap_mkdir(self) -> Self;
}

impl Mkdir for PathBuf {
    fn tap_mkdir(self) -> Self {
        std::fs::create_dir_all(&self).unwrap();
        self
    }
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ini");
    assert_eq!(code(&run(&missing, &dir.path().join("x"), &[])), 2);

    let bad_key = config(dir.path(), &format!("{TINY}\n[train]\nbogus = 1\n"));
    assert_eq!(code(&run(&bad_key, &dir.path().join("y"), &[])), 3);

    let cfg = config(dir.path(), TINY);
    let bad_arg = almp(&["grid", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("g").to_str().unwrap(), "--ratios", "ten"]);
    assert_eq!(code(&bad_arg), 2);

    let out = dir.path().join("run");
    assert_eq!(code(&run(&cfg, &out, &[])), 0);
    let garbage = dir.path().join("bad.ckpt");
    std::fs::write(&garbage, "garbage").unwrap();
    let eval = almp(&[
        "eval",
        "--checkpoint",
        garbage.to_str().unwrap(),
        "--base",
        out.join("base.ckpt").to_str().unwrap(),
        "--task",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("e.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&eval), 3, "{}", String::from_utf8_lossy(&eval.stderr));

    let huge = config(&dir.path().join("huge").tap_mkdir(), &TINY.replace("lr = 0.001", "lr = 1e30"));
    let blown = run(&huge, &dir.path().join("z"), &[]);
    assert_eq!(code(&blown), 4, "{}", String::from_utf8_lossy(&blown.stderr));
}

#[test]
fn sigtest_reads_score_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("run");
    assert_eq!(code(&run(&cfg, &out, &[])), 0);
    let s = out.join("scores");
    let same = almp(&["sigtest", "--a", s.join("merge.csv").to_str().unwrap(), "--b", s.join("merge.csv").to_str().unwrap(), "--R", "100"]);
    assert_eq!(code(&same), 0);
    assert!(String::from_utf8_lossy(&same.stdout).contains('1'));
    let broken = dir.path().join("broken.csv");
    std::fs::write(&broken, "seed,index,metric,score\n0,zero,rouge_l,x\n").unwrap();
    let bad = almp(&["sigtest", "--a", broken.to_str().unwrap(), "--b", broken.to_str().unwrap()]);
    assert_eq!(code(&bad), 3);
}
