//! Every subcommand through the real binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.n_subjects_pretrain = 6
data.n_subjects_syn = 4
data.n_subjects_real_train = 4
data.n_subjects_real_eval = 2
data.n_subjects_real_upper = 2
data.frames_per_recording = 64
run.pretrain_iterations = 4
run.teacher_iterations = 4
run.student_iterations = 4
run.batch = 8
run.seeds = 0,1
sched.ema_interval = 2
eval.bootstrap_iters = 20
eval.embed_subjects = 2
eval.embed_frames = 4
";

fn gd(out: &Path, args: &[&str]) -> Output {
    let cfg = out.join("tiny.kv");
    if !cfg.exists() {
        std::fs::create_dir_all(out).unwrap();
        std::fs::write(&cfg, TINY).unwrap();
    }
    let mut full = vec![args[0], "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    full.extend_from_slice(&args[1..]);
    Command::new(env!("CARGO_BIN_EXE_gazedistill")).args(&full).env("GD_THREADS", "2").output().unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = gd(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn stage_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen"]);
    assert!(out.join("data/dataset.kv").exists());

    // Order matters: each stage reads its predecessor's checkpoint.
    let o = gd(out, &["stage1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("foundation.gdck"));

    let s = ok(out, &["pretrain"]);
    assert!(s.contains("intra_subject_distance"));
    ok(out, &["probe"]);
    assert!(out.join("probe_weights.csv").exists());
    ok(out, &["synft"]);
    ok(out, &["synft", "--set", "run.synft_tier=student"]);
    ok(out, &["stage1", "--seed", "3"]);
    ok(out, &["stage2"]);
    for b in ["pseudo_only", "sp_kd", "self_distill_no_vfm", "fully_supervised"] {
        ok(out, &["baseline", "--set", &format!("run.baseline={b}")]);
        assert!(out.join(format!("{b}.gdck")).exists());
    }
    let ck = out.join("stage2.gdck");
    let ck = format!("run.checkpoint={}", ck.display());
    let s = ok(out, &["eval", "--set", &ck]);
    assert!(s.contains("stage2"));
    assert!(out.join("eval.metrics.csv").exists());
    ok(out, &["export-embeddings", "--set", &ck]);
    let rows = std::fs::read_to_string(out.join("embeddings.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 2 * 64);

    for f in ["foundation", "synft_teacher", "synft_student", "stage1", "stage2"] {
        assert!(out.join(format!("{f}.gdck")).exists(), "{f}");
        let csv = std::fs::read_to_string(out.join(format!("{f}.csv"))).unwrap();
        assert!(csv.starts_with("iteration,"));
    }
    let echo = std::fs::read_to_string(out.join("stage1.config.kv")).unwrap();
    assert!(echo.contains("run.seed = 3"));
}

#[test]
fn failures_exit_nonzero_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = gd(dir.path(), &["stage1", "--set", "run.iterations=abc"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.iterations"));
    let o = gd(dir.path(), &["train"]);
    assert!(!o.status.success());
    let o = gd(dir.path(), &["eval"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.checkpoint"));
}

#[test]
fn reproduce_is_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let table = ok(a.path(), &["reproduce"]);
    ok(b.path(), &["reproduce"]);
    for m in ["linear_probe", "synft_teacher", "stage1", "synft_student", "self_distill_no_vfm", "pseudo_only", "sp_kd", "stage2", "fully_supervised"] {
        assert!(table.contains(m), "{m} missing");
    }
    for f in ["metrics.csv", "main_table.txt", "ablation_table.txt", "foundation.summary.kv", "seed_1/stage2.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    assert!(a.path().join("timing.csv").exists());
}
