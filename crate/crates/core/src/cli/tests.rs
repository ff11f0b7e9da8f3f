use super::*;

fn err_text<T: std::fmt::Debug>(r: Result<T>) -> String {
    r.unwrap_err().to_string()
}

#[test]
fn set_and_seed_override_defaults() {
    let inv = parse_cli(&["stage1", "--set", "run.iterations=10", "--seed", "7"]).unwrap();
    assert_eq!(inv.command, Command::Stage1);
    assert_eq!(inv.config.opt_u64("run.iterations"), Some(10));
    assert_eq!(inv.config.seed(), 7);
    let rc = inv.config.run_config(RunLength::Teacher);
    assert_eq!((rc.iterations, rc.seed), (10, 7));
    assert_eq!(inv.out, PathBuf::from("out"));
}

#[test]
fn bad_value_names_the_key() {
    let e = err_text(parse_cli(&["stage1", "--set", "run.iterations=abc"]));
    assert!(e.contains("run.iterations"), "{e}");
    let e = err_text(parse_cli(&["eval", "--set", "eval.split=nowhere"]));
    assert!(e.contains("eval.split"), "{e}");
    let e = err_text(parse_cli(&["stage1", "--seed", "-1"]));
    assert!(e.contains("run.seed"), "{e}");
}

#[test]
fn unknown_key_and_command_rejected() {
    let e = err_text(parse_cli(&["stage1", "--set", "run.iters=3"]));
    assert!(e.contains("run.iters"), "{e}");
    assert!(err_text(parse_cli(&["stage3"])).contains("stage3"));
    assert!(parse_cli(&["stage1", "--frobnicate"]).is_err());
    assert!(parse_cli::<&str>(&[]).is_err());
    assert!(parse_cli(&["stage1", "--set"]).is_err());
}

#[test]
fn every_command_parses() {
    for c in Command::ALL {
        assert_eq!(parse_cli(&[c.name()]).unwrap().command, c);
    }
}

#[test]
fn no_config_echoes_pure_defaults() {
    let inv = parse_cli(&["gen"]).unwrap();
    assert_eq!(inv.config, Config::default());
    let text = inv.config.to_kv();
    let mut back = Config::default();
    back.merge_kv(&text).unwrap();
    assert_eq!(back, inv.config);
    for s in key_table() {
        assert!(text.contains(&format!("{} =", s.key)), "{} missing from echo", s.key);
    }
}

#[test]
fn file_then_set_then_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.kv");
    std::fs::write(&p, "# comment\nrun.batch = 8\nrun.seed = 3\nsched.lr = 2e-3\n").unwrap();
    let ps = p.to_str().unwrap();
    let inv = parse_cli(&["synft", "--config", ps, "--set", "run.batch=16"]).unwrap();
    assert_eq!(inv.config.usize("run.batch"), 16);
    assert_eq!(inv.config.seed(), 3);
    assert_eq!(inv.config.f64("sched.lr"), 2e-3);
    let inv = parse_cli(&["synft", "--config", ps, "--seed", "9", "--out", "elsewhere"]).unwrap();
    assert_eq!(inv.config.seed(), 9);
    assert_eq!(inv.out, PathBuf::from("elsewhere"));

    std::fs::write(&p, "run.bogus = 1\n").unwrap();
    assert!(err_text(parse_cli(&["synft", "--config", p.to_str().unwrap()])).contains("run.bogus"));
}

#[test]
fn typed_accessors() {
    let mut c = Config::default();
    c.set("run.seeds", "4, 5,6").unwrap();
    assert_eq!(c.u64_list("run.seeds"), vec![4, 5, 6]);
    assert_eq!(c.opt_u64("run.iterations"), None);
    assert_eq!(c.path("run.data"), None);
    c.set("run.data", "d").unwrap();
    assert_eq!(c.path("run.data"), Some(PathBuf::from("d")));
    c.set("run.baseline", "sp_kd").unwrap();
    assert_eq!(c.baseline("run.baseline"), BaselineKind::SpKd);
    assert!(c.set("run.synsup_only", "maybe").is_err());
    assert!(c.set("loss.teacher_objective", "l1").is_err());
    c.set("sched.loss_scheduler", "false").unwrap();
    assert!(c.run_config(RunLength::Teacher).flags.scheduler_off);
}

#[test]
fn defaults_build_valid_specs() {
    let c = Config::default();
    assert_eq!(c.dataset_spec(), DatasetSpec::default());
    assert_eq!(c.augment(), AugmentConfig::default());
    let rc = c.run_config(RunLength::Student);
    assert_eq!(rc.iterations, c.u64("run.student_iterations"));
    rc.ema.validate().unwrap();
}

#[test]
fn config_reference_in_sync() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/CONFIG.md");
    let on_disk = std::fs::read_to_string(&path).unwrap_or_default();
    assert!(
        on_disk == Config::reference_markdown(),
        "{} is stale; regenerate with `cargo run --example config_reference > docs/CONFIG.md`",
        path.display()
    );
}
