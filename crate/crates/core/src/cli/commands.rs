use std::fmt::Write as _;
use std::time::Instant;

use super::*;
use crate::evalkit::{export_embeddings, metrics_csv, percentile, render_grid, render_table, EUReport, MethodResult};
use crate::eyegen::{load_dataset, make_dataset, save_dataset, DatasetBundle, Sample};
use crate::nets::ModelBundle;
use crate::pipeline::{
    embedding_distances, evaluate, fresh_student, fully_supervised, linear_probe, pretrain_identity, run_baseline, stage1_optimize, stage2_distill, synthetic_finetune,
    BaselineInputs, GazeModel, LinearProbe, Trained,
};

/// Rows of the main table, in print order.
pub const MAIN_METHODS: [&str; 8] = ["linear_probe", "synft_teacher", "stage1", "synft_student", "self_distill_no_vfm", "pseudo_only", "sp_kd", "stage2"];
/// Printed under the main table; trained on labels no other method sees.
pub const REFERENCE_METHODS: [&str; 1] = ["fully_supervised"];
pub const ABLATION_METHODS: [&str; 4] = ["stage1", "scheduler_off", "sd_pl_only", "dino_teacher_loss"];

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    let io = |source| CliError::Io { path: path.into(), source };
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

fn stage<T>(name: &str, r: std::result::Result<T, PipelineError>) -> Result<T> {
    r.map_err(|source| CliError::Stage { stage: name.to_string(), source })
}

fn dataset(cfg: &Config, out: &Path) -> Result<DatasetBundle> {
    let dir = cfg.path("run.data").unwrap_or_else(|| out.join("data"));
    let spec = cfg.dataset_spec();
    if dir.join("dataset.kv").exists() {
        let b = load_dataset(&dir)?;
        if b.spec != spec {
            return Err(CliError::Usage(format!("dataset in {} was generated from different data.* settings; rerun `gen`", dir.display())));
        }
        return Ok(b);
    }
    let b = make_dataset(&spec)?;
    save_dataset(&b, &dir)?;
    Ok(b)
}

fn checkpoint(cfg: &Config, key: &str, fallback: PathBuf, producer: &str) -> Result<ModelBundle> {
    let path = cfg.path(key).unwrap_or(fallback);
    if !path.exists() {
        return Err(CliError::Usage(format!("{} not found; run `{producer}` first or set {key}", path.display())));
    }
    Ok(ModelBundle::load(&path)?)
}

fn save_trained(out: &Path, name: &str, t: &Trained) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|source| CliError::Io { path: out.into(), source })?;
    t.bundle.save(&out.join(format!("{name}.gdck")))?;
    write(&out.join(format!("{name}.csv")), t.report.to_csv())
}

fn eval_pool<'a>(cfg: &Config, data: &'a DatasetBundle) -> &'a [Sample] {
    data.split(cfg.split("eval.split"))
}

fn score(cfg: &Config, method: &str, seed: Option<u64>, model: &dyn GazeModel, samples: &[Sample]) -> Result<MethodResult> {
    let report = stage(&format!("eval {method}"), evaluate(model, samples, cfg.u64("eval.seed"), cfg.usize("eval.bootstrap_iters")))?;
    Ok(MethodResult {
        method: method.to_string(),
        seed,
        inference_params: model.inference_params(),
        report,
    })
}

fn probe_csv(p: &LinearProbe) -> String {
    let mut s = String::from("feature,w_yaw_left,w_pitch_left,w_yaw_right,w_pitch_right\n");
    for (i, w) in p.ridge.weights.iter().enumerate() {
        writeln!(s, "{i},{:e},{:e},{:e},{:e}", w[0], w[1], w[2], w[3]).unwrap();
    }
    let b = p.ridge.bias;
    writeln!(s, "bias,{:e},{:e},{:e},{:e}", b[0], b[1], b[2], b[3]).unwrap();
    s
}

/// Run one subcommand and return a human-readable summary. The effective
/// config is echoed to `<out>/<command>.config.kv`.
pub fn execute(inv: &Invocation) -> Result<String> {
    let (cfg, out) = (&inv.config, inv.out.as_path());
    write(&out.join(format!("{}.config.kv", inv.command.name())), cfg.to_kv())?;
    let seed = cfg.seed();
    let dims = cfg.dims();
    match inv.command {
        Command::Gen => {
            let dir = cfg.path("run.data").unwrap_or_else(|| out.join("data"));
            let b = make_dataset(&cfg.dataset_spec())?;
            save_dataset(&b, &dir)?;
            Ok(format!(
                "wrote {}: {} pretrain, {} syn, {} real_train, {} real_eval, {} real_upper frames",
                dir.display(),
                b.pretrain.len(),
                b.syn.len(),
                b.real_train.len(),
                b.real_eval.len(),
                b.upper_bound_labels().len()
            ))
        }
        Command::Pretrain => {
            let data = dataset(cfg, out)?;
            let t = stage("pretrain", pretrain_identity(&data.pretrain, cfg.tier("net.teacher_tier"), dims, &cfg.run_config(RunLength::Pretrain)))?;
            save_trained(out, "foundation", &t)?;
            let (intra, inter) = stage(
                "pretrain",
                embedding_distances(&t.bundle, eval_pool(cfg, &data), cfg.usize("eval.embed_subjects"), cfg.usize("eval.embed_frames")),
            )?;
            let acc = t.report.summary_value("holdout_accuracy").unwrap_or(f64::NAN);
            let summary = kv::render([("holdout_accuracy", acc.to_string()), ("intra_subject_distance", intra.to_string()), ("inter_subject_distance", inter.to_string())]);
            write(&out.join("foundation.summary.kv"), &summary)?;
            Ok(summary)
        }
        Command::Probe => {
            let data = dataset(cfg, out)?;
            let f = checkpoint(cfg, "run.foundation", out.join("foundation.gdck"), "pretrain")?;
            let p = stage("probe", linear_probe(&f, &data.syn, cfg.f64("loss.probe_ridge")))?;
            write(&out.join("probe_weights.csv"), probe_csv(&p))?;
            let r = score(cfg, "linear_probe", Some(seed), &p, eval_pool(cfg, &data))?;
            write(&out.join("probe.metrics.csv"), metrics_csv(std::slice::from_ref(&r)))?;
            Ok(render_table("linear probe", &[r]))
        }
        Command::Synft => {
            let data = dataset(cfg, out)?;
            let (init, length, name) = if cfg.raw("run.synft_tier") == "teacher" {
                (checkpoint(cfg, "run.foundation", out.join("foundation.gdck"), "pretrain")?, RunLength::Teacher, "synft_teacher")
            } else {
                (fresh_student(dims, seed), RunLength::Student, "synft_student")
            };
            let t = stage(name, synthetic_finetune(&init, &data.syn, &cfg.run_config(length)))?;
            save_trained(out, name, &t)?;
            Ok(format!("{name}: final loss {:.5}", t.report.losses().last().copied().unwrap_or(f64::NAN)))
        }
        Command::Stage1 => {
            let data = dataset(cfg, out)?;
            let f = checkpoint(cfg, "run.foundation", out.join("foundation.gdck"), "pretrain")?;
            let t = stage("stage1", stage1_optimize(&f, &data.syn, &data.real_train, &cfg.run_config(RunLength::Teacher)))?;
            save_trained(out, "stage1", &t)?;
            Ok(format!("stage1: final loss {:.5}", t.report.losses().last().copied().unwrap_or(f64::NAN)))
        }
        Command::Stage2 => {
            let data = dataset(cfg, out)?;
            let teacher = checkpoint(cfg, "run.teacher", out.join("stage1.gdck"), "stage1")?;
            let student = checkpoint(cfg, "run.student", out.join("synft_student.gdck"), "synft --set run.synft_tier=student")?;
            let t = stage("stage2", stage2_distill(&teacher, &student, &data.real_train, &cfg.run_config(RunLength::Student)))?;
            save_trained(out, "stage2", &t)?;
            Ok(format!("stage2: final loss {:.5}", t.report.losses().last().copied().unwrap_or(f64::NAN)))
        }
        Command::Baseline => {
            let data = dataset(cfg, out)?;
            let kind = cfg.baseline("run.baseline");
            let needs_teacher = matches!(kind, BaselineKind::PseudoOnly | BaselineKind::SpKd);
            let needs_student = kind != BaselineKind::SelfDistillNoVfm;
            let teacher = needs_teacher.then(|| checkpoint(cfg, "run.teacher", out.join("stage1.gdck"), "stage1")).transpose()?;
            let student = needs_student
                .then(|| checkpoint(cfg, "run.student", out.join("synft_student.gdck"), "synft --set run.synft_tier=student"))
                .transpose()?;
            let inputs = BaselineInputs {
                teacher: teacher.as_ref(),
                student_init: student.as_ref(),
                syn: &data.syn,
                real_train: &data.real_train,
                real_upper: data.upper_bound_labels(),
            };
            let t = stage(kind.name(), run_baseline(kind, inputs, &cfg.run_config(RunLength::Student)))?;
            save_trained(out, kind.name(), &t)?;
            Ok(format!("{}: final loss {:.5}", kind.name(), t.report.losses().last().copied().unwrap_or(f64::NAN)))
        }
        Command::Eval => {
            let data = dataset(cfg, out)?;
            let path = cfg.path("run.checkpoint").ok_or_else(|| CliError::Usage("eval needs --set run.checkpoint=PATH".into()))?;
            let m = checkpoint(cfg, "run.checkpoint", path.clone(), "a trainer")?;
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
            let r = score(cfg, &name, Some(seed), &m, eval_pool(cfg, &data))?;
            write(&out.join("eval.metrics.csv"), metrics_csv(std::slice::from_ref(&r)))?;
            Ok(format!("{}\n{}", render_table(&name, std::slice::from_ref(&r)), render_grid(&r.report)))
        }
        Command::ExportEmbeddings => {
            let data = dataset(cfg, out)?;
            let path = cfg.path("run.checkpoint").ok_or_else(|| CliError::Usage("export-embeddings needs --set run.checkpoint=PATH".into()))?;
            let m = checkpoint(cfg, "run.checkpoint", path, "a trainer")?;
            let dest = out.join("embeddings.csv");
            let pool = eval_pool(cfg, &data);
            export_embeddings(&m, pool, &dest)?;
            Ok(format!("wrote {} rows to {}", pool.len(), dest.display()))
        }
        Command::Reproduce => Ok(reproduce(cfg, out)?.main_table),
    }
}

/// Everything `reproduce` writes, also returned for programmatic checks.
#[derive(Clone, Debug)]
pub struct ReproduceOutput {
    /// One entry per (seed, method).
    pub per_seed: Vec<MethodResult>,
    /// Cell-wise medians across seeds, one entry per method.
    pub medians: Vec<MethodResult>,
    pub main_table: String,
    pub ablation_table: String,
    pub holdout_accuracy: f64,
    pub intra_subject_distance: f64,
    pub inter_subject_distance: f64,
    /// `(stage, seconds)`, in execution order.
    pub timings: Vec<(String, f64)>,
}

impl ReproduceOutput {
    pub fn median(&self, method: &str) -> Option<&MethodResult> {
        self.medians.iter().find(|r| r.method == method)
    }

    /// Median E50U50 of a method.
    pub fn e50u50(&self, method: &str) -> Option<f64> {
        self.median(method).map(|r| r.report.grid[0][0])
    }
}

fn median_result(method: &str, rs: &[&MethodResult]) -> MethodResult {
    let cell = |f: &dyn Fn(&EUReport) -> [[f64; 3]; 3]| -> [[f64; 3]; 3] {
        std::array::from_fn(|u| std::array::from_fn(|e| percentile(&rs.iter().map(|r| f(&r.report)[u][e]).collect::<Vec<_>>(), 50.0)))
    };
    let first = &rs[0].report;
    MethodResult {
        method: method.to_string(),
        seed: None,
        inference_params: rs[0].inference_params,
        report: EUReport {
            grid: cell(&|r| r.grid),
            ci_lo: cell(&|r| r.ci_lo),
            ci_hi: cell(&|r| r.ci_hi),
            users: first.users,
            frames_per_user: first.frames_per_user,
        },
    }
}

/// The full experiment: one shared foundation, then every method for each
/// seed in `run.seeds`, evaluated on the configured split and summarized by
/// cell-wise medians across seeds.
pub fn reproduce(cfg: &Config, out: &Path) -> Result<ReproduceOutput> {
    write(&out.join("reproduce.config.kv"), cfg.to_kv())?;
    let start = Instant::now();
    let mut timings: Vec<(String, f64)> = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: String| {
        let dt = clock.elapsed().as_secs_f64();
        eprintln!("[{:7.1}s] {name} ({dt:.1}s)", start.elapsed().as_secs_f64());
        timings.push((name, dt));
        clock = Instant::now();
    };

    let data = dataset(cfg, out)?;
    lap("data".into());
    let dims = cfg.dims();
    let pool = eval_pool(cfg, &data);
    let foundation = stage("pretrain", pretrain_identity(&data.pretrain, cfg.tier("net.teacher_tier"), dims, &cfg.run_config(RunLength::Pretrain)))?;
    save_trained(out, "foundation", &foundation)?;
    let (intra, inter) = stage("pretrain", embedding_distances(&foundation.bundle, pool, cfg.usize("eval.embed_subjects"), cfg.usize("eval.embed_frames")))?;
    let acc = foundation.report.summary_value("holdout_accuracy").unwrap_or(f64::NAN);
    let f = &foundation.bundle;
    lap("pretrain".into());
    let probe = stage("probe", linear_probe(f, &data.syn, cfg.f64("loss.probe_ridge")))?;
    write(&out.join("probe_weights.csv"), probe_csv(&probe))?;
    let probe_score = score(cfg, "linear_probe", None, &probe, pool)?;
    lap("probe".into());

    let mut per_seed = Vec::new();
    for seed in cfg.u64_list("run.seeds") {
        let mut c = cfg.clone();
        c.set("run.seed", &seed.to_string())?;
        let dir = out.join(format!("seed_{seed}"));
        let (rt, rs) = (c.run_config(RunLength::Teacher), c.run_config(RunLength::Student));
        let mut lp = probe_score.clone();
        lp.seed = Some(seed);
        per_seed.push(lp);
        let mut push = |name: &str, model: &dyn GazeModel, lap: &mut dyn FnMut(String)| -> Result<()> {
            per_seed.push(score(&c, name, Some(seed), model, pool)?);
            lap(format!("seed {seed} {name}"));
            Ok(())
        };

        let synft_t = stage("synft_teacher", synthetic_finetune(f, &data.syn, &rt))?;
        save_trained(&dir, "synft_teacher", &synft_t)?;
        push("synft_teacher", &synft_t.bundle, &mut lap)?;

        let s1 = stage("stage1", stage1_optimize(f, &data.syn, &data.real_train, &rt))?;
        save_trained(&dir, "stage1", &s1)?;
        push("stage1", &s1.bundle, &mut lap)?;

        for (name, tweak) in [
            ("scheduler_off", (|r: &mut RunConfig| r.flags.scheduler_off = true) as fn(&mut RunConfig)),
            ("sd_pl_only", |r: &mut RunConfig| r.flags.sd_pl_only = true),
            ("dino_teacher_loss", |r: &mut RunConfig| r.flags.dino_loss_teacher = true),
        ] {
            let mut ra = rt.clone();
            tweak(&mut ra);
            let t = stage(name, stage1_optimize(f, &data.syn, &data.real_train, &ra))?;
            save_trained(&dir, name, &t)?;
            push(name, &t.bundle, &mut lap)?;
        }

        let synft_s = stage("synft_student", synthetic_finetune(&fresh_student(dims, seed), &data.syn, &rs))?;
        save_trained(&dir, "synft_student", &synft_s)?;
        push("synft_student", &synft_s.bundle, &mut lap)?;

        let s2 = stage("stage2", stage2_distill(&s1.bundle, &synft_s.bundle, &data.real_train, &rs))?;
        save_trained(&dir, "stage2", &s2)?;
        push("stage2", &s2.bundle, &mut lap)?;

        let inputs = BaselineInputs {
            teacher: Some(&s1.bundle),
            student_init: Some(&synft_s.bundle),
            syn: &data.syn,
            real_train: &data.real_train,
            real_upper: data.upper_bound_labels(),
        };
        for kind in [BaselineKind::PseudoOnly, BaselineKind::SpKd, BaselineKind::SelfDistillNoVfm] {
            let t = stage(kind.name(), run_baseline(kind, inputs, &rs))?;
            save_trained(&dir, kind.name(), &t)?;
            push(kind.name(), &t.bundle, &mut lap)?;
        }
        let up = stage("fully_supervised", fully_supervised(&synft_s.bundle, data.upper_bound_labels(), &rs))?;
        save_trained(&dir, "fully_supervised", &up)?;
        push("fully_supervised", &up.bundle, &mut lap)?;
    }

    let names: Vec<&str> = MAIN_METHODS.iter().chain(&REFERENCE_METHODS).chain(&ABLATION_METHODS[1..]).copied().collect();
    let medians: Vec<MethodResult> = names
        .iter()
        .map(|&m| median_result(m, &per_seed.iter().filter(|r| r.method == m).collect::<Vec<_>>()))
        .collect();
    let pick = |list: &[&str]| -> Vec<MethodResult> { list.iter().map(|m| medians.iter().find(|r| r.method == *m).unwrap().clone()).collect() };
    let seeds = cfg.raw("run.seeds");
    let main_table = format!(
        "{}\n{}",
        render_table(&format!("{} EU table, median over seeds {seeds}; 95% CI half-width in parentheses", cfg.raw("eval.split")), &pick(&MAIN_METHODS)),
        render_table("Upper bound, trained on labeled real recordings", &pick(&REFERENCE_METHODS))
    );
    let ablation_table = render_table(&format!("Stage-1 loss ablations, median over seeds {seeds}"), &pick(&ABLATION_METHODS));

    let mut all = per_seed.clone();
    all.extend(medians.iter().cloned());
    write(&out.join("metrics.csv"), metrics_csv(&all))?;
    write(&out.join("main_table.txt"), &main_table)?;
    write(&out.join("ablation_table.txt"), &ablation_table)?;
    write(
        &out.join("foundation.summary.kv"),
        kv::render([("holdout_accuracy", acc.to_string()), ("intra_subject_distance", intra.to_string()), ("inter_subject_distance", inter.to_string())]),
    )?;
    let mut t = String::new();
    for (name, s) in &timings {
        writeln!(t, "{name},{s:.2}").unwrap();
    }
    writeln!(t, "total,{:.2}", start.elapsed().as_secs_f64()).unwrap();
    write(&out.join("timing.csv"), t)?;

    Ok(ReproduceOutput {
        per_seed,
        medians,
        main_table,
        ablation_table,
        holdout_accuracy: acc,
        intra_subject_distance: intra,
        inter_subject_distance: inter,
        timings,
    })
}
