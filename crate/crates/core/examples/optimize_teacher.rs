//! Adapt a pretrained foundation model to real recordings without real
//! labels and compare it with plain synthetic finetuning.
//!
//! cargo run --release --example optimize_teacher -- [iterations]

use gaze_distill::evalkit::{render_table, MethodResult};
use gaze_distill::eyegen::{make_dataset, DatasetSpec};
use gaze_distill::nets::{EmaConfig, Tier};
use gaze_distill::pipeline::{evaluate, pretrain_identity, stage1_optimize, synthetic_finetune, GazeModel, RunConfig};

fn main() -> anyhow::Result<()> {
    let iterations: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let spec = DatasetSpec {
        n_subjects_pretrain: 48,
        n_subjects_syn: 24,
        n_subjects_real_train: 32,
        n_subjects_real_eval: 12,
        n_subjects_real_upper: 2,
        ..DatasetSpec::default()
    };
    let data = make_dataset(&spec)?;
    let base = RunConfig {
        iterations,
        batch: 32,
        ema: EmaConfig { momentum: 0.5, interval: 50 },
        ..RunConfig::default()
    };
    let foundation = pretrain_identity(&data.pretrain, Tier::TeacherL, spec.dims, &RunConfig { iterations: 200, ..base.clone() })?;

    let synft = synthetic_finetune(&foundation.bundle, &data.syn, &base)?;
    let stage1 = stage1_optimize(&foundation.bundle, &data.syn, &data.real_train, &base)?;
    let mut off = base.clone();
    off.flags.scheduler_off = true;
    let no_sched = stage1_optimize(&foundation.bundle, &data.syn, &data.real_train, &off)?;

    let mut rows = Vec::new();
    for (name, t) in [("synft_teacher", &synft), ("stage1", &stage1), ("scheduler_off", &no_sched)] {
        let report = evaluate(&t.bundle, &data.real_eval, 0, 500)?;
        rows.push(MethodResult { method: name.into(), seed: Some(0), inference_params: t.bundle.inference_params(), report });
    }
    println!("{}", render_table("teacher tier, real_eval", &rows));
    stage1.bundle.save(std::path::Path::new("stage1_teacher.gdck"))?;
    stage1.report.write_csv(std::path::Path::new("stage1_losses.csv"))?;
    println!("saved stage1_teacher.gdck and stage1_losses.csv");
    Ok(())
}
