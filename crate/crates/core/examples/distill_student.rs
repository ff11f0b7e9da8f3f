//! Distill an adapted teacher into the on-device student and run every
//! student baseline against it.
//!
//! cargo run --release --example distill_student

use gaze_distill::evalkit::{render_table, MethodResult};
use gaze_distill::eyegen::{make_dataset, DatasetSpec};
use gaze_distill::nets::{EmaConfig, Tier};
use gaze_distill::pipeline::{
    evaluate, fresh_student, pretrain_identity, run_baseline, stage1_optimize, stage2_distill, synthetic_finetune, BaselineInputs, BaselineKind, GazeModel, RunConfig,
};

fn main() -> anyhow::Result<()> {
    let spec = DatasetSpec {
        n_subjects_pretrain: 48,
        n_subjects_syn: 24,
        n_subjects_real_train: 32,
        n_subjects_real_eval: 12,
        n_subjects_real_upper: 16,
        ..DatasetSpec::default()
    };
    let data = make_dataset(&spec)?;
    let rc = RunConfig {
        iterations: 300,
        batch: 32,
        ema: EmaConfig { momentum: 0.5, interval: 50 },
        ..RunConfig::default()
    };
    let foundation = pretrain_identity(&data.pretrain, Tier::TeacherL, spec.dims, &RunConfig { iterations: 200, ..rc.clone() })?;
    let teacher = stage1_optimize(&foundation.bundle, &data.syn, &data.real_train, &rc)?.bundle;
    let student = synthetic_finetune(&fresh_student(spec.dims, 0), &data.syn, &rc)?.bundle;

    let mut trained = vec![("synft_student", student.clone())];
    trained.push(("stage2", stage2_distill(&teacher, &student, &data.real_train, &rc)?.bundle));
    for kind in BaselineKind::ALL {
        let inputs = BaselineInputs {
            teacher: Some(&teacher),
            student_init: Some(&student),
            syn: &data.syn,
            real_train: &data.real_train,
            real_upper: data.upper_bound_labels(),
        };
        trained.push((kind.name(), run_baseline(kind, inputs, &rc)?.bundle));
    }

    let mut rows = Vec::new();
    for (name, b) in &trained {
        let report = evaluate(b, &data.real_eval, 0, 500)?;
        rows.push(MethodResult { method: name.to_string(), seed: Some(0), inference_params: b.inference_params(), report });
    }
    println!("{}", render_table("student tier, real_eval", &rows));
    Ok(())
}
