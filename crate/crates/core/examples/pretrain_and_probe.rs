//! Identity-pretrain a surrogate foundation model, show that its frozen
//! embeddings group by subject, then fit a ridge readout on synthetic
//! labels and score it on real recordings.
//!
//! cargo run --release --example pretrain_and_probe

use gaze_distill::evalkit::{render_table, MethodResult};
use gaze_distill::eyegen::{make_dataset, DatasetSpec};
use gaze_distill::nets::Tier;
use gaze_distill::pipeline::{embedding_distances, evaluate, linear_probe, pretrain_identity, GazeModel, RunConfig, PROBE_RIDGE};

fn main() -> anyhow::Result<()> {
    let spec = DatasetSpec {
        n_subjects_pretrain: 48,
        n_subjects_syn: 16,
        n_subjects_real_train: 4,
        n_subjects_real_eval: 12,
        n_subjects_real_upper: 2,
        ..DatasetSpec::default()
    };
    let data = make_dataset(&spec)?;
    let rc = RunConfig { iterations: 200, batch: 32, ..RunConfig::default() };
    let foundation = pretrain_identity(&data.pretrain, Tier::TeacherL, spec.dims, &rc)?;
    println!("held-out identity accuracy {:.3}", foundation.report.summary_value("holdout_accuracy").unwrap_or(f64::NAN));

    let (intra, inter) = embedding_distances(&foundation.bundle, &data.real_eval, 12, 16)?;
    println!("mean embedding distance: within subject {intra:.2}, across subjects {inter:.2}");

    let probe = linear_probe(&foundation.bundle, &data.syn, PROBE_RIDGE)?;
    let report = evaluate(&probe, &data.real_eval, 0, 500)?;
    let row = MethodResult { method: "linear_probe".into(), seed: None, inference_params: probe.inference_params(), report };
    println!("{}", render_table("frozen features, ridge readout", &[row]));
    Ok(())
}
