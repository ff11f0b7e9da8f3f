//! Score a saved checkpoint on a saved dataset, print the full EU grid and
//! export its embeddings.
//!
//! cargo run --release --example evaluate_checkpoint -- <model.gdck> <data_dir> [embeddings.csv]

use std::path::PathBuf;

use gaze_distill::evalkit::{evaluate_bundle, export_embeddings, render_grid};
use gaze_distill::eyegen::load_dataset;
use gaze_distill::nets::ModelBundle;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let (Some(model), Some(data)) = (args.next(), args.next()) else {
        anyhow::bail!("usage: evaluate_checkpoint <model.gdck> <data_dir> [embeddings.csv]");
    };
    let emb = PathBuf::from(args.next().unwrap_or_else(|| "embeddings.csv".into()));
    let bundle = ModelBundle::load(model.as_ref())?;
    let data = load_dataset(data.as_ref())?;
    let report = evaluate_bundle(&bundle, &data.real_eval, 0, 1000)?;
    println!("{} ({} params at inference), {} users", model, bundle.inference_param_count(), report.users);
    println!("{}", render_grid(&report));
    export_embeddings(&bundle, &data.real_eval, &emb)?;
    println!("wrote {}", emb.display());
    Ok(())
}
