//! The full experiment: every method over three seeds, medians, tables.
//! Takes about 13 minutes on one core at the default configuration.
//!
//! cargo run --release --example reproduce -- [out_dir] [config.kv]

use std::path::PathBuf;

use gaze_distill::cli::{init_threads, reproduce, Config};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/reproduce".into()));
    let cfg = match args.next() {
        Some(p) => Config::load(p.as_ref())?,
        None => Config::default(),
    };
    println!("{} worker threads", init_threads()?);
    let r = reproduce(&cfg, &out)?;
    println!("{}\n{}", r.main_table, r.ablation_table);
    println!("identity holdout accuracy {:.4}, embedding distance within/across subjects {:.2}/{:.2}", r.holdout_accuracy, r.intra_subject_distance, r.inter_subject_distance);
    Ok(())
}
