//! Render the default pools, save them as EYE1 shards and write a PGM
//! contact sheet comparing SYN and REAL frames.
//!
//! cargo run --release --example generate_dataset -- [out_dir]

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use gaze_distill::eyegen::{make_dataset, save_dataset, DatasetSpec, Sample};

fn main() -> anyhow::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/dataset".into()));
    let spec = DatasetSpec::default();
    let t0 = Instant::now();
    let bundle = make_dataset(&spec)?;
    println!(
        "rendered {} pretrain, {} syn, {} real-train, {} real-eval, {} upper-bound frames in {:.1}s",
        bundle.pretrain.len(),
        bundle.syn.len(),
        bundle.real_train.len(),
        bundle.real_eval.len(),
        bundle.upper_bound_labels().len(),
        t0.elapsed().as_secs_f64()
    );
    save_dataset(&bundle, &out)?;

    // Contact sheet: 4 SYN rows over 4 REAL-eval rows, left|right eye each.
    let d = spec.dims;
    let pick = |pool: &[Sample], k: usize| pool[k * pool.len() / 4].clone();
    let rows: Vec<Sample> = (0..4).map(|k| pick(&bundle.syn, k)).chain((0..4).map(|k| pick(&bundle.real_eval, k))).collect();
    let (w, h) = (2 * d.width, rows.len() * d.height);
    let mut px = Vec::with_capacity(w * h);
    for s in &rows {
        for y in 0..d.height {
            for img in [&s.image_left, &s.image_right] {
                px.extend(img[y * d.width..(y + 1) * d.width].iter().map(|v| (v * 255.0).round() as u8));
            }
        }
    }
    let mut f = std::fs::File::create(out.join("preview.pgm"))?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&px)?;
    println!("wrote {}", out.display());
    Ok(())
}
