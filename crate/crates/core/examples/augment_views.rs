//! Weak and strong views of one synthetic frame, written as a PGM strip:
//! original, then four weak views, then four strong views.
//!
//! cargo run --release --example augment_views -- [out.pgm]

use std::io::Write;

use gaze_distill::augment::{strong_augment, weak_augment, AugmentConfig};
use gaze_distill::eyegen::{make_dataset, DatasetSpec};
use gaze_distill::tensorcore::RngStream;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "augment_views.pgm".into());
    let spec = DatasetSpec {
        n_subjects_pretrain: 1,
        n_subjects_syn: 1,
        n_subjects_real_train: 1,
        n_subjects_real_eval: 1,
        n_subjects_real_upper: 1,
        ..DatasetSpec::default()
    };
    let data = make_dataset(&spec)?;
    let (img, d) = (&data.syn[0].image_left, spec.dims);
    let cfg = AugmentConfig::default();
    let mut views = vec![img.clone()];
    for k in 0..4 {
        views.push(weak_augment(img, d, &cfg, &mut RngStream::new(k, 0)));
    }
    for k in 0..4 {
        views.push(strong_augment(img, d, &cfg, &mut RngStream::new(k, 1)));
    }
    let (w, h) = (views.len() * d.width, d.height);
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for v in &views {
            px.extend(v[y * d.width..(y + 1) * d.width].iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    let mut f = std::fs::File::create(&out)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&px)?;
    println!("wrote {out}");
    Ok(())
}
