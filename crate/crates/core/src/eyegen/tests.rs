use std::collections::HashSet;

use super::dataset::{real_gaze, syn_gaze};
use super::*;
use crate::tensorcore::{stream_id, RngStream};

fn quiet_shift() -> DomainShift {
    DomainShift {
        sensor_noise_sigma: 0.0,
        real_noise_sigma: 0.0,
        ..DomainShift::default()
    }
}

fn tiny_spec() -> DatasetSpec {
    DatasetSpec {
        n_subjects_pretrain: 2,
        n_subjects_syn: 2,
        n_subjects_real_train: 2,
        n_subjects_real_eval: 1,
        n_subjects_real_upper: 1,
        frames_per_recording: 3,
        recordings_per_subject: 1,
        seed: 11,
        ..DatasetSpec::default()
    }
}

/// Dark-pixel centroid inside a disc around `(cx, cy)`.
fn pupil_centroid(img: &[f32], dims: ImageDims, cx: f64, cy: f64, radius: f64) -> (f64, f64) {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for py in 0..dims.height {
        for px in 0..dims.width {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            if (x - cx).hypot(y - cy) > radius {
                continue;
            }
            let w = (0.1 - img[py * dims.width + px] as f64).max(0.0);
            sw += w;
            sx += w * x;
            sy += w * y;
        }
    }
    (sx / sw, sy / sw)
}

#[test]
fn pupil_centered_at_zero_gaze() {
    let dims = ImageDims::DEFAULT;
    for subject in 0..20 {
        let p = subject_params(5, subject);
        for (eye, (ox, oy)) in [(Eye::Left, p.eye_corner_offset[0]), (Eye::Right, p.eye_corner_offset[1])] {
            let mut rng = RngStream::new(1, subject as u64);
            let img = render_eye(&p, eye, 0.0, 0.0, Domain::Syn, &quiet_shift(), dims, &mut rng).unwrap();
            let (cx, cy) = (32.0 + ox, 24.0 + oy);
            let r = p.pupil_ratio * p.iris_radius_ratio * 48.0 + 1.5;
            let (mx, my) = pupil_centroid(&img, dims, cx, cy, r);
            assert!((mx - cx).abs() < 0.5 && (my - cy).abs() < 0.5, "subject {subject}: ({mx},{my}) vs ({cx},{cy})");
        }
    }
}

#[test]
fn yaw_sweep_moves_pupil_right() {
    let dims = ImageDims::DEFAULT;
    for subject in 0..5 {
        let p = subject_params(9, subject);
        let r_iris = p.iris_radius_ratio * 48.0;
        let mut last = f64::NEG_INFINITY;
        for step in 0..=12 {
            let yaw = -30.0 + 5.0 * step as f64;
            let mut rng = RngStream::new(2, step);
            let img = render_eye(&p, Eye::Left, yaw, 10.0, Domain::Syn, &DomainShift::default(), dims, &mut rng).unwrap();
            // Search window follows the coarse eyeball rotation; the centroid is measured.
            let cx = 32.0 + p.eye_corner_offset[0].0 + 1.5 * r_iris * yaw.to_radians().tan();
            let cy = 24.0 + p.eye_corner_offset[0].1 - 1.5 * r_iris * 10f64.to_radians().tan();
            let (mx, _) = pupil_centroid(&img, dims, cx, cy, r_iris * 0.8);
            assert!(mx > last, "subject {subject} yaw {yaw}: {mx} <= {last}");
            last = mx;
        }
    }
}

#[test]
fn render_is_deterministic() {
    let p = subject_params(3, 7);
    for domain in [Domain::Syn, Domain::Real] {
        let a = render_eye(&p, Eye::Right, 12.0, -8.0, domain, &DomainShift::default(), ImageDims::DEFAULT, &mut RngStream::new(4, 4)).unwrap();
        let b = render_eye(&p, Eye::Right, 12.0, -8.0, domain, &DomainShift::default(), ImageDims::DEFAULT, &mut RngStream::new(4, 4)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn out_of_range_gaze_rejected() {
    let p = subject_params(0, 0);
    let e = render_eye(&p, Eye::Left, 46.0, 0.0, Domain::Syn, &DomainShift::default(), ImageDims::DEFAULT, &mut RngStream::new(0, 0));
    assert!(matches!(e, Err(EyeGenError::GazeOutOfRange { .. })));
    let e = render_eye(&p, Eye::Left, 0.0, f64::NAN, Domain::Syn, &DomainShift::default(), ImageDims::DEFAULT, &mut RngStream::new(0, 0));
    assert!(matches!(e, Err(EyeGenError::GazeOutOfRange { .. })));
}

#[test]
fn subject_params_in_range_and_deterministic() {
    for s in 0..200 {
        let p = subject_params(17, s);
        assert_eq!(p, subject_params(17, s));
        assert!((0.18..=0.30).contains(&p.iris_radius_ratio));
        assert!((0.25..=0.55).contains(&p.pupil_ratio));
        assert!((0.55..=1.0).contains(&p.eyelid_aperture));
        assert!((0.6..=0.95).contains(&p.sclera_brightness));
        for (dx, dy) in p.eye_corner_offset {
            assert!(dx.abs() <= 3.0 && dy.abs() <= 3.0);
        }
        assert!((1..=4).contains(&p.glint_layout.len()));
    }
}

#[test]
fn syn_gaze_histogram_uniform() {
    let n = 10_000;
    let mut bins = [[0usize; 8]; 4];
    for i in 0..n {
        let g = syn_gaze(&mut RngStream::new(0, stream_id(&[i, 0, 0])));
        for (c, v) in g.to_array().iter().enumerate() {
            let b = (((v + 40.0) / 10.0).floor() as usize).min(7);
            bins[c][b] += 1;
        }
    }
    for comp in bins {
        for count in comp {
            let frac = count as f64 / n as f64;
            assert!((frac - 0.125).abs() <= 0.015, "bin fraction {frac}");
        }
    }
}

#[test]
fn real_gaze_respects_filter_and_is_concentrated() {
    let mut r = RngStream::new(1, 1);
    let mut central = 0;
    for _ in 0..5000 {
        let g = real_gaze(&mut r);
        assert!(g.within(GAZE_LIMIT_DEG));
        if g.yaw_left.abs() < 15.0 {
            central += 1;
        }
    }
    // About 68% of a sigma-15 normal lies within one sigma.
    assert!((3100..3700).contains(&central), "{central}");
}

#[test]
fn pools_disjoint_and_labels_structural() {
    let b = make_dataset(&tiny_spec()).unwrap();
    let pools: Vec<HashSet<u32>> = Split::ALL.iter().map(|&s| b.split(s).iter().map(|x| x.subject_id).collect()).collect();
    for i in 0..pools.len() {
        assert!(!pools[i].is_empty());
        for j in i + 1..pools.len() {
            assert!(pools[i].is_disjoint(&pools[j]));
        }
    }
    assert!(b.real_train.iter().all(|s| !s.has_gaze() && s.domain == Domain::Real));
    assert!(b.syn.iter().all(|s| s.has_gaze() && s.domain == Domain::Syn));
    assert!(b.real_eval.iter().all(|s| s.has_gaze() && s.domain == Domain::Real));
    for split in Split::ALL {
        for s in b.split(split) {
            if let Some(g) = s.gaze() {
                assert!(g.within(GAZE_LIMIT_DEG));
            }
        }
    }
}

#[test]
fn empty_eval_pool_allowed() {
    let spec = DatasetSpec {
        n_subjects_real_eval: 0,
        ..tiny_spec()
    };
    let b = make_dataset(&spec).unwrap();
    assert!(b.real_eval.is_empty());
    assert!(!b.pretrain.is_empty() && !b.syn.is_empty() && !b.real_train.is_empty());
}

#[test]
fn frames_share_subject_but_not_noise() {
    let b = make_dataset(&tiny_spec()).unwrap();
    let rec: Vec<_> = b.syn.iter().filter(|s| s.subject_id == b.syn[0].subject_id).collect();
    assert_eq!(rec.len(), 3);
    assert_ne!(rec[0].image_left, rec[1].image_left);
}

#[test]
fn generation_independent_of_thread_count() {
    let spec = tiny_spec();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| make_dataset(&spec).unwrap());
    let many = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| make_dataset(&spec).unwrap());
    assert_eq!(one, many);
}

#[test]
fn dataset_round_trip() {
    let b = make_dataset(&tiny_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&b, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(b, back);
    let (_, rt) = load_shard(&dir.path().join("real_train.eye1")).unwrap();
    assert!(rt.iter().all(|s| s.gaze().is_none()));
}

#[test]
fn real_train_shard_has_no_gaze_bytes() {
    let b = make_dataset(&tiny_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&b, dir.path()).unwrap();
    let px = b.spec.dims.pixels() as u64;
    let n = b.real_train.len() as u64;
    let len = std::fs::metadata(dir.path().join("real_train.eye1")).unwrap().len();
    assert_eq!(len, 4 + 4 + 4 + 8 + n * (14 + 8 * px));
}

#[test]
fn shard_errors_are_distinct() {
    let b = make_dataset(&tiny_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.eye1");
    save_shard(&path, b.spec.dims, &b.syn).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_shard(&path), Err(EyeGenError::BadMagic(_))));

    let mut bad = good.clone();
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_shard(&path), Err(EyeGenError::Version { found: 9, .. })));

    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(load_shard(&path), Err(EyeGenError::Truncated(_))));
}

#[test]
fn photometric_inverse_recovers_syn() {
    let dims = ImageDims::DEFAULT;
    let shift = DomainShift {
        warp_amplitude: 0.0,
        ..quiet_shift()
    };
    let p = subject_params(2, 3);
    let syn = render_eye(&p, Eye::Left, 10.0, 5.0, Domain::Syn, &shift, dims, &mut RngStream::new(0, 0)).unwrap();
    let real = render_eye(&p, Eye::Left, 10.0, 5.0, Domain::Real, &shift, dims, &mut RngStream::new(0, 0)).unwrap();
    assert_ne!(syn, real);
    for py in 0..dims.height {
        for px in 0..dims.width {
            let i = py * dims.width + px;
            let back = invert_photometric(real[i], px, py, &shift, dims);
            assert!((back - syn[i]).abs() < 1e-4, "({px},{py}) {back} vs {}", syn[i]);
        }
    }

    // With noise on, the residual stays at the noise scale.
    let noisy = DomainShift {
        warp_amplitude: 0.0,
        ..DomainShift::default()
    };
    let syn = render_eye(&p, Eye::Left, 10.0, 5.0, Domain::Syn, &noisy, dims, &mut RngStream::new(0, 1)).unwrap();
    let real = render_eye(&p, Eye::Left, 10.0, 5.0, Domain::Real, &noisy, dims, &mut RngStream::new(0, 2)).unwrap();
    let mut se = 0.0;
    for py in 0..dims.height {
        for px in 0..dims.width {
            let i = py * dims.width + px;
            se += ((invert_photometric(real[i], px, py, &noisy, dims) - syn[i]) as f64).powi(2);
        }
    }
    let rms = (se / dims.pixels() as f64).sqrt();
    // SYN noise twice plus REAL noise through the inverse tone curve slope.
    let slope = 1.0 / noisy.tone_gamma / (1.0 - noisy.vignette);
    let bound = ((2.0 * noisy.sensor_noise_sigma.powi(2)) + (slope * noisy.real_noise_sigma).powi(2)).sqrt() * 1.5;
    assert!(rms < bound, "rms {rms} bound {bound}");
}

#[test]
fn spec_kv_round_trip() {
    let s = DatasetSpec {
        seed: 123456789,
        ..DatasetSpec::default()
    };
    assert_eq!(DatasetSpec::from_kv(&s.to_kv()).unwrap(), s);
}
