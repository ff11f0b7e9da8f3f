use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;
use crate::eyegen::{Domain, ImageDims};
use crate::nets::{Role, Tier};

fn g(yl: f64, pl: f64, yr: f64, pr: f64) -> GazeTarget {
    GazeTarget::new(yl, pl, yr, pr)
}

/// Percentile by counting ranks, no sorting.
fn brute_percentile(v: &[f64], p: f64) -> f64 {
    let kth = |k: usize| -> f64 {
        for &x in v {
            let below = v.iter().filter(|&&y| y < x).count();
            let equal = v.iter().filter(|&&y| y == x).count();
            if below <= k && k < below + equal {
                return x;
            }
        }
        unreachable!()
    };
    let h = (v.len() - 1) as f64 * p / 100.0;
    let k = h as usize;
    if k + 1 >= v.len() {
        return kth(k);
    }
    kth(k) * (1.0 - (h - k as f64)) + kth(k + 1) * (h - k as f64)
}

fn brute_grid(errors: &[Vec<f64>]) -> [[f64; 3]; 3] {
    let ps = [50.0, 75.0, 90.0];
    let mut out = [[0.0; 3]; 3];
    for (e, &pe) in ps.iter().enumerate() {
        let col: Vec<f64> = errors.iter().map(|f| brute_percentile(f, pe)).collect();
        for (u, &pu) in ps.iter().enumerate() {
            out[u][e] = brute_percentile(&col, pu);
        }
    }
    out
}

fn random_errors(seed: u64, users: usize, frames: usize) -> Vec<Vec<f64>> {
    let mut r = RngStream::new(seed, 77);
    (0..users).map(|_| (0..frames).map(|_| r.uniform_in(0.0, 10.0)).collect()).collect()
}

#[test]
fn angular_error_basics() {
    assert_eq!(angular_error(&g(5.0, -3.0, 4.0, 2.0), &g(5.0, -3.0, 4.0, 2.0)), 0.0);
    assert_abs_diff_eq!(angular_error(&g(30.0, 0.0, 30.0, 0.0), &g(0.0, 0.0, 0.0, 0.0)), 30.0, epsilon = 1e-9);
    // Against (0,0) the dot product reduces to cos(yaw)·cos(pitch).
    let want = (40f64.to_radians().cos() * 30f64.to_radians().cos()).acos().to_degrees();
    assert_abs_diff_eq!(angular_error(&g(40.0, 30.0, 40.0, 30.0), &g(0.0, 0.0, 0.0, 0.0)), want, epsilon = 1e-9);
    // Averaged over eyes.
    assert_abs_diff_eq!(angular_error(&g(10.0, 0.0, 0.0, 0.0), &g(0.0, 0.0, 0.0, 0.0)), 5.0, epsilon = 1e-9);
}

#[test]
fn sample_frames_contract() {
    let s = sample_frames(64, &mut RngStream::new(0, 0)).unwrap();
    assert_eq!(s.calibration(), (0..9).collect::<Vec<_>>());
    assert_eq!(s.test(), (9..64).collect::<Vec<_>>());
    let a = sample_frames(100, &mut RngStream::new(3, 1)).unwrap();
    let b = sample_frames(100, &mut RngStream::new(3, 1)).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.calibration().len(), a.test().len()), (9, 55));
    assert!(a.calibration().iter().all(|c| !a.test().contains(c)));
    assert!(a.calibration().iter().max() < a.test().iter().min());
    assert!(matches!(sample_frames(63, &mut RngStream::new(0, 0)), Err(EvalError::TooFewFrames { .. })));
}

#[test]
fn personalization_recovers_constant_bias() {
    let c = [1.5, -0.75, -2.0, 0.3];
    let mut r = RngStream::new(1, 0);
    let gts: Vec<GazeTarget> = (0..9).map(|_| g(r.uniform_in(-30.0, 30.0), r.uniform_in(-30.0, 30.0), r.uniform_in(-30.0, 30.0), r.uniform_in(-30.0, 30.0))).collect();
    let preds: Vec<GazeTarget> = gts.iter().map(|t| GazeTarget::from_array(std::array::from_fn(|k| t.to_array()[k] + c[k]))).collect();
    let m = personalize(&preds, &gts).unwrap();
    for k in 0..4 {
        assert!((m.bias[k] + c[k]).abs() < 1e-6);
    }
    for (p, t) in preds.iter().zip(&gts) {
        assert!(angular_error(&m.apply(p), t) < 1e-6);
    }
    let one = personalize(&preds[..1], &gts[..1]).unwrap();
    assert_eq!(one.bias, std::array::from_fn(|k| gts[0].to_array()[k] - preds[0].to_array()[k]));
    assert!(matches!(personalize(&[], &[]), Err(EvalError::Empty(_))));
}

#[test]
fn personalization_noise_bound() {
    let sigma = 2.0;
    let bound = 3.0 * sigma / 3.0;
    let mut within = 0;
    for trial in 0..100 {
        let mut r = RngStream::new(trial, 5);
        let gts = vec![g(0.0, 0.0, 0.0, 0.0); 9];
        let preds: Vec<GazeTarget> = (0..9).map(|_| GazeTarget::from_array(std::array::from_fn(|_| sigma * r.normal()))).collect();
        let m = personalize(&preds, &gts).unwrap();
        within += m.bias.iter().all(|b| b.abs() <= bound) as usize;
    }
    // Four components at a 3σ bound: about 1% of trials may exceed.
    assert!(within >= 97, "{within}/100");
}

#[test]
fn percentile_interpolation() {
    assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.5);
    assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 75.0), 3.25);
    assert_eq!(percentile(&[7.0], 90.0), 7.0);
    let r = eu_table(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
    assert_eq!(r.grid[0][0], 2.5);
}

#[test]
fn constant_errors_fill_grid() {
    let e = vec![vec![1.25; 10]; 4];
    let r = eu_report(&e, 200, 0).unwrap();
    for u in 0..3 {
        for k in 0..3 {
            assert_eq!(r.grid[u][k], 1.25);
            assert_eq!((r.ci_lo[u][k], r.ci_hi[u][k]), (1.25, 1.25));
        }
    }
}

#[test]
fn eu_table_matches_brute_force() {
    for seed in 0..10 {
        let e = random_errors(seed, 5, 20);
        let got = eu_table(&e).unwrap().grid;
        let want = brute_grid(&e);
        for u in 0..3 {
            for k in 0..3 {
                assert!((got[u][k] - want[u][k]).abs() < 1e-9);
            }
            assert!(got[u][0] <= got[u][1] && got[u][1] <= got[u][2]);
        }
    }
}

#[test]
fn eu_table_invariances() {
    let e = random_errors(4, 6, 15);
    let base = eu_table(&e).unwrap().grid;
    let mut shuffled: Vec<Vec<f64>> = e.iter().rev().cloned().collect();
    for f in &mut shuffled {
        f.reverse();
    }
    assert_eq!(eu_table(&shuffled).unwrap().grid, base);
    let shifted: Vec<Vec<f64>> = e.iter().map(|f| f.iter().map(|x| x + 0.5).collect()).collect();
    let s = eu_table(&shifted).unwrap().grid;
    for u in 0..3 {
        for k in 0..3 {
            assert_abs_diff_eq!(s[u][k], base[u][k] + 0.5, epsilon = 1e-12);
        }
    }
    assert!(eu_table(&[]).is_err());
    assert!(eu_table(&[vec![]]).is_err());
}

#[test]
fn single_user_constant_ci_is_point() {
    let (lo, hi) = bootstrap_ci(&[vec![3.0; 55]], 1000, 9).unwrap();
    assert!(lo.iter().flatten().chain(hi.iter().flatten()).all(|&v| v == 3.0));
}

#[test]
fn ci_covers_point_estimate() {
    let mut covered = 0;
    for seed in 0..100 {
        let e = random_errors(seed + 1000, 8, 12);
        let r = eu_report(&e, 300, seed).unwrap();
        let ok = (0..3).all(|u| (0..3).all(|k| r.ci_lo[u][k] <= r.grid[u][k] && r.grid[u][k] <= r.ci_hi[u][k]));
        covered += ok as usize;
    }
    assert!(covered >= 99, "{covered}/100");
}

fn gaussian_users(seed: u64, users: usize) -> Vec<Vec<f64>> {
    let mut r = RngStream::new(seed, 123);
    (0..users)
        .map(|_| {
            let mu = 3.0 + r.normal();
            (0..20).map(|_| mu + 0.5 * r.normal()).collect()
        })
        .collect()
}

fn mean_ci_width(users: usize, fixtures: u64) -> f64 {
    let mut total = 0.0;
    for f in 0..fixtures {
        let e = gaussian_users(f * 31 + users as u64, users);
        let (lo, hi) = bootstrap_ci(&e, 400, f).unwrap();
        total += (0..3).flat_map(|u| (0..3).map(move |k| (u, k))).map(|(u, k)| hi[u][k] - lo[u][k]).sum::<f64>() / 9.0;
    }
    total / fixtures as f64
}

#[test]
fn ci_width_shrinks_with_more_users() {
    let ratio = mean_ci_width(20, 30) / mean_ci_width(40, 30);
    assert!((1.2..=1.7).contains(&ratio), "{ratio}");
}

#[test]
fn bootstrap_independent_of_thread_count() {
    let e = random_errors(11, 7, 30);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| bootstrap_ci(&e, 250, 4).unwrap())
    };
    assert_eq!(run(1), run(4));
}

fn eval_pool(subjects: u32, frames: u32) -> (Vec<Sample>, Vec<GazeTarget>) {
    let d = ImageDims::DEFAULT;
    let mut r = RngStream::new(2, 2);
    let mut samples = Vec::new();
    for s in 0..subjects {
        for f in 0..frames {
            let t = g(r.uniform_in(-20.0, 20.0), r.uniform_in(-20.0, 20.0), r.uniform_in(-20.0, 20.0), r.uniform_in(-20.0, 20.0));
            samples.push(Sample::labeled(vec![0.5; d.pixels()], vec![0.5; d.pixels()], t, s + 10, 0, f, Domain::Real));
        }
    }
    let gts = samples.iter().map(|s| s.gaze().unwrap()).collect();
    (samples, gts)
}

#[test]
fn per_user_errors_removes_subject_bias() {
    let (samples, gts) = eval_pool(3, 64);
    let preds: Vec<GazeTarget> = samples
        .iter()
        .zip(&gts)
        .map(|(s, t)| {
            let off = s.subject_id as f64 * 0.5;
            GazeTarget::from_array(t.to_array().map(|v| v + off))
        })
        .collect();
    let errs = per_user_errors(&samples, &preds, 0).unwrap();
    assert_eq!(errs.len(), 3);
    assert!(errs.iter().all(|u| u.len() == 55 && u.iter().all(|&e| e < 1e-6)));
}

#[test]
fn per_user_errors_rejects_unlabeled_and_short() {
    let (mut samples, gts) = eval_pool(1, 64);
    let (short, sg) = eval_pool(1, 40);
    assert!(matches!(per_user_errors(&short, &sg, 0), Err(EvalError::TooFewFrames { .. })));
    let s0 = &samples[0];
    samples[0] = Sample::unlabeled(s0.image_left.clone(), s0.image_right.clone(), s0.subject_id, 0, 0, Domain::Real);
    assert!(matches!(per_user_errors(&samples, &gts, 0), Err(EvalError::Unlabeled(0))));
}

#[test]
fn export_embeddings_schema_and_determinism() {
    let dims = ImageDims::DEFAULT;
    let bundle = ModelBundle::new(Tier::Student, dims, Role::Student, &mut RngStream::new(0, 0));
    let (samples, _) = eval_pool(2, 3);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_embeddings(&bundle, &samples, &a).unwrap();
    export_embeddings(&bundle, &samples, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), samples.len() + 1);
    let dim = 2 * bundle.spec.embed_dim;
    assert!(lines.iter().all(|l| l.split(',').count() == 4 + dim));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn metrics_csv_and_table_layout() {
    let mut rep = eu_table(&[vec![3.48; 4]]).unwrap();
    rep.ci_lo[0][0] = 3.29;
    rep.ci_hi[0][0] = 3.67;
    let res = vec![
        MethodResult { method: "a".into(), seed: Some(1), inference_params: 256_000, report: rep.clone() },
        MethodResult { method: "a".into(), seed: None, inference_params: 256_000, report: rep },
    ];
    let csv = metrics_csv(&res);
    assert_eq!(csv.lines().count(), 1 + 18);
    assert!(csv.contains("a,median,U50,E50,3.480000,3.290000,3.670000"));
    let t = render_table("T", &res);
    assert!(t.contains("3.48 (0.19)") && t.contains("256.0K"), "{t}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaze_vectors_are_unit(y in -90.0f64..90.0, p in -90.0f64..90.0) {
        let v = gaze_vector(y, p);
        prop_assert!(((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn angular_error_symmetric(a in prop::array::uniform4(-40.0f64..40.0), b in prop::array::uniform4(-40.0f64..40.0)) {
        let (x, y) = (GazeTarget::from_array(a), GazeTarget::from_array(b));
        prop_assert!((angular_error(&x, &y) - angular_error(&y, &x)).abs() < 1e-9);
        prop_assert!(angular_error(&x, &y) >= 0.0);
    }
}
