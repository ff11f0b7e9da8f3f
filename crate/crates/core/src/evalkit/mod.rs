//! Angular error, 9/55 calibration split, bias personalization, EU
//! percentile tables with hierarchical bootstrap intervals, and CSV export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::eyegen::{GazeTarget, Sample};
use crate::nets::{denormalize, ModelBundle, NetError};
use crate::tensorcore::{stream_id, RngStream};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("recording has {found} frames, need {need}")]
    TooFewFrames { found: usize, need: usize },
    #[error("sample {0} has no gaze label")]
    Unlabeled(usize),
    #[error("{0}")]
    Mismatch(String),
}

type Result<T> = std::result::Result<T, EvalError>;

pub const FRAMES_PER_RECORDING: usize = 64;
pub const CALIBRATION_FRAMES: usize = 9;
pub const BOOTSTRAP_ITERS: usize = 1000;
/// Row and column order of the EU grid.
pub const PERCENTILES: [f64; 3] = [50.0, 75.0, 90.0];

/// Unit gaze vector from yaw and pitch in degrees.
pub fn gaze_vector(yaw_deg: f64, pitch_deg: f64) -> [f64; 3] {
    let (y, p) = (yaw_deg.to_radians(), pitch_deg.to_radians());
    [y.sin() * p.cos(), p.sin(), y.cos() * p.cos()]
}

// atan2 of cross and dot norms; acos loses precision near zero.
fn eye_angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let c = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt().atan2(d).to_degrees()
}

/// Frame error in degrees: mean of the two per-eye angles.
pub fn angular_error(pred: &GazeTarget, gt: &GazeTarget) -> f64 {
    let l = eye_angle(gaze_vector(pred.yaw_left, pred.pitch_left), gaze_vector(gt.yaw_left, gt.pitch_left));
    let r = eye_angle(gaze_vector(pred.yaw_right, pred.pitch_right), gaze_vector(gt.yaw_right, gt.pitch_right));
    0.5 * (l + r)
}

/// Calibration and test frame indices of one recording. Disjoint by
/// construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSplit {
    calibration: Vec<usize>,
    test: Vec<usize>,
}

impl FrameSplit {
    pub fn calibration(&self) -> &[usize] {
        &self.calibration
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }
}

/// Draw 64 frame indices uniformly without replacement; the first 9 in
/// index order calibrate, the other 55 are scored.
pub fn sample_frames(n_frames: usize, rng: &mut RngStream) -> Result<FrameSplit> {
    if n_frames < FRAMES_PER_RECORDING {
        return Err(EvalError::TooFewFrames {
            found: n_frames,
            need: FRAMES_PER_RECORDING,
        });
    }
    let mut idx: Vec<usize> = if n_frames == FRAMES_PER_RECORDING {
        (0..n_frames).collect()
    } else {
        rng.permutation(n_frames)[..FRAMES_PER_RECORDING].to_vec()
    };
    idx.sort_unstable();
    let test = idx.split_off(CALIBRATION_FRAMES);
    Ok(FrameSplit { calibration: idx, test })
}

/// Additive per-eye bias in degrees, `[Δyaw_L, Δpitch_L, Δyaw_R, Δpitch_R]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PersonalizationModel {
    pub bias: [f64; 4],
}

impl PersonalizationModel {
    pub fn apply(&self, pred: &GazeTarget) -> GazeTarget {
        let p = pred.to_array();
        GazeTarget::from_array(std::array::from_fn(|i| p[i] + self.bias[i]))
    }
}

/// Mean residual `gt − pred` over calibration frames.
pub fn personalize(preds: &[GazeTarget], gts: &[GazeTarget]) -> Result<PersonalizationModel> {
    if preds.is_empty() {
        return Err(EvalError::Empty("calibration set"));
    }
    if preds.len() != gts.len() {
        return Err(EvalError::Mismatch(format!("{} predictions vs {} labels", preds.len(), gts.len())));
    }
    let mut bias = [0.0; 4];
    for (p, g) in preds.iter().zip(gts) {
        let (p, g) = (p.to_array(), g.to_array());
        for k in 0..4 {
            bias[k] += g[k] - p[k];
        }
    }
    let n = preds.len() as f64;
    Ok(PersonalizationModel { bias: bias.map(|b| b / n) })
}

/// Linear interpolation at rank `(n−1)·p/100` of the sorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, p)
}

fn percentile_sorted(v: &[f64], p: f64) -> f64 {
    debug_assert!(!v.is_empty());
    let h = (v.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// 3×3 grid indexed `[u][e]` over [`PERCENTILES`].
pub type Grid = [[f64; 3]; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct EUReport {
    pub grid: Grid,
    pub ci_lo: Grid,
    pub ci_hi: Grid,
    pub users: usize,
    pub frames_per_user: usize,
}

impl EUReport {
    pub fn e50u50(&self) -> f64 {
        self.grid[0][0]
    }

    /// Diagonal cells E50U50, E75U75, E90U90.
    pub fn diagonal(&self) -> [f64; 3] {
        [self.grid[0][0], self.grid[1][1], self.grid[2][2]]
    }

    pub fn ci_halfwidth(&self, u: usize, e: usize) -> f64 {
        0.5 * (self.ci_hi[u][e] - self.ci_lo[u][e])
    }
}

fn grid_of(errors: &[Vec<f64>]) -> Grid {
    let per_user: Vec<[f64; 3]> = errors
        .iter()
        .map(|f| {
            let mut s = f.clone();
            s.sort_by(f64::total_cmp);
            PERCENTILES.map(|p| percentile_sorted(&s, p))
        })
        .collect();
    let mut g = [[0.0; 3]; 3];
    for e in 0..3 {
        let mut col: Vec<f64> = per_user.iter().map(|u| u[e]).collect();
        col.sort_by(f64::total_cmp);
        for (u, &p) in PERCENTILES.iter().enumerate() {
            g[u][e] = percentile_sorted(&col, p);
        }
    }
    g
}

fn check_errors(errors: &[Vec<f64>]) -> Result<()> {
    if errors.is_empty() {
        return Err(EvalError::Empty("users"));
    }
    if errors.iter().any(|f| f.is_empty()) {
        return Err(EvalError::Empty("frames of a user"));
    }
    Ok(())
}

/// Point estimates only; the interval grids equal the point grid.
pub fn eu_table(errors: &[Vec<f64>]) -> Result<EUReport> {
    check_errors(errors)?;
    let grid = grid_of(errors);
    Ok(EUReport {
        grid,
        ci_lo: grid,
        ci_hi: grid,
        users: errors.len(),
        frames_per_user: errors[0].len(),
    })
}

/// 2.5/97.5 percentile bounds per cell over `iterations` replicates that
/// resample users, then frames within each drawn user. Replicate `r` uses
/// stream `r`, so the result does not depend on the worker count.
pub fn bootstrap_ci(errors: &[Vec<f64>], iterations: usize, seed: u64) -> Result<(Grid, Grid)> {
    check_errors(errors)?;
    if iterations == 0 {
        let g = grid_of(errors);
        return Ok((g, g));
    }
    let reps: Vec<Grid> = (0..iterations)
        .into_par_iter()
        .map(|r| {
            let mut rng = RngStream::new(seed, r as u64);
            let n = errors.len();
            let sample: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let u = &errors[rng.below(n)];
                    (0..u.len()).map(|_| u[rng.below(u.len())]).collect()
                })
                .collect();
            grid_of(&sample)
        })
        .collect();
    let mut lo = [[0.0; 3]; 3];
    let mut hi = [[0.0; 3]; 3];
    for u in 0..3 {
        for e in 0..3 {
            let mut cell: Vec<f64> = reps.iter().map(|g| g[u][e]).collect();
            cell.sort_by(f64::total_cmp);
            lo[u][e] = percentile_sorted(&cell, 2.5);
            hi[u][e] = percentile_sorted(&cell, 97.5);
        }
    }
    Ok((lo, hi))
}

/// Point grid plus bootstrap interval.
pub fn eu_report(errors: &[Vec<f64>], iterations: usize, seed: u64) -> Result<EUReport> {
    let mut r = eu_table(errors)?;
    let (lo, hi) = bootstrap_ci(errors, iterations, seed)?;
    r.ci_lo = lo;
    r.ci_hi = hi;
    Ok(r)
}

/// Network output (normalized units) to degrees.
pub fn to_degrees(pred: &[f32; 4]) -> GazeTarget {
    GazeTarget::from_array(pred.map(denormalize))
}

/// Personalized test-frame errors, one list per subject in id order.
///
/// Recordings are grouped by `(subject, recording)`, split 9/55 with a
/// stream keyed on both ids, and corrected with a bias fit on their own
/// calibration frames. Test-frame labels are only read for scoring.
pub fn per_user_errors(samples: &[Sample], preds: &[GazeTarget], seed: u64) -> Result<Vec<Vec<f64>>> {
    if samples.len() != preds.len() {
        return Err(EvalError::Mismatch(format!("{} samples vs {} predictions", samples.len(), preds.len())));
    }
    if samples.is_empty() {
        return Err(EvalError::Empty("evaluation samples"));
    }
    let mut recs: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if !s.has_gaze() {
            return Err(EvalError::Unlabeled(i));
        }
        recs.entry((s.subject_id, s.recording_id)).or_default().push(i);
    }
    let mut users: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for ((subject, recording), mut idx) in recs {
        idx.sort_by_key(|&i| samples[i].frame_id);
        let mut rng = RngStream::new(seed, stream_id(&[subject as u64, recording as u64]));
        let split = sample_frames(idx.len(), &mut rng)?;
        let gt = |k: usize| samples[idx[k]].gaze().expect("checked labeled");
        let cal_p: Vec<GazeTarget> = split.calibration().iter().map(|&k| preds[idx[k]]).collect();
        let cal_g: Vec<GazeTarget> = split.calibration().iter().map(|&k| gt(k)).collect();
        let model = personalize(&cal_p, &cal_g)?;
        let errs = users.entry(subject).or_default();
        for &k in split.test() {
            errs.push(angular_error(&model.apply(&preds[idx[k]]), &gt(k)));
        }
    }
    Ok(users.into_values().collect())
}

/// Predict, personalize and tabulate a model on a labeled pool.
pub fn evaluate_bundle(bundle: &ModelBundle, samples: &[Sample], seed: u64, bootstrap_iters: usize) -> Result<EUReport> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let preds: Vec<GazeTarget> = bundle.predict(&refs)?.iter().map(to_degrees).collect();
    let errors = per_user_errors(samples, &preds, seed)?;
    eu_report(&errors, bootstrap_iters, seed)
}

/// One CSV row per sample: index, subject, mean yaw and pitch over both eyes
/// (empty when unlabeled), then the binocular embedding.
pub fn export_embeddings(bundle: &ModelBundle, samples: &[Sample], path: &Path) -> Result<()> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let emb = bundle.embed_pairs(&refs)?;
    let dim = emb.first().map_or(0, Vec::len);
    let mut out = String::from("sample_id,subject_id,yaw,pitch");
    for k in 0..dim {
        write!(out, ",e{k}").unwrap();
    }
    out.push('\n');
    for (i, (s, e)) in samples.iter().zip(&emb).enumerate() {
        write!(out, "{i},{}", s.subject_id).unwrap();
        match s.gaze() {
            Some(g) => write!(out, ",{},{}", 0.5 * (g.yaw_left + g.yaw_right), 0.5 * (g.pitch_left + g.pitch_right)).unwrap(),
            None => out.push_str(",,"),
        }
        for v in e {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Labelled report for the metrics CSV. `seed` is `None` for cross-seed
/// medians.
#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: String,
    pub seed: Option<u64>,
    pub inference_params: usize,
    pub report: EUReport,
}

/// `method,seed,U,E,value_deg,ci_lo,ci_hi`, nine rows per result.
pub fn metrics_csv(results: &[MethodResult]) -> String {
    let mut out = String::from("method,seed,U,E,value_deg,ci_lo,ci_hi\n");
    for r in results {
        let seed = r.seed.map_or_else(|| "median".to_string(), |s| s.to_string());
        for (u, pu) in PERCENTILES.iter().enumerate() {
            for (e, pe) in PERCENTILES.iter().enumerate() {
                writeln!(
                    out,
                    "{},{seed},U{pu},E{pe},{:.6},{:.6},{:.6}",
                    r.method, r.report.grid[u][e], r.report.ci_lo[u][e], r.report.ci_hi[u][e]
                )
                .unwrap();
            }
        }
    }
    out
}

pub fn write_metrics_csv(results: &[MethodResult], path: &Path) -> Result<()> {
    write_file(path, metrics_csv(results).as_bytes())
}

fn human_params(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.2}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

/// Plain-text table with `value (ci_halfwidth)` cells on the diagonal.
pub fn render_table(title: &str, results: &[MethodResult]) -> String {
    let head = ["Method", "Inf. params", "E50U50", "E75U75", "E90U90"];
    let rows: Vec<[String; 5]> = results
        .iter()
        .map(|r| {
            let c = |k: usize| format!("{:.2} ({:.2})", r.report.grid[k][k], r.report.ci_halfwidth(k, k));
            [r.method.clone(), human_params(r.inference_params), c(0), c(1), c(2)]
        })
        .collect();
    let mut w = head.map(str::len);
    for r in &rows {
        for (k, c) in r.iter().enumerate() {
            w[k] = w[k].max(c.len());
        }
    }
    let mut out = format!("{title}\n");
    let line = |cells: &[&str]| {
        let mut s = String::new();
        for (k, c) in cells.iter().enumerate() {
            if k == 0 {
                write!(s, "{c:<width$}", width = w[k]).unwrap();
            } else {
                write!(s, "  {c:>width$}", width = w[k]).unwrap();
            }
        }
        s.push('\n');
        s
    };
    out += &line(&head);
    out += &format!("{}\n", "-".repeat(w.iter().sum::<usize>() + 2 * (w.len() - 1)));
    for r in &rows {
        out += &line(&r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Full 3×3 grid for one report, rows U50/U75/U90.
pub fn render_grid(report: &EUReport) -> String {
    let mut out = String::from("       E50            E75            E90\n");
    for (u, pu) in PERCENTILES.iter().enumerate() {
        write!(out, "U{pu:<3}").unwrap();
        for e in 0..3 {
            write!(out, "  {:>6.2} ({:.2})", report.grid[u][e], report.ci_halfwidth(u, e)).unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;
