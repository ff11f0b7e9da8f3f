//! Trainers: identity pretraining of the foundation surrogate, linear probe,
//! synthetic finetuning, teacher self-distillation (stage 1), student
//! distillation (stage 2) and the comparison baselines.
//!
//! Every trainer is a pure function of its inputs and `RunConfig::seed`.
//! Batches and augmentations are drawn from counter streams keyed on
//! `(purpose, step, slot)`, so results do not depend on the worker count.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{strong_augment, weak_augment, AugmentConfig};
use crate::evalkit::EvalError;
use crate::eyegen::{EyeGenError, ImageDims, Sample};
use crate::losses::{DinoHeadConfig, GazeLossConfig, LossError, VicConfig};
use crate::nets::{normalize_deg, Bound, EmaConfig, ModelBundle, NetError, Tier};
use crate::tensorcore::{stream_id, AdamWConfig, Gradients, LrSchedule, OptimizerState, RngStream, Tape, Tensor, TensorError};

mod baselines;
mod pretrain;
mod probe;
mod stage1;
mod stage2;
mod supervised;

pub use baselines::{run_baseline, BaselineInputs, BaselineKind};
pub use pretrain::{embedding_distances, pretrain_identity, PRETRAIN_HOLDOUT_EVERY};
pub use probe::{linear_probe, ridge_fit, LinearProbe, RidgeModel, PROBE_RIDGE};
pub use stage1::stage1_optimize;
pub use stage2::{stage2_distill, stage2_with, Stage2Variant};
pub use supervised::{fully_supervised, synthetic_finetune};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] EyeGenError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("split {0} is empty")]
    MissingSplit(&'static str),
    #[error("expected a {expected} bundle, got {found}")]
    Tier { expected: &'static str, found: &'static str },
    #[error("unknown baseline {0:?}")]
    UnknownBaseline(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Loss remapping switches for the stage-1 ablation arms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationFlags {
    pub synsup_only: bool,
    pub sd_pl_only: bool,
    pub scheduler_off: bool,
    /// Prototype cross-entropy in place of the feature MSE.
    pub dino_loss_teacher: bool,
    pub teacher_tier: Tier,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            synsup_only: false,
            sd_pl_only: false,
            scheduler_off: false,
            dino_loss_teacher: false,
            teacher_tier: Tier::TeacherL,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub iterations: u64,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub ema: EmaConfig,
    pub gaze: GazeLossConfig,
    pub vic: VicConfig,
    pub dino: DinoHeadConfig,
    pub aug: AugmentConfig,
    /// Share of each stage-1 batch drawn from the synthetic pool.
    pub syn_fraction: f64,
    /// Weight of the stage-1 feature-matching term inside the unlabeled
    /// bracket. Projector outputs are unnormalized, so the raw term runs
    /// two to three orders of magnitude above the gaze losses.
    pub sd_scale: f64,
    /// End value of the stage-2 EMA weight ramp.
    pub lambda_e_end: f64,
    /// Multiplier on the teacher feature term in stage 2 and its variants.
    pub feature_weight: f64,
    pub flags: AblationFlags,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch: 64,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.01,
            ema: EmaConfig::default(),
            gaze: GazeLossConfig::default(),
            vic: VicConfig::default(),
            dino: DinoHeadConfig::default(),
            aug: AugmentConfig::default(),
            syn_fraction: 0.5,
            sd_scale: 0.01,
            lambda_e_end: 1.0,
            feature_weight: 1.0,
            flags: AblationFlags::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.batch < 2 {
            return bad(format!("batch must be >= 2, got {}", self.batch));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad(format!("need 0 <= min_lr <= lr with lr > 0, got {} / {}", self.min_lr, self.lr));
        }
        if !(0.0..=1.0).contains(&self.syn_fraction) {
            return bad(format!("syn_fraction {} outside [0, 1]", self.syn_fraction));
        }
        if self.flags.synsup_only && self.flags.sd_pl_only {
            return bad("synsup_only and sd_pl_only are exclusive".into());
        }
        if self.weight_decay < 0.0 || self.sd_scale < 0.0 || self.lambda_e_end < 0.0 || self.feature_weight < 0.0 {
            return bad("weight decay and loss weights must be non-negative".into());
        }
        self.ema.validate()?;
        self.gaze.validate()?;
        self.vic.validate()?;
        self.dino.validate()?;
        self.aug.validate().map_err(|e| PipelineError::Config(e.0))?;
        Ok(())
    }

    pub(crate) fn optimizer(&self, bundle: &ModelBundle) -> OptimizerState {
        self.optimizer_for(&bundle.params)
    }

    pub(crate) fn optimizer_for(&self, params: &crate::tensorcore::ParamSet) -> OptimizerState {
        let cfg = AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        };
        OptimizerState::new(params, cfg, LrSchedule::warmup_cosine(self.lr, self.min_lr, self.iterations))
    }
}

/// Per-iteration loss components plus run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub stage: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub seed: u64,
    pub wall_clock_s: f64,
    /// Extra scalar outcomes, e.g. held-out accuracy.
    pub summary: Vec<(String, f64)>,
}

impl RunReport {
    pub(crate) fn new(stage: &str, seed: u64, columns: &[&str]) -> Self {
        Self {
            stage: stage.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            seed,
            wall_clock_s: 0.0,
            summary: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    /// The `loss` column, which every trainer records.
    pub fn losses(&self) -> Vec<f64> {
        self.column("loss").unwrap_or_default()
    }

    pub fn summary_value(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|&(_, v)| v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("iteration,{}\n", self.columns.join(","));
        for (i, r) in self.rows.iter().enumerate() {
            write!(out, "{i}").unwrap();
            for v in r {
                write!(out, ",{v:e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Bundle a trainer returns together with its report.
#[derive(Clone, Debug)]
pub struct Trained {
    pub bundle: ModelBundle,
    pub report: RunReport,
}

// Stream purposes. Synthetic finetuning and the synthetic half of stage 1
// share `PURPOSE_SYN` so the synsup-only arm replays the same batches.
pub(crate) const PURPOSE_SYN: u64 = 1;
pub(crate) const PURPOSE_REAL: u64 = 2;
pub(crate) const PURPOSE_PRETRAIN: u64 = 3;
pub(crate) const PURPOSE_UPPER: u64 = 4;
pub(crate) const PURPOSE_INIT: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum View {
    Weak,
    Strong,
}

/// `n` indices drawn with replacement from `0..len` for step `t`.
pub(crate) fn draw_indices(seed: u64, purpose: u64, t: u64, len: usize, n: usize) -> Vec<usize> {
    let mut r = RngStream::new(seed, stream_id(&[purpose, t]));
    (0..n).map(|_| r.below(len)).collect()
}

/// Augmented binocular views of the drawn samples. Slot `i` of step `t`
/// gets its own stream per view kind, so the teacher's weak view and the
/// student's strong view of one sample are independent draws.
pub(crate) fn make_views(
    samples: &[&Sample],
    view: View,
    cfg: &AugmentConfig,
    dims: ImageDims,
    seed: u64,
    purpose: u64,
    t: u64,
) -> Vec<(Vec<f32>, Vec<f32>)> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let kind = match view {
                View::Weak => 1,
                View::Strong => 2,
            };
            let mut r = RngStream::new(seed, stream_id(&[purpose, t, i as u64, kind]));
            let f = |img: &[f32], r: &mut RngStream| match view {
                View::Weak => weak_augment(img, dims, cfg, r),
                View::Strong => strong_augment(img, dims, cfg, r),
            };
            let l = f(&s.image_left, &mut r);
            let rr = f(&s.image_right, &mut r);
            (l, rr)
        })
        .collect()
}

/// Normalized `[B, 4]` gaze labels of labeled samples.
pub(crate) fn label_tensor(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(samples.len() * 4);
    for s in samples {
        let g = s.gaze().ok_or(PipelineError::MissingSplit("labels"))?;
        data.extend(g.to_array().map(normalize_deg));
    }
    Ok(Tensor::new(&[samples.len(), 4], data)?)
}

/// Gradients for every bound parameter, zero where unused, then one
/// optimizer step.
pub(crate) fn apply_step(bundle: &mut ModelBundle, opt: &mut OptimizerState, bound: &Bound, grads: &mut Gradients<f32>) -> Result<()> {
    let g: Vec<Tensor<f32>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    opt.step(&mut bundle.params, &g)?;
    Ok(())
}

pub(crate) fn scalar(tape: &Tape<f32>, v: crate::tensorcore::Var) -> f64 {
    tape.value(v).item() as f64
}

pub(crate) fn nonempty<'a>(name: &'static str, pool: &'a [Sample]) -> Result<&'a [Sample]> {
    if pool.is_empty() {
        return Err(PipelineError::MissingSplit(name));
    }
    Ok(pool)
}

pub(crate) fn expect_tier(bundle: &ModelBundle, teacher: bool) -> Result<()> {
    if bundle.tier().is_teacher() != teacher {
        return Err(PipelineError::Tier {
            expected: if teacher { "teacher" } else { "student" },
            found: bundle.tier().name(),
        });
    }
    Ok(())
}

/// Models that map binocular samples to normalized gaze.
pub trait GazeModel {
    fn predict_normalized(&self, samples: &[&Sample]) -> Result<Vec<[f32; 4]>>;
    fn inference_params(&self) -> usize;
}

impl GazeModel for ModelBundle {
    fn predict_normalized(&self, samples: &[&Sample]) -> Result<Vec<[f32; 4]>> {
        Ok(self.predict(samples)?)
    }

    fn inference_params(&self) -> usize {
        self.inference_param_count()
    }
}

/// Randomly initialized student for a given run seed. Synthetic finetuning
/// of the student starts here.
pub fn fresh_student(dims: ImageDims, seed: u64) -> ModelBundle {
    ModelBundle::new(Tier::Student, dims, crate::nets::Role::Student, &mut RngStream::new(seed, stream_id(&[PURPOSE_INIT, 4])))
}

/// Personalized EU report of any model on a labeled pool.
pub fn evaluate(model: &dyn GazeModel, samples: &[Sample], seed: u64, bootstrap_iters: usize) -> Result<crate::evalkit::EUReport> {
    use crate::evalkit::{eu_report, per_user_errors, to_degrees};
    let refs: Vec<&Sample> = samples.iter().collect();
    let preds: Vec<_> = model.predict_normalized(&refs)?.iter().map(to_degrees).collect();
    let errors = per_user_errors(samples, &preds, seed)?;
    Ok(eu_report(&errors, bootstrap_iters, seed)?)
}
