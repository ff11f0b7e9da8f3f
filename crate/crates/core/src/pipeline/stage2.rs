use std::time::Instant;

use super::*;
use crate::losses::{pseudo_loss, sd_mse, sp_kd, stage2_total, stage2_weights, vic_kd, Stage2Terms};
use crate::nets::{batch_inputs, ema_update, Role};

const TEACHER_TAG: &str = "t";
const TO_TEACHER: &str = "s2t";
const TO_EMA: &str = "s2e";

/// Which distillation objective the student trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage2Variant {
    /// Feature matching to the teacher and EMA student, plus both sets of
    /// pseudo-labels.
    Full,
    /// Teacher pseudo-labels only.
    PseudoOnly,
    /// Teacher pseudo-labels plus batch similarity matching on backbone
    /// embeddings.
    Sp,
}

impl Stage2Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "stage2",
            Self::PseudoOnly => "pseudo_only",
            Self::Sp => "sp_kd",
        }
    }
}

/// Distill a frozen teacher into a student on unlabeled real samples.
pub fn stage2_distill(teacher: &ModelBundle, student_init: &ModelBundle, real: &[Sample], cfg: &RunConfig) -> Result<Trained> {
    stage2_with(Stage2Variant::Full, teacher, student_init, real, cfg)
}

/// Stage 2 under any [`Stage2Variant`]. The teacher is never modified; the
/// EMA student mirrors the whole student every `cfg.ema.interval` steps.
pub fn stage2_with(variant: Stage2Variant, teacher: &ModelBundle, student_init: &ModelBundle, real: &[Sample], cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    expect_tier(teacher, true)?;
    expect_tier(student_init, false)?;
    let real = nonempty("real_train", real)?;
    let start = Instant::now();
    let dims = student_init.dims;
    if teacher.dims != dims {
        return Err(PipelineError::Config("teacher and student image sizes differ".into()));
    }

    let mut init_rng = RngStream::new(cfg.seed, stream_id(&[PURPOSE_INIT, 2]));
    let mut frozen = teacher.with_role(Role::Teacher);
    for tag in frozen.projector_tags().iter().map(|s| s.to_string()).collect::<Vec<_>>() {
        frozen.remove_projector(&tag)?;
    }
    frozen.add_projector(TEACHER_TAG, &mut init_rng);
    let mut student = student_init.with_role(Role::Student);
    student.add_projector(TO_TEACHER, &mut init_rng);
    student.add_projector(TO_EMA, &mut init_rng);
    let mut ema = student.with_role(Role::EmaStudent);
    let mut opt = cfg.optimizer(&student);

    let mut report = RunReport::new(variant.name(), cfg.seed, &["loss", "kd", "pseudo_t", "sd", "pseudo_e", "lr", "lambda_t", "lambda_e"]);
    for t in 0..cfg.iterations {
        let (wt, we) = stage2_weights(t, cfg.iterations)?;
        let we = we * cfg.lambda_e_end;
        let batch: Vec<&Sample> = draw_indices(cfg.seed, PURPOSE_REAL, t, real.len(), cfg.batch).iter().map(|&i| &real[i]).collect();
        let weak = make_views(&batch, View::Weak, &cfg.aug, dims, cfg.seed, PURPOSE_REAL, t);
        let strong = make_views(&batch, View::Strong, &cfg.aug, dims, cfg.seed, PURPOSE_REAL, t);

        let mut tape = Tape::new();
        let bt = frozen.bind(&mut tape, false);
        let (wl, wr) = batch_inputs(&mut tape, &weak, dims, |v| (&v.0, &v.1));
        let (h_t, y_t) = frozen.forward_pair(&mut tape, &bt, wl, wr)?;
        let bs = student.bind(&mut tape, true);
        let (sl, sr) = batch_inputs(&mut tape, &strong, dims, |v| (&v.0, &v.1));
        let (h_s, y_s) = student.forward_pair(&mut tape, &bs, sl, sr)?;

        let mut terms = Stage2Terms {
            pseudo_t: Some(pseudo_loss(&mut tape, y_t, y_s, &cfg.gaze)?),
            ..Default::default()
        };
        let fw = cfg.feature_weight as f32;
        match variant {
            Stage2Variant::Full => {
                let z_t = frozen.project(&mut tape, &bt, h_t, TEACHER_TAG)?;
                let z_st = student.project(&mut tape, &bs, h_s, TO_TEACHER)?;
                let kd = vic_kd(&mut tape, z_t, z_st, &cfg.vic)?;
                terms.kd = Some(tape.mul_scalar(kd, fw));

                let be = ema.bind(&mut tape, false);
                let (el, er) = batch_inputs(&mut tape, &weak, dims, |v| (&v.0, &v.1));
                let (h_e, y_e) = ema.forward_pair(&mut tape, &be, el, er)?;
                let z_e = ema.project(&mut tape, &be, h_e, TO_EMA)?;
                let z_se = student.project(&mut tape, &bs, h_s, TO_EMA)?;
                terms.sd = Some(sd_mse(&mut tape, z_e, z_se)?);
                terms.pseudo_e = Some(pseudo_loss(&mut tape, y_e, y_s, &cfg.gaze)?);
            }
            Stage2Variant::Sp => {
                let kd = sp_kd(&mut tape, h_t, h_s)?;
                terms.kd = Some(tape.mul_scalar(kd, fw));
            }
            Stage2Variant::PseudoOnly => {}
        }
        let ema_terms = terms.sd.is_some() || terms.pseudo_e.is_some();
        let loss = if ema_terms {
            stage2_total(&mut tape, terms, (wt, we))?
        } else {
            stage2_total(&mut tape, Stage2Terms { sd: None, pseudo_e: None, ..terms }, (wt, 0.0))?
        };
        let lr = opt.current_lr();
        let mut grads = tape.backward(loss)?;
        apply_step(&mut student, &mut opt, &bs, &mut grads)?;
        if cfg.ema.due(t + 1) {
            ema_update(&mut ema, &student, &cfg.ema)?;
        }
        let val = |v: Option<crate::tensorcore::Var>| v.map_or(0.0, |v| scalar(&tape, v));
        report.push(vec![
            scalar(&tape, loss),
            val(terms.kd),
            val(terms.pseudo_t),
            val(terms.sd),
            val(terms.pseudo_e),
            lr,
            wt,
            if ema_terms { we } else { 0.0 },
        ]);
    }
    student.remove_projector(TO_TEACHER)?;
    student.remove_projector(TO_EMA)?;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(Trained { bundle: student, report })
}
