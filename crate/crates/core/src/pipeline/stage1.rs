use std::time::Instant;

use super::*;
use crate::losses::{dino_sd, gaze_loss, pseudo_loss, sd_mse, stage1_total, stage1_weights, DinoState, Stage1Terms};
use crate::nets::{batch_inputs, ema_update, Role, PROJ_DIM};
use crate::tensorcore::ParamSet;

const SD_TAG: &str = "sd";

fn split_sizes(cfg: &RunConfig) -> (usize, usize) {
    let b = cfg.batch;
    let n_syn = if cfg.flags.synsup_only {
        b
    } else if cfg.flags.sd_pl_only {
        0
    } else {
        ((b as f64 * cfg.syn_fraction).round() as usize).min(b)
    };
    (n_syn, b - n_syn)
}

fn weights(cfg: &RunConfig, t: u64) -> Result<(f64, f64)> {
    let f = &cfg.flags;
    let (ws, wd) = if f.synsup_only {
        (1.0, 0.0)
    } else if f.sd_pl_only {
        (0.0, 1.0)
    } else {
        stage1_weights(t, cfg.iterations, !f.scheduler_off)?
    };
    Ok((ws, wd))
}

/// Self-distillation of a foundation bundle with synthetic supervision.
///
/// The student starts from `foundation` with a fresh projector; the teacher
/// is a full copy refreshed by EMA every `cfg.ema.interval` steps. Each
/// batch mixes synthetic and unlabeled real samples; the teacher sees weak
/// views of the real half, the student strong views of everything. The
/// returned bundle is the teacher, without its projector.
pub fn stage1_optimize(foundation: &ModelBundle, syn: &[Sample], real: &[Sample], cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    let start = Instant::now();
    let (n_syn, n_real) = split_sizes(cfg);
    if n_syn > 0 {
        nonempty("syn", syn)?;
    }
    if n_real > 0 {
        nonempty("real_train", real)?;
    }
    let dims = foundation.dims;
    let mut init_rng = RngStream::new(cfg.seed, stream_id(&[PURPOSE_INIT, 1]));
    let mut student = foundation.with_role(Role::Student);
    student.add_projector(SD_TAG, &mut init_rng);
    let mut teacher = student.with_role(Role::Teacher);
    let mut opt = cfg.optimizer(&student);

    let dino = cfg.flags.dino_loss_teacher;
    let mut protos = ParamSet::new();
    if dino {
        let scale = (1.0 / PROJ_DIM as f64).sqrt() as f32;
        protos.push("dino/prototypes", init_rng.normal_tensor(&[PROJ_DIM, cfg.dino.prototypes]).map(|v| v * scale));
    }
    let mut proto_opt = cfg.optimizer_for(&protos);
    let mut dino_state = DinoState::new(cfg.dino);

    let mut report = RunReport::new("stage1", cfg.seed, &["loss", "synsup", "sd", "pseudo", "lr", "lambda_synsup", "lambda_sd"]);
    for t in 0..cfg.iterations {
        let (ws, wd) = weights(cfg, t)?;
        let syn_batch: Vec<&Sample> = if n_syn > 0 {
            draw_indices(cfg.seed, PURPOSE_SYN, t, syn.len(), n_syn).iter().map(|&i| &syn[i]).collect()
        } else {
            Vec::new()
        };
        let real_batch: Vec<&Sample> = if n_real > 0 {
            draw_indices(cfg.seed, PURPOSE_REAL, t, real.len(), n_real).iter().map(|&i| &real[i]).collect()
        } else {
            Vec::new()
        };
        let mut views = make_views(&syn_batch, View::Strong, &cfg.aug, dims, cfg.seed, PURPOSE_SYN, t);
        views.extend(make_views(&real_batch, View::Strong, &cfg.aug, dims, cfg.seed, PURPOSE_REAL, t));

        let mut tape = Tape::new();
        let bs = student.bind(&mut tape, true);
        let (xl, xr) = batch_inputs(&mut tape, &views, dims, |v| (&v.0, &v.1));
        let (h_s, y_s) = student.forward_pair(&mut tape, &bs, xl, xr)?;

        let mut terms = Stage1Terms::default();
        if n_syn > 0 {
            let y_syn = if n_real == 0 { y_s } else { tape.narrow(y_s, 0, 0, n_syn)? };
            let y = tape.constant(label_tensor(&syn_batch)?);
            terms.synsup = Some(gaze_loss(&mut tape, y, y_syn, &cfg.gaze)?);
        }
        let mut proto_vars = Vec::new();
        if n_real > 0 {
            let weak = make_views(&real_batch, View::Weak, &cfg.aug, dims, cfg.seed, PURPOSE_REAL, t);
            let bt = teacher.bind(&mut tape, false);
            let (wl, wr) = batch_inputs(&mut tape, &weak, dims, |v| (&v.0, &v.1));
            let (h_t, y_t) = teacher.forward_pair(&mut tape, &bt, wl, wr)?;
            let (h_r, y_r) = if n_syn == 0 {
                (h_s, y_s)
            } else {
                (tape.narrow(h_s, 0, n_syn, n_real)?, tape.narrow(y_s, 0, n_syn, n_real)?)
            };
            let z_s = student.project(&mut tape, &bs, h_r, SD_TAG)?;
            let z_t = teacher.project(&mut tape, &bt, h_t, SD_TAG)?;
            let sd = if dino {
                proto_vars = protos.bind(&mut tape, true);
                dino_sd(&mut tape, z_t, z_s, proto_vars[0], &mut dino_state)?
            } else {
                sd_mse(&mut tape, z_t, z_s)?
            };
            terms.sd = Some(tape.mul_scalar(sd, cfg.sd_scale as f32));
            terms.pseudo = Some(pseudo_loss(&mut tape, y_t, y_r, &cfg.gaze)?);
        }
        let loss = stage1_total(&mut tape, terms, (ws, wd))?;
        let lr = opt.current_lr();
        let mut grads = tape.backward(loss)?;
        apply_step(&mut student, &mut opt, &bs, &mut grads)?;
        if dino && !proto_vars.is_empty() {
            let g: Vec<Tensor<f32>> = proto_vars.iter().map(|&v| grads.take(v)).collect();
            proto_opt.step(&mut protos, &g)?;
        }
        if cfg.ema.due(t + 1) {
            ema_update(&mut teacher, &student, &cfg.ema)?;
        }
        let val = |v: Option<crate::tensorcore::Var>| v.map_or(0.0, |v| scalar(&tape, v));
        report.push(vec![scalar(&tape, loss), val(terms.synsup), val(terms.sd), val(terms.pseudo), lr, ws, wd]);
    }
    teacher.remove_projector(SD_TAG)?;
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(Trained { bundle: teacher, report })
}
