use std::time::Instant;

use super::*;
use crate::losses::gaze_loss;
use crate::nets::{batch_inputs, Role};

/// Full-model regression on labeled samples seen through strong views.
pub(crate) fn supervised_run(init: &ModelBundle, pool: &[Sample], purpose: u64, stage: &str, cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    let start = Instant::now();
    let mut bundle = init.with_role(Role::Student);
    let mut opt = cfg.optimizer(&bundle);
    let dims = bundle.dims;
    let mut report = RunReport::new(stage, cfg.seed, &["loss", "synsup", "lr"]);
    for t in 0..cfg.iterations {
        let idx = draw_indices(cfg.seed, purpose, t, pool.len(), cfg.batch);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &pool[i]).collect();
        let views = make_views(&batch, View::Strong, &cfg.aug, dims, cfg.seed, purpose, t);
        let mut tape = Tape::new();
        let b = bundle.bind(&mut tape, true);
        let (xl, xr) = batch_inputs(&mut tape, &views, dims, |v| (&v.0, &v.1));
        let (_, y_hat) = bundle.forward_pair(&mut tape, &b, xl, xr)?;
        let y = tape.constant(label_tensor(&batch)?);
        let loss = gaze_loss(&mut tape, y, y_hat, &cfg.gaze)?;
        let lr = opt.current_lr();
        let mut grads = tape.backward(loss)?;
        apply_step(&mut bundle, &mut opt, &b, &mut grads)?;
        let l = scalar(&tape, loss);
        report.push(vec![l, l, lr]);
    }
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(Trained { bundle, report })
}

/// Supervised training on the synthetic pool only.
pub fn synthetic_finetune(init: &ModelBundle, syn: &[Sample], cfg: &RunConfig) -> Result<Trained> {
    let syn = nonempty("syn", syn)?;
    supervised_run(init, syn, PURPOSE_SYN, "synft", cfg)
}

/// Upper bound: supervised training on labeled real recordings that no
/// other trainer may read.
pub fn fully_supervised(init: &ModelBundle, upper: &[Sample], cfg: &RunConfig) -> Result<Trained> {
    let upper = nonempty("real_upper", upper)?;
    supervised_run(init, upper, PURPOSE_UPPER, "fully_supervised", cfg)
}
