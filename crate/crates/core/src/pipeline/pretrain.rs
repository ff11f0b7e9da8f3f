use std::collections::BTreeMap;
use std::time::Instant;

use super::*;
use crate::nets::{batch_inputs, Role};
use crate::tensorcore::{ParamSet, Var};

/// Frames with `frame_id % PRETRAIN_HOLDOUT_EVERY == PRETRAIN_HOLDOUT_EVERY - 1`
/// are held out of identity training and used to measure accuracy.
pub const PRETRAIN_HOLDOUT_EVERY: u32 = 8;

fn held_out(s: &Sample) -> bool {
    s.frame_id % PRETRAIN_HOLDOUT_EVERY == PRETRAIN_HOLDOUT_EVERY - 1
}

struct Classifier {
    params: ParamSet,
}

impl Classifier {
    fn new(embed: usize, classes: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamSet::new();
        let bound = (6.0 / embed as f64).sqrt() as f32;
        params.push("cls/w", rng.uniform_tensor(&[embed, classes]).map(|u| (2.0 * u - 1.0) * bound));
        params.push("cls/b", Tensor::zeros(&[classes]));
        Self { params }
    }

    fn logits(&self, tape: &mut Tape<f32>, vars: &[Var], h: Var) -> Result<Var> {
        let z = tape.matmul(h, vars[0])?;
        Ok(tape.add(z, vars[1])?)
    }
}

/// Single-eye images of the drawn samples: all left eyes, then all right.
fn eye_stack(tape: &mut Tape<f32>, views: &[(Vec<f32>, Vec<f32>)], dims: ImageDims) -> Result<Var> {
    let (l, r) = batch_inputs(tape, views, dims, |v| (&v.0, &v.1));
    Ok(tape.concat(&[l, r], 0)?)
}

/// Train a backbone to tell subjects apart from single-eye renders. The
/// temporary classifier is dropped; the returned bundle keeps its randomly
/// initialized gaze head. Held-out accuracy lands in the report summary
/// under `holdout_accuracy`.
pub fn pretrain_identity(pool: &[Sample], tier: Tier, dims: ImageDims, cfg: &RunConfig) -> Result<Trained> {
    cfg.validate()?;
    let pool = nonempty("pretrain", pool)?;
    let start = Instant::now();
    let classes: BTreeMap<u32, usize> = pool
        .iter()
        .map(|s| s.subject_id)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    let train: Vec<&Sample> = pool.iter().filter(|s| !held_out(s)).collect();
    let test: Vec<&Sample> = pool.iter().filter(|s| held_out(s)).collect();
    if train.is_empty() {
        return Err(PipelineError::MissingSplit("pretrain training frames"));
    }

    let mut rng = RngStream::new(cfg.seed, stream_id(&[PURPOSE_INIT, 0]));
    let mut bundle = ModelBundle::new(tier, dims, Role::Teacher, &mut rng);
    let mut cls = Classifier::new(bundle.spec.embed_dim, classes.len(), &mut rng);
    let mut opt = cfg.optimizer(&bundle);
    let mut cls_opt = cfg.optimizer_for(&cls.params);
    let mut report = RunReport::new("pretrain", cfg.seed, &["loss", "lr"]);

    for t in 0..cfg.iterations {
        let batch: Vec<&Sample> = draw_indices(cfg.seed, PURPOSE_PRETRAIN, t, train.len(), cfg.batch).iter().map(|&i| train[i]).collect();
        let views = make_views(&batch, View::Weak, &cfg.aug, dims, cfg.seed, PURPOSE_PRETRAIN, t);
        let n = 2 * batch.len();
        let k = classes.len();
        let mut onehot = vec![0.0f32; n * k];
        for (i, s) in batch.iter().chain(batch.iter()).enumerate() {
            onehot[i * k + classes[&s.subject_id]] = 1.0;
        }

        let mut tape = Tape::new();
        let b = bundle.bind(&mut tape, true);
        let cv = cls.params.bind(&mut tape, true);
        let x = eye_stack(&mut tape, &views, dims)?;
        let h = bundle.embed(&mut tape, &b, x)?;
        let logits = cls.logits(&mut tape, &cv, h)?;
        let logp = tape.log_softmax(logits)?;
        let oh = tape.constant(Tensor::new(&[n, k], onehot)?);
        let picked = tape.mul(logp, oh)?;
        let s = tape.sum_all(picked)?;
        let loss = tape.mul_scalar(s, -1.0 / n as f32);
        let lr = opt.current_lr();
        let mut grads = tape.backward(loss)?;
        apply_step(&mut bundle, &mut opt, &b, &mut grads)?;
        let g: Vec<Tensor<f32>> = cv.iter().map(|&v| grads.take(v)).collect();
        cls_opt.step(&mut cls.params, &g)?;
        report.push(vec![scalar(&tape, loss), lr]);
    }

    if !test.is_empty() {
        let acc = identity_accuracy(&bundle, &cls, &classes, &test)?;
        report.summary.push(("holdout_accuracy".into(), acc));
    }
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(Trained { bundle, report })
}

/// Fraction of held-out single-eye images assigned to the right subject.
fn identity_accuracy(bundle: &ModelBundle, cls: &Classifier, classes: &BTreeMap<u32, usize>, test: &[&Sample]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in test.chunks(128) {
        let views: Vec<(Vec<f32>, Vec<f32>)> = chunk.iter().map(|s| (s.image_left.clone(), s.image_right.clone())).collect();
        let mut tape = Tape::new();
        let b = bundle.bind(&mut tape, false);
        let cv = cls.params.bind(&mut tape, false);
        let x = eye_stack(&mut tape, &views, bundle.dims)?;
        let h = bundle.embed(&mut tape, &b, x)?;
        let logits = cls.logits(&mut tape, &cv, h)?;
        let k = classes.len();
        for (i, row) in tape.value(logits).data().chunks(k).enumerate() {
            let arg = row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            let s = chunk[i % chunk.len()];
            correct += (arg == classes[&s.subject_id]) as usize;
        }
    }
    Ok(correct as f64 / (2 * test.len()) as f64)
}

/// Mean pairwise Euclidean distance between binocular embeddings of the
/// same subject and of different subjects, over the first `subjects`
/// subjects (by id) and their first `frames` frames.
pub fn embedding_distances(bundle: &ModelBundle, samples: &[Sample], subjects: usize, frames: usize) -> Result<(f64, f64)> {
    let mut by_subject: BTreeMap<u32, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_subject.entry(s.subject_id).or_default().push(s);
    }
    let mut chosen: Vec<(u32, &Sample)> = Vec::new();
    for (id, mut v) in by_subject.into_iter().take(subjects) {
        v.sort_by_key(|s| (s.recording_id, s.frame_id));
        chosen.extend(v.into_iter().take(frames).map(|s| (id, s)));
    }
    if chosen.len() < 2 {
        return Err(PipelineError::MissingSplit("embedding samples"));
    }
    let refs: Vec<&Sample> = chosen.iter().map(|&(_, s)| s).collect();
    let emb = bundle.embed_pairs(&refs)?;
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let d = emb[i].iter().zip(&emb[j]).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            if chosen[i].0 == chosen[j].0 {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    Ok((intra / ni.max(1) as f64, inter / nx.max(1) as f64))
}
