//! Gaze regression loss, distillation objectives and the cosine weight
//! schedules that blend them.
//!
//! Everything is generic over [`Real`] so the same graph can be checked in
//! an `f64` shadow tape. Teacher-side inputs are always detached inside the
//! loss, whatever the caller passes.

use thiserror::Error;

use crate::tensorcore::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("{op} needs a batch of at least 2, got {batch}")]
    Batch { op: &'static str, batch: usize },
    #[error("step {t} outside schedule [0, {total}]")]
    Step { t: u64, total: u64 },
    #[error("non-finite logits in {0}")]
    NonFinite(&'static str),
}

type Result<T> = std::result::Result<T, LossError>;

/// Piecewise robust regression loss parameters, in normalized units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeLossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub k: f64,
}

impl Default for GazeLossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0 / 45.0,
            gamma: 5.0 / 45.0,
            k: 0.5,
        }
    }
}

impl GazeLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= self.gamma && self.gamma.is_finite()) {
            return Err(LossError::Config(format!("need 0 < beta <= gamma, got beta={} gamma={}", self.beta, self.gamma)));
        }
        if !(self.k > 0.0 && self.k < 1.0) {
            return Err(LossError::Config(format!("need 0 < k < 1, got {}", self.k)));
        }
        Ok(())
    }

    /// Per-component value, for reference and reporting.
    pub fn value(&self, e: f64) -> f64 {
        let a = e.abs();
        if a < self.beta {
            0.5 * e * e / self.beta
        } else if a < self.gamma {
            a - 0.5 * self.beta
        } else {
            self.k * (a - 0.5 * self.beta)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VicConfig {
    pub lambda_inv: f64,
    pub lambda_var: f64,
    pub lambda_cov: f64,
    /// Hinge threshold on the per-dimension standard deviation.
    pub gamma_v: f64,
    /// Added to the variance before the square root.
    pub eps: f64,
}

impl Default for VicConfig {
    fn default() -> Self {
        Self {
            lambda_inv: 25.0,
            lambda_var: 25.0,
            lambda_cov: 1.0,
            gamma_v: 1.0,
            eps: 1e-4,
        }
    }
}

impl VicConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_inv, self.lambda_var, self.lambda_cov, self.gamma_v, self.eps].iter().any(|&v| !(v >= 0.0)) {
            return Err(LossError::Config("VIC weights, threshold and eps must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(LossError::Tensor(TensorError::Shape {
            op,
            detail: format!("{a:?} vs {b:?}"),
        }));
    }
    Ok(())
}

/// Mean over components of the piecewise loss between target `y` and
/// prediction `y_hat`. Only `y_hat` receives gradient through the active
/// branch; `y` is used as given.
pub fn gaze_loss<T: Real>(tape: &mut Tape<T>, y: Var, y_hat: Var, cfg: &GazeLossConfig) -> Result<Var> {
    cfg.validate()?;
    check_same("gaze_loss", tape.shape(y), tape.shape(y_hat))?;
    let shape = tape.shape(y).to_vec();
    let e = tape.sub(y_hat, y)?;
    // Branch masks are piecewise constant, so they enter as constants.
    let (beta, gamma, k) = (T::from_f64(cfg.beta), T::from_f64(cfg.gamma), T::from_f64(cfg.k));
    let half_inv_beta = T::from_f64(0.5 / cfg.beta);
    let ev = tape.value(e).data();
    let mut quad = Vec::with_capacity(ev.len());
    let mut lin = Vec::with_capacity(ev.len());
    for &v in ev {
        let a = v.abs();
        if a < beta {
            quad.push(half_inv_beta);
            lin.push(T::zero());
        } else if a < gamma {
            quad.push(T::zero());
            lin.push(T::one());
        } else {
            quad.push(T::zero());
            lin.push(k);
        }
    }
    let quad = tape.constant(Tensor::new(&shape, quad)?);
    let lin = tape.constant(Tensor::new(&shape, lin)?);
    let sq = tape.square(e)?;
    let t1 = tape.mul(sq, quad)?;
    let a = tape.abs(e);
    let a = tape.add_scalar(a, T::from_f64(-0.5 * cfg.beta));
    let t2 = tape.mul(a, lin)?;
    let per = tape.add(t1, t2)?;
    Ok(tape.mean_all(per)?)
}

/// Gaze loss against detached teacher predictions.
pub fn pseudo_loss<T: Real>(tape: &mut Tape<T>, y_teacher: Var, y_student: Var, cfg: &GazeLossConfig) -> Result<Var> {
    let yt = tape.detach(y_teacher);
    gaze_loss(tape, yt, y_student, cfg)
}

fn batch_rows<T: Real>(tape: &Tape<T>, op: &'static str, z: Var) -> Result<(usize, usize)> {
    let s = tape.shape(z);
    if s.len() != 2 {
        return Err(LossError::Tensor(TensorError::Shape {
            op,
            detail: format!("expected [batch, dim], got {s:?}"),
        }));
    }
    Ok((s[0], s[1]))
}

/// Squared distance summed over the last axis, averaged over the batch.
fn mean_sq_dist<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (n, _) = batch_rows(tape, "sq_dist", a)?;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    let s = tape.sum_all(sq)?;
    Ok(tape.mul_scalar(s, T::from_f64(1.0 / n as f64)))
}

/// `‖z_t − z_s‖²` averaged over the batch, teacher side detached.
pub fn sd_mse<T: Real>(tape: &mut Tape<T>, z_t: Var, z_s: Var) -> Result<Var> {
    check_same("sd_mse", tape.shape(z_t), tape.shape(z_s))?;
    let zt = tape.detach(z_t);
    mean_sq_dist(tape, zt, z_s)
}

/// Terms of the variance-invariance-covariance objective.
#[derive(Clone, Copy, Debug)]
pub struct VicTerms {
    pub invariance: Var,
    pub variance: Var,
    pub covariance: Var,
    pub total: Var,
}

/// Invariance to the detached teacher plus variance hinge and covariance
/// penalty on the student batch. Covariance uses the population (1/n) form.
pub fn vic_kd_terms<T: Real>(tape: &mut Tape<T>, z_t: Var, z_s: Var, cfg: &VicConfig) -> Result<VicTerms> {
    cfg.validate()?;
    check_same("vic_kd", tape.shape(z_t), tape.shape(z_s))?;
    let (n, d) = batch_rows(tape, "vic_kd", z_s)?;
    if n < 2 {
        return Err(LossError::Batch { op: "vic_kd", batch: n });
    }
    let zt = tape.detach(z_t);
    let invariance = mean_sq_dist(tape, zt, z_s)?;

    let var = tape.variance(z_s, &[0], false)?;
    let var = tape.add_scalar(var, T::from_f64(cfg.eps));
    let std = tape.sqrt(var);
    let neg = tape.neg(std);
    let gap = tape.add_scalar(neg, T::from_f64(cfg.gamma_v));
    let hinge = tape.max_scalar(gap, T::zero());
    let variance = tape.mean_all(hinge)?;

    let mean = tape.mean(z_s, &[0], true)?;
    let zc = tape.sub(z_s, mean)?;
    let zct = tape.transpose(zc)?;
    let cov = tape.matmul(zct, zc)?;
    let cov = tape.mul_scalar(cov, T::from_f64(1.0 / n as f64));
    let off = tape.constant(Tensor::from_fn(&[d, d], |i| if i / d == i % d { T::zero() } else { T::one() }));
    let cov2 = tape.square(cov)?;
    let cov2 = tape.mul(cov2, off)?;
    let covs = tape.sum_all(cov2)?;
    let covariance = tape.mul_scalar(covs, T::from_f64(1.0 / d as f64));

    let a = tape.mul_scalar(invariance, T::from_f64(cfg.lambda_inv));
    let b = tape.mul_scalar(variance, T::from_f64(cfg.lambda_var));
    let c = tape.mul_scalar(covariance, T::from_f64(cfg.lambda_cov));
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(VicTerms {
        invariance,
        variance,
        covariance,
        total,
    })
}

pub fn vic_kd<T: Real>(tape: &mut Tape<T>, z_t: Var, z_s: Var, cfg: &VicConfig) -> Result<Var> {
    Ok(vic_kd_terms(tape, z_t, z_s, cfg)?.total)
}

const SP_EPS: f64 = 1e-12;

fn normalized_gram<T: Real>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let ht = tape.transpose(h)?;
    let g = tape.matmul(h, ht)?;
    let g2 = tape.square(g)?;
    let rn = tape.sum(g2, &[1], true)?;
    let rn = tape.add_scalar(rn, T::from_f64(SP_EPS));
    let rn = tape.sqrt(rn);
    Ok(tape.div(g, rn)?)
}

/// Similarity-preserving distillation: squared Frobenius distance between
/// row-normalized batch Gram matrices, divided by `B²`.
pub fn sp_kd<T: Real>(tape: &mut Tape<T>, h_t: Var, h_s: Var) -> Result<Var> {
    let (bt, _) = batch_rows(tape, "sp_kd", h_t)?;
    let (bs, _) = batch_rows(tape, "sp_kd", h_s)?;
    if bt != bs {
        return Err(LossError::Tensor(TensorError::Shape {
            op: "sp_kd",
            detail: format!("batch {bt} vs {bs}"),
        }));
    }
    if bs < 2 {
        return Err(LossError::Batch { op: "sp_kd", batch: bs });
    }
    let ht = tape.detach(h_t);
    let gt = normalized_gram(tape, ht)?;
    let gs = normalized_gram(tape, h_s)?;
    let d = tape.sub(gt, gs)?;
    let d2 = tape.square(d)?;
    let s = tape.sum_all(d2)?;
    Ok(tape.mul_scalar(s, T::from_f64(1.0 / (bs * bs) as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DinoHeadConfig {
    pub prototypes: usize,
    pub teacher_temp: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
}

impl Default for DinoHeadConfig {
    fn default() -> Self {
        Self {
            prototypes: 256,
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_momentum: 0.9,
        }
    }
}

impl DinoHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.teacher_temp > 0.0 && self.student_temp > 0.0) || self.prototypes < 2 {
            return Err(LossError::Config("temperatures must be positive and prototypes >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(LossError::Config("center momentum outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Running center of teacher prototype logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DinoState {
    pub cfg: DinoHeadConfig,
    pub center: Vec<f64>,
}

impl DinoState {
    pub fn new(cfg: DinoHeadConfig) -> Self {
        Self {
            center: vec![0.0; cfg.prototypes],
            cfg,
        }
    }

    /// `c ← m·c + (1−m)·batch_mean`.
    pub fn update_center(&mut self, batch_mean: &[f64]) {
        let m = self.cfg.center_momentum;
        for (c, &b) in self.center.iter_mut().zip(batch_mean) {
            *c = m * *c + (1.0 - m) * b;
        }
    }
}

/// Cross-entropy between the sharpened, centered teacher distribution over
/// prototypes and the student distribution. `prototypes` is `[dim, K]` and
/// is applied to both views; the teacher branch is detached. The center is
/// updated after the loss is formed.
pub fn dino_sd<T: Real>(tape: &mut Tape<T>, z_t: Var, z_s: Var, prototypes: Var, state: &mut DinoState) -> Result<Var> {
    state.cfg.validate()?;
    check_same("dino_sd", tape.shape(z_t), tape.shape(z_s))?;
    let (n, _) = batch_rows(tape, "dino_sd", z_s)?;
    let k = state.cfg.prototypes;
    if tape.shape(prototypes).last() != Some(&k) {
        return Err(LossError::Config(format!("prototype matrix {:?} must have {k} columns", tape.shape(prototypes))));
    }
    let zt = tape.detach(z_t);
    let pt = tape.detach(prototypes);
    let lt = tape.matmul(zt, pt)?;
    let ls = tape.matmul(z_s, prototypes)?;
    if !tape.value(lt).is_finite() || !tape.value(ls).is_finite() {
        return Err(LossError::NonFinite("dino_sd"));
    }
    let center = tape.constant(Tensor::new(&[1, k], state.center.iter().map(|&c| T::from_f64(c)).collect())?);
    let ltc = tape.sub(lt, center)?;
    let ltc = tape.mul_scalar(ltc, T::from_f64(1.0 / state.cfg.teacher_temp));
    let target = tape.softmax(ltc)?;
    let target = tape.detach(target);
    let ls = tape.mul_scalar(ls, T::from_f64(1.0 / state.cfg.student_temp));
    let logp = tape.log_softmax(ls)?;
    let prod = tape.mul(target, logp)?;
    let s = tape.sum_all(prod)?;
    let loss = tape.mul_scalar(s, T::from_f64(-1.0 / n as f64));

    let lv = tape.value(lt);
    let mut mean = vec![0.0; k];
    for row in lv.data().chunks(k) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v.to_f64() / n as f64;
        }
    }
    state.update_center(&mean);
    Ok(loss)
}

/// Cosine interpolation from `start` at `t = 0` to `end` at `t = total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeightSchedule {
    pub start: f64,
    pub end: f64,
    pub total: u64,
}

impl LossWeightSchedule {
    pub fn weight(&self, t: u64) -> Result<f64> {
        cosine_weight(self.start, self.end, self.total, t)
    }
}

/// `end + (start − end)·½(1 + cos(π t / T))`.
pub fn cosine_weight(start: f64, end: f64, total: u64, t: u64) -> Result<f64> {
    if t > total {
        return Err(LossError::Step { t, total });
    }
    if total == 0 {
        return Ok(start);
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(end + (start - end) * 0.5 * (1.0 + c))
}

/// `(λ_SynSup, λ_SD)` at step `t`. With the scheduler off both are ½.
pub fn stage1_weights(t: u64, total: u64, scheduler: bool) -> Result<(f64, f64)> {
    if !scheduler {
        if t > total {
            return Err(LossError::Step { t, total });
        }
        return Ok((0.5, 0.5));
    }
    Ok((cosine_weight(1.0, 0.0, total, t)?, cosine_weight(0.0, 1.0, total, t)?))
}

/// `(λ_t, λ_e)` at step `t`: teacher weight fixed, EMA weight ramps 0 → 1.
pub fn stage2_weights(t: u64, total: u64) -> Result<(f64, f64)> {
    Ok((1.0, cosine_weight(0.0, 1.0, total, t)?))
}

fn weighted_sum<T: Real>(tape: &mut Tape<T>, terms: &[(f64, Option<Var>)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        if let Some(v) = v {
            let s = tape.mul_scalar(v, T::from_f64(w));
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// Stage-1 components; absent terms come from empty sub-batches.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stage1Terms {
    pub synsup: Option<Var>,
    pub sd: Option<Var>,
    pub pseudo: Option<Var>,
}

/// `λ_SynSup·L_SynSup + λ_SD·(L_SD + L_Pseudo)`.
pub fn stage1_total<T: Real>(tape: &mut Tape<T>, terms: Stage1Terms, weights: (f64, f64)) -> Result<Var> {
    let (ws, wd) = weights;
    if let (None, None) = (terms.sd, terms.pseudo) {
        return weighted_sum(tape, &[(ws, terms.synsup)]);
    }
    let inner = weighted_sum(tape, &[(1.0, terms.sd), (1.0, terms.pseudo)])?;
    weighted_sum(tape, &[(ws, terms.synsup), (wd, Some(inner))])
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Stage2Terms {
    pub kd: Option<Var>,
    pub pseudo_t: Option<Var>,
    pub sd: Option<Var>,
    pub pseudo_e: Option<Var>,
}

/// `λ_t·(L_KD + L_Pseudo-t) + λ_e·(L_SD + L_Pseudo-e)`.
pub fn stage2_total<T: Real>(tape: &mut Tape<T>, terms: Stage2Terms, weights: (f64, f64)) -> Result<Var> {
    let (wt, we) = weights;
    let teacher = weighted_sum(tape, &[(1.0, terms.kd), (1.0, terms.pseudo_t)])?;
    let ema = weighted_sum(tape, &[(1.0, terms.sd), (1.0, terms.pseudo_e)])?;
    weighted_sum(tape, &[(wt, Some(teacher)), (we, Some(ema))])
}
