//! Backbones at three size tiers, projectors, gaze heads and EMA mirroring.
//!
//! A bundle owns one flat [`ParamSet`]; layers refer to parameters by index.
//! Both eyes run through the same backbone parameters, so weight sharing is
//! structural.

use std::path::Path;

use thiserror::Error;

use crate::eyegen::{ImageDims, Sample};
use crate::tensorcore::checkpoint::{self, CheckpointError, Record};
use crate::tensorcore::{ParamSet, Real, RngStream, Tape, Tensor, TensorError, Var};

/// Projected embedding width.
pub const PROJ_DIM: usize = 128;
/// Network output units per degree: ±45° maps to ±1.
pub const ANGLE_SCALE_DEG: f64 = 45.0;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("unknown projector `{0}`")]
    UnknownProjector(String),
    #[error("input dims {found:?} do not match bundle dims {expected:?}")]
    Dims { found: Vec<usize>, expected: Vec<usize> },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("invalid EMA config: {0}")]
    Ema(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tier {
    TeacherL,
    TeacherS,
    Student,
}

impl Tier {
    pub fn code(self) -> u32 {
        match self {
            Tier::TeacherL => 0,
            Tier::TeacherS => 1,
            Tier::Student => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        [Tier::TeacherL, Tier::TeacherS, Tier::Student].into_iter().find(|t| t.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::TeacherL => "teacher_l",
            Tier::TeacherS => "teacher_s",
            Tier::Student => "student",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Tier::TeacherL, Tier::TeacherS, Tier::Student].into_iter().find(|t| t.name() == s)
    }

    pub fn is_teacher(self) -> bool {
        self != Tier::Student
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Teacher,
    Student,
    EmaStudent,
}

impl Role {
    pub fn code(self) -> u32 {
        match self {
            Role::Teacher => 0,
            Role::Student => 1,
            Role::EmaStudent => 2,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        [Role::Teacher, Role::Student, Role::EmaStudent].into_iter().find(|r| r.code() == c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

const fn stage(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> ConvStage {
    ConvStage {
        out_channels,
        kernel,
        stride,
        padding,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub tier: Tier,
    pub stages: Vec<ConvStage>,
    pub embed_dim: usize,
    pub head_hidden: usize,
    /// Target inference parameter count (backbone plus head).
    pub budget: usize,
}

impl BackboneSpec {
    pub fn for_tier(tier: Tier) -> Self {
        match tier {
            Tier::TeacherL => Self {
                tier,
                stages: vec![stage(32, 4, 4, 0), stage(32, 3, 1, 1)],
                embed_dim: 192,
                head_hidden: 64,
                budget: 1_200_000,
            },
            Tier::TeacherS => Self {
                tier,
                stages: vec![stage(20, 4, 4, 0), stage(20, 3, 1, 1)],
                embed_dim: 128,
                head_hidden: 64,
                budget: 500_000,
            },
            Tier::Student => Self {
                tier,
                stages: vec![stage(8, 4, 4, 0), stage(20, 3, 2, 1)],
                embed_dim: 64,
                head_hidden: 96,
                budget: 80_000,
            },
        }
    }

    /// Spatial size after every conv stage, or `None` if a stage does not fit.
    pub fn feature_shape(&self, dims: ImageDims) -> Option<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = (1, dims.height, dims.width);
        for s in &self.stages {
            let (ph, pw) = (h + 2 * s.padding, w + 2 * s.padding);
            if ph < s.kernel || pw < s.kernel {
                return None;
            }
            h = (ph - s.kernel) / s.stride + 1;
            w = (pw - s.kernel) / s.stride + 1;
            c = s.out_channels;
        }
        Some((c, h, w))
    }

    /// Closed-form parameter count of backbone plus head.
    pub fn inference_params(&self, dims: ImageDims) -> usize {
        let mut n = 0;
        let mut c_in = 1;
        for s in &self.stages {
            n += s.out_channels * c_in * s.kernel * s.kernel + s.out_channels;
            c_in = s.out_channels;
        }
        let (c, h, w) = self.feature_shape(dims).expect("stages fit the image");
        n += c * h * w * self.embed_dim + self.embed_dim;
        n += 2 * self.embed_dim * self.head_hidden + self.head_hidden;
        n += self.head_hidden * 4 + 4;
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    /// Only useful for constructing exact identity maps in tests.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Projector {
    tag: String,
    layers: [Linear; 3],
    activation: Activation,
    hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaConfig {
    pub momentum: f64,
    pub interval: u64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            momentum: 0.99,
            interval: 100,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(NetError::Ema(format!("momentum {} outside (0, 1)", self.momentum)));
        }
        if self.interval == 0 {
            return Err(NetError::Ema("interval must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether the mirror is refreshed after `completed_steps` optimizer steps.
    pub fn due(&self, completed_steps: u64) -> bool {
        completed_steps > 0 && completed_steps % self.interval == 0
    }
}

/// Parameter handles on one tape, index-aligned with the bundle's [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub spec: BackboneSpec,
    pub dims: ImageDims,
    pub role: Role,
    pub params: ParamSet,
    convs: Vec<Linear>,
    embed: Linear,
    head: [Linear; 2],
    projectors: Vec<Projector>,
}

fn kaiming(rng: &mut RngStream, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<f32> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform_in(-bound, bound) as f32)
}

impl ModelBundle {
    /// Fresh bundle with backbone and head only.
    pub fn new(tier: Tier, dims: ImageDims, role: Role, rng: &mut RngStream) -> Self {
        let spec = BackboneSpec::for_tier(tier);
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, s) in spec.stages.iter().enumerate() {
            let fan = c_in * s.kernel * s.kernel;
            let w = params.push(format!("backbone/conv{i}/w"), kaiming(rng, &[s.out_channels, c_in, s.kernel, s.kernel], fan, 1.0));
            let b = params.push(format!("backbone/conv{i}/b"), Tensor::zeros(&[s.out_channels]));
            convs.push(Linear { w, b });
            c_in = s.out_channels;
        }
        let (c, h, w) = spec.feature_shape(dims).expect("image too small for backbone");
        let flat = c * h * w;
        let embed = Linear {
            w: params.push("backbone/embed/w", kaiming(rng, &[flat, spec.embed_dim], flat, 1.0)),
            b: params.push("backbone/embed/b", Tensor::zeros(&[spec.embed_dim])),
        };
        let hin = 2 * spec.embed_dim;
        let head = [
            Linear {
                w: params.push("head/l0/w", kaiming(rng, &[hin, spec.head_hidden], hin, 1.0)),
                b: params.push("head/l0/b", Tensor::zeros(&[spec.head_hidden])),
            },
            Linear {
                w: params.push("head/l1/w", kaiming(rng, &[spec.head_hidden, 4], spec.head_hidden, 0.1)),
                b: params.push("head/l1/b", Tensor::zeros(&[4])),
            },
        ];
        Self {
            spec,
            dims,
            role,
            params,
            convs,
            embed,
            head,
            projectors: Vec::new(),
        }
    }

    pub fn tier(&self) -> Tier {
        self.spec.tier
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    /// Append a randomly initialized three-layer projector from the binocular
    /// embedding to [`PROJ_DIM`].
    pub fn add_projector(&mut self, tag: &str, rng: &mut RngStream) {
        self.add_projector_with(tag, 2 * self.spec.embed_dim, PROJ_DIM, Activation::Gelu, rng);
    }

    pub fn add_projector_with(&mut self, tag: &str, hidden: usize, out: usize, activation: Activation, rng: &mut RngStream) {
        assert!(self.projector(tag).is_none(), "projector {tag} already exists");
        let dims = [2 * self.spec.embed_dim, hidden, hidden, out];
        let mk = |k: usize, params: &mut ParamSet, rng: &mut RngStream| Linear {
            w: params.push(format!("proj/{tag}/l{k}/w"), kaiming(rng, &[dims[k], dims[k + 1]], dims[k], 1.0)),
            b: params.push(format!("proj/{tag}/l{k}/b"), Tensor::zeros(&[dims[k + 1]])),
        };
        let layers = [mk(0, &mut self.params, rng), mk(1, &mut self.params, rng), mk(2, &mut self.params, rng)];
        self.projectors.push(Projector {
            tag: tag.to_string(),
            layers,
            activation,
            hidden,
        });
    }

    fn projector(&self, tag: &str) -> Option<&Projector> {
        self.projectors.iter().find(|p| p.tag == tag)
    }

    pub fn projector_tags(&self) -> Vec<&str> {
        self.projectors.iter().map(|p| p.tag.as_str()).collect()
    }

    /// Drop a projector and its parameters.
    pub fn remove_projector(&mut self, tag: &str) -> Result<(), NetError> {
        if self.projector(tag).is_none() {
            return Err(NetError::UnknownProjector(tag.to_string()));
        }
        let prefix = format!("proj/{tag}/");
        let mut fresh = ParamSet::new();
        let mut remap = vec![usize::MAX; self.params.len()];
        for (i, (name, t)) in self.params.iter().enumerate() {
            if !name.starts_with(&prefix) {
                remap[i] = fresh.push(name, t.clone());
            }
        }
        let fix = |l: &mut Linear| {
            l.w = remap[l.w];
            l.b = remap[l.b];
        };
        self.convs.iter_mut().for_each(fix);
        fix(&mut self.embed);
        self.head.iter_mut().for_each(fix);
        self.projectors.retain(|p| p.tag != tag);
        for p in &mut self.projectors {
            p.layers.iter_mut().for_each(fix);
        }
        self.params = fresh;
        Ok(())
    }

    /// Identity-shaped copy of the architecture under a new role.
    pub fn with_role(&self, role: Role) -> Self {
        Self { role, ..self.clone() }
    }

    pub fn bind(&self, tape: &mut Tape<f32>, trainable: bool) -> Bound {
        Bound {
            vars: self.params.bind(tape, trainable),
        }
    }

    pub fn bind_f64(&self, tape: &mut Tape<f64>) -> Bound {
        Bound {
            vars: self.params.bind_f64(tape),
        }
    }

    fn linear<T: Real>(tape: &mut Tape<T>, b: &Bound, l: &Linear, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, b.vars[l.w])?;
        tape.add(y, b.vars[l.b])
    }

    /// Per-image embedding, `[N, 1, H, W] → [N, E]`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, x: Var) -> Result<Var, NetError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] != self.dims.height || s[3] != self.dims.width {
            return Err(NetError::Dims {
                found: s,
                expected: vec![0, 1, self.dims.height, self.dims.width],
            });
        }
        let n = s[0];
        let mut h = x;
        for (l, st) in self.convs.iter().zip(&self.spec.stages) {
            h = tape.conv2d(h, b.vars[l.w], Some(b.vars[l.b]), st.stride, st.padding)?;
            h = tape.relu(h);
        }
        let flat = tape.shape(h)[1..].iter().product();
        let h = tape.reshape(h, &[n, flat])?;
        Ok(Self::linear(tape, b, &self.embed, h)?)
    }

    /// Binocular embedding and normalized gaze for `[B, 1, H, W]` eye batches.
    pub fn forward_pair<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, x_left: Var, x_right: Var) -> Result<(Var, Var), NetError> {
        let bl = tape.shape(x_left)[0];
        if tape.shape(x_left) != tape.shape(x_right) {
            return Err(NetError::Dims {
                found: tape.shape(x_right).to_vec(),
                expected: tape.shape(x_left).to_vec(),
            });
        }
        let both = tape.concat(&[x_left, x_right], 0)?;
        let e = self.embed(tape, b, both)?;
        let el = tape.narrow(e, 0, 0, bl)?;
        let er = tape.narrow(e, 0, bl, bl)?;
        let h = tape.concat(&[el, er], 1)?;
        let y = self.head(tape, b, h)?;
        Ok((h, y))
    }

    pub fn head<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, h: Var) -> Result<Var, NetError> {
        let z = Self::linear(tape, b, &self.head[0], h)?;
        let z = tape.gelu(z);
        Ok(Self::linear(tape, b, &self.head[1], z)?)
    }

    pub fn project<T: Real>(&self, tape: &mut Tape<T>, b: &Bound, h: Var, tag: &str) -> Result<Var, NetError> {
        let p = self.projector(tag).ok_or_else(|| NetError::UnknownProjector(tag.to_string()))?;
        let mut z = h;
        for (k, l) in p.layers.iter().enumerate() {
            z = Self::linear(tape, b, l, z)?;
            if k < 2 && p.activation == Activation::Gelu {
                z = tape.gelu(z);
            }
        }
        Ok(z)
    }

    /// Scalar parameters in the bundle, projectors included.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameters used at inference time: backbone and head.
    pub fn inference_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("backbone/") || n.starts_with("head/"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Indices of parameters whose names start with `prefix`.
    pub fn param_indices(&self, prefix: &str) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params.name(i).starts_with(prefix)).collect()
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut r = checkpoint::param_records(&self.params);
        let scalar = |v: f32| Tensor::new(&[1], vec![v]).unwrap();
        r.push(("/meta/tier".into(), scalar(self.spec.tier.code() as f32)));
        r.push(("/meta/role".into(), scalar(self.role.code() as f32)));
        r.push(("/meta/dims".into(), Tensor::new(&[2], vec![self.dims.width as f32, self.dims.height as f32]).unwrap()));
        for p in &self.projectors {
            let act = match p.activation {
                Activation::Gelu => 0.0,
                Activation::Identity => 1.0,
            };
            let out = self.params.get(p.layers[2].b).numel() as f32;
            r.push((format!("/meta/projector/{}", p.tag), Tensor::new(&[3], vec![p.hidden as f32, out, act]).unwrap()));
        }
        r
    }

    pub fn from_records(records: &[Record]) -> Result<Self, NetError> {
        let meta = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| NetError::Checkpoint(CheckpointError::Missing(name.to_string())))
        };
        let bad = |m: &str| NetError::Architecture(m.to_string());
        let tier = Tier::from_code(meta("/meta/tier")?[0] as u32).ok_or_else(|| bad("unknown tier code"))?;
        let role = Role::from_code(meta("/meta/role")?[0] as u32).ok_or_else(|| bad("unknown role code"))?;
        let d = meta("/meta/dims")?;
        let dims = ImageDims {
            width: d[0] as usize,
            height: d[1] as usize,
        };
        let mut rng = RngStream::new(0, 0);
        let mut bundle = Self::new(tier, dims, role, &mut rng);
        for (name, t) in records {
            if let Some(tag) = name.strip_prefix("/meta/projector/") {
                let v = t.data();
                let act = if v[2] == 0.0 { Activation::Gelu } else { Activation::Identity };
                bundle.add_projector_with(tag, v[0] as usize, v[1] as usize, act, &mut rng);
            }
        }
        checkpoint::restore_params(&mut bundle.params, records)?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        checkpoint::save(path, &self.to_records())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_records(&checkpoint::load(path)?)
    }

    /// Copy backbone and head parameters from `other` (same tier).
    pub fn load_trunk_from(&mut self, other: &ModelBundle) -> Result<(), NetError> {
        if other.spec != self.spec || other.dims != self.dims {
            return Err(NetError::Architecture(format!("cannot copy {} trunk into {}", other.tier().name(), self.tier().name())));
        }
        for (i, (name, _)) in other.params.iter().enumerate() {
            if name.starts_with("backbone/") || name.starts_with("head/") {
                let j = self.params.index_of(name).expect("same spec has same trunk names");
                self.params.set(j, other.params.get(i).clone())?;
            }
        }
        Ok(())
    }

    /// Normalized gaze predictions without building gradients.
    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<[f32; 4]>, NetError> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let (xl, xr) = batch_inputs(&mut tape, chunk, self.dims, |s| (&s.image_left, &s.image_right));
            let (_, y) = self.forward_pair(&mut tape, &b, xl, xr)?;
            out.extend(tape.value(y).data().chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]));
        }
        Ok(out)
    }

    /// Binocular embeddings `[f(X_L); f(X_R)]` without building gradients.
    pub fn embed_pairs(&self, samples: &[&Sample]) -> Result<Vec<Vec<f32>>, NetError> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false);
            let (xl, xr) = batch_inputs(&mut tape, chunk, self.dims, |s| (&s.image_left, &s.image_right));
            let (h, _) = self.forward_pair(&mut tape, &b, xl, xr)?;
            out.extend(tape.value(h).data().chunks_exact(2 * self.spec.embed_dim).map(|c| c.to_vec()));
        }
        Ok(out)
    }
}

const INFER_CHUNK: usize = 128;

/// Pixel offset applied to every network input.
pub const INPUT_SHIFT: f32 = 0.5;

/// Stack eye images into `[B, 1, H, W]` constants, centered around zero.
pub fn batch_inputs<'a, S: 'a, T: Real>(
    tape: &mut Tape<T>,
    items: &'a [S],
    dims: ImageDims,
    eyes: impl Fn(&'a S) -> (&'a Vec<f32>, &'a Vec<f32>),
) -> (Var, Var) {
    let n = items.len();
    let shift = T::from_f64(INPUT_SHIFT as f64);
    let mut l = Vec::with_capacity(n * dims.pixels());
    let mut r = Vec::with_capacity(n * dims.pixels());
    for it in items {
        let (a, b) = eyes(it);
        l.extend(a.iter().map(|&v| T::from_f64(v as f64) - shift));
        r.extend(b.iter().map(|&v| T::from_f64(v as f64) - shift));
    }
    let shape = [n, 1, dims.height, dims.width];
    let xl = tape.constant(Tensor::new(&shape, l).expect("image sizes match dims"));
    let xr = tape.constant(Tensor::new(&shape, r).expect("image sizes match dims"));
    (xl, xr)
}

/// `θ_t ← α·θ_t + (1−α)·θ_s` for every parameter, rounded once to f32.
pub fn ema_update(target: &mut ModelBundle, source: &ModelBundle, cfg: &EmaConfig) -> Result<(), NetError> {
    cfg.validate()?;
    if !target.params.same_layout(&source.params) {
        return Err(NetError::Architecture("EMA target and source layouts differ".into()));
    }
    let a = cfg.momentum;
    for i in 0..target.params.len() {
        let s = source.params.get(i);
        let t = target.params.get_mut(i);
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = (a * *tv as f64 + (1.0 - a) * sv as f64) as f32;
        }
    }
    Ok(())
}

/// Degrees to network units.
pub fn normalize_deg(v: f64) -> f32 {
    (v / ANGLE_SCALE_DEG) as f32
}

/// Network units to degrees.
pub fn denormalize(v: f32) -> f64 {
    v as f64 * ANGLE_SCALE_DEG
}

#[cfg(test)]
mod tests;
