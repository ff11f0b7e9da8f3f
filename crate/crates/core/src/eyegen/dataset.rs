use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::kv;
use crate::tensorcore::{stream_id, RngStream};

use super::render::{render_eye_with, subject_params, Eye, ImageDims, SubjectLook, WarpField};
use super::{Domain, DomainShift, EyeGenError, GazeTarget, Sample, GAZE_LIMIT_DEG};

/// Spread of the REAL gaze distribution, in degrees.
pub const REAL_GAZE_SIGMA_DEG: f64 = 15.0;
/// Per-eye vergence jitter around the shared REAL gaze direction.
pub const REAL_VERGENCE_SIGMA_DEG: f64 = 1.0;

/// The five subject pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    /// Identity pretraining renders, both domains.
    Pretrain,
    /// Labeled synthetic frames.
    Syn,
    /// Unlabeled real frames.
    RealTrain,
    /// Labeled real frames, read only by evaluation.
    RealEval,
    /// Labeled real frames reserved for the fully supervised upper bound.
    RealUpper,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Pretrain, Split::Syn, Split::RealTrain, Split::RealEval, Split::RealUpper];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Syn => "syn",
            Split::RealTrain => "real_train",
            Split::RealEval => "real_eval",
            Split::RealUpper => "real_upper",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_subjects_pretrain: u32,
    pub n_subjects_syn: u32,
    pub n_subjects_real_train: u32,
    pub n_subjects_real_eval: u32,
    pub n_subjects_real_upper: u32,
    pub frames_per_recording: u32,
    pub recordings_per_subject: u32,
    pub dims: ImageDims,
    pub seed: u64,
    pub shift: DomainShift,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_subjects_pretrain: 200,
            n_subjects_syn: 60,
            n_subjects_real_train: 120,
            n_subjects_real_eval: 40,
            n_subjects_real_upper: 60,
            frames_per_recording: 64,
            recordings_per_subject: 1,
            dims: ImageDims::DEFAULT,
            seed: 0,
            shift: DomainShift::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), EyeGenError> {
        let bad = |m: &str| Err(EyeGenError::InvalidSpec(m.to_string()));
        if self.frames_per_recording == 0 || self.recordings_per_subject == 0 {
            return bad("frames_per_recording and recordings_per_subject must be >= 1");
        }
        if self.dims.width < 8 || self.dims.height < 8 || self.dims.width > u16::MAX as usize || self.dims.height > u16::MAX as usize {
            return bad("image dims must lie in [8, 65535]");
        }
        let s = &self.shift;
        if !(s.tone_gamma > 0.0 && s.tone_gamma.is_finite()) {
            return bad("tone_gamma must be positive");
        }
        if !(0.0..1.0).contains(&s.vignette) {
            return bad("vignette must lie in [0, 1)");
        }
        if !(s.sensor_noise_sigma >= 0.0 && s.real_noise_sigma >= 0.0 && s.warp_amplitude >= 0.0) {
            return bad("noise sigmas and warp amplitude must be non-negative");
        }
        let total = self.pool_sizes().iter().map(|&n| n as u64).sum::<u64>();
        if total > u32::MAX as u64 {
            return bad("too many subjects");
        }
        Ok(())
    }

    fn pool_sizes(&self) -> [u32; 5] {
        [
            self.n_subjects_pretrain,
            self.n_subjects_syn,
            self.n_subjects_real_train,
            self.n_subjects_real_eval,
            self.n_subjects_real_upper,
        ]
    }

    /// Subject ids of a pool. Pools occupy consecutive, non-overlapping ranges.
    pub fn subject_range(&self, split: Split) -> std::ops::Range<u32> {
        let sizes = self.pool_sizes();
        let idx = Split::ALL.iter().position(|&s| s == split).unwrap();
        let start: u32 = sizes[..idx].iter().sum();
        start..start + sizes[idx]
    }

    pub fn to_kv(&self) -> String {
        let s = &self.shift;
        kv::render([
            ("n_subjects_pretrain", self.n_subjects_pretrain.to_string()),
            ("n_subjects_syn", self.n_subjects_syn.to_string()),
            ("n_subjects_real_train", self.n_subjects_real_train.to_string()),
            ("n_subjects_real_eval", self.n_subjects_real_eval.to_string()),
            ("n_subjects_real_upper", self.n_subjects_real_upper.to_string()),
            ("frames_per_recording", self.frames_per_recording.to_string()),
            ("recordings_per_subject", self.recordings_per_subject.to_string()),
            ("width", self.dims.width.to_string()),
            ("height", self.dims.height.to_string()),
            ("seed", self.seed.to_string()),
            ("tone_gamma", s.tone_gamma.to_string()),
            ("vignette", s.vignette.to_string()),
            ("sensor_noise_sigma", s.sensor_noise_sigma.to_string()),
            ("real_noise_sigma", s.real_noise_sigma.to_string()),
            ("warp_amplitude", s.warp_amplitude.to_string()),
            ("warp_seed", s.warp_seed.to_string()),
        ])
    }

    pub fn from_kv(text: &str) -> Result<Self, EyeGenError> {
        let map = kv::parse(text).map_err(|e| EyeGenError::InvalidSpec(e.to_string()))?;
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T, EyeGenError> {
            m.get(k)
                .ok_or_else(|| EyeGenError::InvalidSpec(format!("missing key {k}")))?
                .parse()
                .map_err(|_| EyeGenError::InvalidSpec(format!("bad value for {k}")))
        }
        let spec = Self {
            n_subjects_pretrain: get(&map, "n_subjects_pretrain")?,
            n_subjects_syn: get(&map, "n_subjects_syn")?,
            n_subjects_real_train: get(&map, "n_subjects_real_train")?,
            n_subjects_real_eval: get(&map, "n_subjects_real_eval")?,
            n_subjects_real_upper: get(&map, "n_subjects_real_upper")?,
            frames_per_recording: get(&map, "frames_per_recording")?,
            recordings_per_subject: get(&map, "recordings_per_subject")?,
            dims: ImageDims {
                width: get(&map, "width")?,
                height: get(&map, "height")?,
            },
            seed: get(&map, "seed")?,
            shift: DomainShift {
                tone_gamma: get(&map, "tone_gamma")?,
                vignette: get(&map, "vignette")?,
                sensor_noise_sigma: get(&map, "sensor_noise_sigma")?,
                real_noise_sigma: get(&map, "real_noise_sigma")?,
                warp_amplitude: get(&map, "warp_amplitude")?,
                warp_seed: get(&map, "warp_seed")?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Generated pools. The upper-bound pool sits behind an explicit accessor so
/// ordinary training code never reaches for it by accident.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub spec: DatasetSpec,
    pub pretrain: Vec<Sample>,
    pub syn: Vec<Sample>,
    pub real_train: Vec<Sample>,
    pub real_eval: Vec<Sample>,
    real_upper: Vec<Sample>,
}

impl DatasetBundle {
    pub(crate) fn from_parts(spec: DatasetSpec, mut parts: Vec<Vec<Sample>>) -> Self {
        assert_eq!(parts.len(), 5);
        let real_upper = parts.pop().unwrap();
        let real_eval = parts.pop().unwrap();
        let real_train = parts.pop().unwrap();
        let syn = parts.pop().unwrap();
        let pretrain = parts.pop().unwrap();
        Self {
            spec,
            pretrain,
            syn,
            real_train,
            real_eval,
            real_upper,
        }
    }

    /// Labeled REAL frames for the fully supervised upper bound only.
    pub fn upper_bound_labels(&self) -> &[Sample] {
        &self.real_upper
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Syn => &self.syn,
            Split::RealTrain => &self.real_train,
            Split::RealEval => &self.real_eval,
            Split::RealUpper => &self.real_upper,
        }
    }
}

pub(crate) fn syn_gaze(r: &mut RngStream) -> GazeTarget {
    let mut g = || r.uniform_in(-GAZE_LIMIT_DEG, GAZE_LIMIT_DEG);
    GazeTarget::new(g(), g(), g(), g())
}

fn truncated_normal(r: &mut RngStream, sigma: f64, limit: f64) -> f64 {
    loop {
        let v = sigma * r.normal();
        if v.abs() <= limit {
            return v;
        }
    }
}

pub(crate) fn real_gaze(r: &mut RngStream) -> GazeTarget {
    loop {
        let yaw = truncated_normal(r, REAL_GAZE_SIGMA_DEG, GAZE_LIMIT_DEG);
        let pitch = truncated_normal(r, REAL_GAZE_SIGMA_DEG, GAZE_LIMIT_DEG);
        let mut j = || REAL_VERGENCE_SIGMA_DEG * r.normal();
        let g = GazeTarget::new(yaw + j(), pitch + j(), yaw + j(), pitch + j());
        if g.within(GAZE_LIMIT_DEG) {
            return g;
        }
    }
}

/// Labels are stored as f32, so quantize before rendering to keep the file
/// format lossless.
fn quantize(g: GazeTarget) -> GazeTarget {
    let a = g.to_array().map(|v| v as f32 as f64);
    GazeTarget::from_array(a)
}

fn render_subject(spec: &DatasetSpec, split: Split, subject: u32, warp: &WarpField) -> Result<Vec<Sample>, EyeGenError> {
    let params = subject_params(spec.seed, subject);
    let needs_warp = split != Split::Syn;
    let look = SubjectLook::new(&params, spec.dims, needs_warp.then_some(warp));
    let mut out = Vec::with_capacity((spec.recordings_per_subject * spec.frames_per_recording) as usize);
    for recording in 0..spec.recordings_per_subject {
        for frame in 0..spec.frames_per_recording {
            let mut rng = RngStream::new(spec.seed, stream_id(&[subject as u64, recording as u64, frame as u64]));
            let domain = match split {
                Split::Syn => Domain::Syn,
                Split::Pretrain if frame % 2 == 0 => Domain::Syn,
                _ => Domain::Real,
            };
            let gaze = quantize(match domain {
                Domain::Syn => syn_gaze(&mut rng),
                Domain::Real => real_gaze(&mut rng),
            });
            let w = (domain == Domain::Real).then_some(warp);
            let mut draw = |eye, yaw, pitch| render_eye_with(&params, &look, w, eye, yaw, pitch, domain, &spec.shift, spec.dims, &mut rng);
            let left = draw(Eye::Left, gaze.yaw_left, gaze.pitch_left)?;
            let right = draw(Eye::Right, gaze.yaw_right, gaze.pitch_right)?;
            out.push(if split == Split::RealTrain {
                Sample::unlabeled(left, right, subject, recording, frame, domain)
            } else {
                Sample::labeled(left, right, gaze, subject, recording, frame, domain)
            });
        }
    }
    Ok(out)
}

fn render_pool(spec: &DatasetSpec, split: Split, warp: &WarpField) -> Result<Vec<Sample>, EyeGenError> {
    let subjects: Vec<u32> = spec.subject_range(split).collect();
    let per_subject = subjects
        .par_iter()
        .map(|&s| render_subject(spec, split, s, warp))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_subject.into_iter().flatten().collect())
}

/// Render every pool of `spec`.
///
/// Each frame draws from its own stream keyed by (subject, recording, frame),
/// so the output does not depend on the number of worker threads.
pub fn make_dataset(spec: &DatasetSpec) -> Result<DatasetBundle, EyeGenError> {
    spec.validate()?;
    let warp = WarpField::new(spec.shift.warp_seed, spec.shift.warp_amplitude, spec.dims);
    let parts = Split::ALL
        .iter()
        .map(|&s| render_pool(spec, s, &warp))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetBundle::from_parts(spec.clone(), parts))
}
