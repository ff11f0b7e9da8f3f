//! Procedural binocular near-eye images with subject identity and a fixed
//! synthetic-to-real domain shift.

mod dataset;
mod render;
mod shard;

use thiserror::Error;

pub use dataset::{make_dataset, DatasetBundle, DatasetSpec, Split};
pub use render::{invert_photometric, render_eye, subject_params, Eye, ImageDims, WarpField, MAX_RENDER_DEG};
pub use shard::{load_dataset, load_shard, save_dataset, save_shard, SHARD_MAGIC, SHARD_VERSION};

/// Gaze filter applied to every stored label, in degrees.
pub const GAZE_LIMIT_DEG: f64 = 40.0;

#[derive(Debug, Error)]
pub enum EyeGenError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad shard magic {0:?} (expected EYE1)")]
    BadMagic([u8; 4]),
    #[error("unsupported shard version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated shard while reading {0}")]
    Truncated(&'static str),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("gaze out of renderable range: yaw {yaw}°, pitch {pitch}°")]
    GazeOutOfRange { yaw: f64, pitch: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Syn,
    Real,
}

impl Domain {
    pub fn code(self) -> u8 {
        match self {
            Domain::Syn => 0,
            Domain::Real => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Domain::Syn),
            1 => Some(Domain::Real),
            _ => None,
        }
    }
}

/// Appearance of one simulated person.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectParams {
    /// Iris radius as a fraction of image height, in `[0.18, 0.30]`.
    pub iris_radius_ratio: f64,
    /// Pupil radius over iris radius, in `[0.25, 0.55]`.
    pub pupil_ratio: f64,
    /// Eyelid opening, in `[0.55, 1.0]`.
    pub eyelid_aperture: f64,
    /// In `[0.6, 0.95]`.
    pub sclera_brightness: f64,
    /// Drives the low-frequency skin texture and iris shading.
    pub skin_seed: u64,
    /// Per-eye `(dx, dy)` in pixels, each in `[-3, 3]`.
    pub eye_corner_offset: [(f64, f64); 2],
    /// 1–4 glint positions relative to the cornea, in iris radii.
    pub glint_layout: Vec<(f64, f64)>,
}

/// Per-eye yaw and pitch in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeTarget {
    pub yaw_left: f64,
    pub pitch_left: f64,
    pub yaw_right: f64,
    pub pitch_right: f64,
}

impl GazeTarget {
    pub fn new(yaw_left: f64, pitch_left: f64, yaw_right: f64, pitch_right: f64) -> Self {
        Self {
            yaw_left,
            pitch_left,
            yaw_right,
            pitch_right,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.yaw_left, self.pitch_left, self.yaw_right, self.pitch_right]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn within(&self, limit: f64) -> bool {
        self.to_array().iter().all(|v| v.abs() <= limit)
    }
}

/// Fixed photometric and geometric transform separating REAL from SYN.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    /// Exponent of the REAL tone curve `v ↦ v^γ`.
    pub tone_gamma: f64,
    /// Radial darkening strength.
    pub vignette: f64,
    /// Per-pixel noise present in both domains.
    pub sensor_noise_sigma: f64,
    /// Extra per-pixel noise in REAL frames.
    pub real_noise_sigma: f64,
    /// Peak displacement of the REAL warp field, in pixels.
    pub warp_amplitude: f64,
    pub warp_seed: u64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            tone_gamma: 0.6,
            vignette: 0.35,
            sensor_noise_sigma: 0.01,
            real_noise_sigma: 0.03,
            warp_amplitude: 2.0,
            warp_seed: 0xD15C0,
        }
    }
}

/// One binocular frame.
///
/// The label is private: REAL training frames are built without one, so no
/// downstream code can read it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_left: Vec<f32>,
    pub image_right: Vec<f32>,
    gaze: Option<GazeTarget>,
    pub subject_id: u32,
    pub recording_id: u32,
    pub frame_id: u32,
    pub domain: Domain,
}

impl Sample {
    pub fn labeled(
        image_left: Vec<f32>,
        image_right: Vec<f32>,
        gaze: GazeTarget,
        subject_id: u32,
        recording_id: u32,
        frame_id: u32,
        domain: Domain,
    ) -> Self {
        Self {
            image_left,
            image_right,
            gaze: Some(gaze),
            subject_id,
            recording_id,
            frame_id,
            domain,
        }
    }

    pub fn unlabeled(
        image_left: Vec<f32>,
        image_right: Vec<f32>,
        subject_id: u32,
        recording_id: u32,
        frame_id: u32,
        domain: Domain,
    ) -> Self {
        Self {
            image_left,
            image_right,
            gaze: None,
            subject_id,
            recording_id,
            frame_id,
            domain,
        }
    }

    pub fn gaze(&self) -> Option<GazeTarget> {
        self.gaze
    }

    pub fn has_gaze(&self) -> bool {
        self.gaze.is_some()
    }
}

#[cfg(test)]
mod tests;
