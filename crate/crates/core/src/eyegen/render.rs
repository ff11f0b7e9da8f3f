use std::f64::consts::PI;

use rand::RngCore;

use crate::tensorcore::{mix64, RngStream};

use super::{Domain, DomainShift, EyeGenError, SubjectParams};

/// Largest per-eye angle the renderer accepts, in degrees.
pub const MAX_RENDER_DEG: f64 = 45.0;

/// Image geometry shared by every rendered eye.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageDims {
    pub width: usize,
    pub height: usize,
}

impl ImageDims {
    pub const DEFAULT: ImageDims = ImageDims {
        width: 64,
        height: 48,
    };

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

impl Default for ImageDims {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Which eye is being rendered; selects the per-eye corner offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eye {
    Left,
    Right,
}

/// Eyeball radius as a multiple of the iris radius.
const EYEBALL_TO_IRIS: f64 = 1.5;
/// Fraction of the iris displacement the upper lid follows vertically.
const LID_FOLLOW: f64 = 0.35;
/// Fraction of the iris displacement the corneal glints follow.
const GLINT_FOLLOW: f64 = 0.6;
const PUPIL_LEVEL: f64 = 0.04;

fn smoothstep(edge_px: f64) -> f64 {
    // Signed distance (positive inside) to coverage over a one-pixel ramp.
    (edge_px + 0.5).clamp(0.0, 1.0)
}

/// Low-frequency skin texture: a few subject-specific plane waves.
struct SkinTexture {
    level: f64,
    waves: [(f64, f64, f64, f64); 4],
}

impl SkinTexture {
    fn new(seed: u64) -> Self {
        let mut r = RngStream::new(seed, 0x5E1A);
        let level = r.uniform_in(0.28, 0.48);
        let mut waves = [(0.0, 0.0, 0.0, 0.0); 4];
        for w in &mut waves {
            let angle = r.uniform_in(0.0, 2.0 * PI);
            let freq = r.uniform_in(0.05, 0.22);
            *w = (freq * angle.cos(), freq * angle.sin(), r.uniform_in(0.0, 2.0 * PI), r.uniform_in(0.02, 0.06));
        }
        Self { level, waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.level
            + self
                .waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).sin())
                .sum::<f64>()
    }
}

/// Smooth fixed displacement field with peak magnitude `amplitude` pixels.
#[derive(Clone, Debug)]
pub struct WarpField {
    terms: Vec<(f64, f64, f64, f64, f64)>,
    scale: f64,
    dims: ImageDims,
    /// Source coordinates for every pixel center, row-major.
    table: Vec<(f64, f64)>,
}

impl WarpField {
    pub fn new(seed: u64, amplitude: f64, dims: ImageDims) -> Self {
        let mut r = RngStream::new(seed, 0x3A4F);
        let terms: Vec<_> = (0..3)
            .map(|_| {
                let angle = r.uniform_in(0.0, 2.0 * PI);
                let freq = r.uniform_in(0.04, 0.10);
                (
                    freq * angle.cos(),
                    freq * angle.sin(),
                    r.uniform_in(0.0, 2.0 * PI),
                    r.uniform_in(-1.0, 1.0),
                    r.uniform_in(-1.0, 1.0),
                )
            })
            .collect();
        let mut field = Self {
            terms,
            scale: 1.0,
            dims,
            table: Vec::new(),
        };
        let mut peak: f64 = 0.0;
        for (x, y) in pixel_centers(dims) {
            let (dx, dy) = field.raw(x, y);
            peak = peak.max(dx.hypot(dy));
        }
        field.scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
        field.table = pixel_centers(dims)
            .map(|(x, y)| {
                let (dx, dy) = field.displacement(x, y);
                (x + dx, y + dy)
            })
            .collect();
        field
    }

    fn raw(&self, x: f64, y: f64) -> (f64, f64) {
        self.terms.iter().fold((0.0, 0.0), |(ax, ay), &(kx, ky, ph, cx, cy)| {
            let s = (kx * x + ky * y + ph).sin();
            (ax + cx * s, ay + cy * s)
        })
    }

    pub fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = self.raw(x, y);
        (dx * self.scale, dy * self.scale)
    }
}

fn pixel_centers(dims: ImageDims) -> impl Iterator<Item = (f64, f64)> {
    (0..dims.height).flat_map(move |py| (0..dims.width).map(move |px| (px as f64 + 0.5, py as f64 + 0.5)))
}

/// Per-subject constants derived once and reused for every frame.
pub(crate) struct SubjectLook {
    iris_level: f64,
    iris_phase: f64,
    glints: Vec<(f64, f64)>,
    /// Skin texture sampled on the plain and on the warped pixel grid.
    skin_plain: Vec<f64>,
    skin_warped: Option<Vec<f64>>,
}

impl SubjectLook {
    pub fn new(p: &SubjectParams, dims: ImageDims, warp: Option<&WarpField>) -> Self {
        let mut r = RngStream::new(p.skin_seed, 0x1215);
        let iris_level = r.uniform_in(0.24, 0.42);
        let iris_phase = r.uniform_in(0.0, 2.0 * PI);
        let skin = SkinTexture::new(p.skin_seed);
        let skin_plain = pixel_centers(dims).map(|(x, y)| skin.at(x, y)).collect();
        let skin_warped = warp.map(|w| {
            assert_eq!(w.dims, dims);
            w.table.iter().map(|&(x, y)| skin.at(x, y)).collect()
        });
        Self {
            iris_level,
            iris_phase,
            glints: p.glint_layout.clone(),
            skin_plain,
            skin_warped,
        }
    }
}

/// Frame constants for one eye at one gaze direction.
struct EyeGeom<'a> {
    look: &'a SubjectLook,
    sclera: f64,
    pupil_ratio: f64,
    cx: f64,
    cy: f64,
    half_w: f64,
    open_h: f64,
    lid_shift: f64,
    ix: f64,
    iy: f64,
    a: f64,
    b: f64,
    r_iris: f64,
    gx: f64,
    gy: f64,
}

impl<'a> EyeGeom<'a> {
    fn new(p: &SubjectParams, look: &'a SubjectLook, eye: Eye, yaw_deg: f64, pitch_deg: f64, dims: ImageDims) -> Self {
        let h = dims.height as f64;
        let (ox, oy) = match eye {
            Eye::Left => p.eye_corner_offset[0],
            Eye::Right => p.eye_corner_offset[1],
        };
        let cx = dims.width as f64 / 2.0 + ox;
        let cy = h / 2.0 + oy;
        let (yaw, pitch) = (yaw_deg.to_radians(), pitch_deg.to_radians());
        let r_iris = p.iris_radius_ratio * h;
        let big_r = EYEBALL_TO_IRIS * r_iris;
        let dx = big_r * yaw.tan();
        let dy = -big_r * pitch.tan();
        Self {
            look,
            sclera: p.sclera_brightness,
            pupil_ratio: p.pupil_ratio,
            cx,
            cy,
            half_w: 0.44 * dims.width as f64,
            open_h: p.eyelid_aperture * 0.36 * h,
            lid_shift: LID_FOLLOW * dy,
            ix: cx + dx,
            iy: cy + dy,
            a: r_iris * yaw.cos(),
            b: r_iris * pitch.cos(),
            r_iris,
            gx: cx + GLINT_FOLLOW * dx,
            gy: cy + GLINT_FOLLOW * dy,
        }
    }

    /// Noise-free intensity at continuous coordinates over the given skin value.
    fn at(&self, x: f64, y: f64, skin: f64) -> f64 {
        // Eyelid opening: parabolic lids, upper lid tracks vertical gaze.
        let u = ((x - self.cx) / self.half_w).clamp(-1.5, 1.5);
        let bulge = 1.0 - u * u;
        let upper = self.cy + self.lid_shift - self.open_h * bulge;
        let lower = self.cy + 0.25 * self.lid_shift + 0.8 * self.open_h * bulge;
        let m_open = smoothstep((y - upper).min(lower - y));
        if m_open <= 0.0 {
            return skin;
        }

        // Iris and pupil ellipses, foreshortened by the viewing angle.
        let (ux, uy) = (x - self.ix, y - self.iy);
        let rho = ((ux / self.a).powi(2) + (uy / self.b).powi(2)).sqrt();
        let ab = self.a.min(self.b);
        let m_iris = smoothstep((1.0 - rho) * ab);
        let mut eye_val = self.sclera * (1.0 - m_iris);
        if m_iris > 0.0 {
            let m_pupil = smoothstep((self.pupil_ratio - rho) * ab);
            let theta = uy.atan2(ux);
            let iris = self.look.iris_level + 0.04 * (8.0 * theta + self.look.iris_phase).cos() - 0.08 * rho.min(1.0);
            eye_val += iris * (m_iris - m_pupil) + PUPIL_LEVEL * m_pupil;
        }
        // Shadow cast by the upper lid.
        let below_lid = y - upper;
        if below_lid < 20.0 {
            eye_val *= 1.0 - 0.25 * (-below_lid.max(0.0) / 2.5).exp();
        }

        // Corneal reflections.
        let mut glint = 0.0;
        for &(gox, goy) in &self.look.glints {
            let d2 = (x - self.gx - gox * self.r_iris).powi(2) + (y - self.gy - goy * self.r_iris).powi(2);
            if d2 < 16.0 {
                glint += 0.9 * (-d2 / (2.0 * 0.8 * 0.8)).exp();
            }
        }
        eye_val = (eye_val + glint).min(1.0);

        skin * (1.0 - m_open) + eye_val * m_open
    }
}

/// Render one eye image in `domain`.
///
/// Sensor noise is drawn from `rng`; the REAL domain additionally applies
/// the fixed warp, vignette, tone curve and extra noise from `shift`.
#[allow(clippy::too_many_arguments)]
pub fn render_eye(
    subject: &SubjectParams,
    eye: Eye,
    yaw_deg: f64,
    pitch_deg: f64,
    domain: Domain,
    shift: &DomainShift,
    dims: ImageDims,
    rng: &mut RngStream,
) -> Result<Vec<f32>, EyeGenError> {
    let warp = match domain {
        Domain::Real => Some(WarpField::new(shift.warp_seed, shift.warp_amplitude, dims)),
        Domain::Syn => None,
    };
    let look = SubjectLook::new(subject, dims, warp.as_ref());
    render_eye_with(subject, &look, warp.as_ref(), eye, yaw_deg, pitch_deg, domain, shift, dims, rng)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn render_eye_with(
    subject: &SubjectParams,
    look: &SubjectLook,
    warp: Option<&WarpField>,
    eye: Eye,
    yaw_deg: f64,
    pitch_deg: f64,
    domain: Domain,
    shift: &DomainShift,
    dims: ImageDims,
    rng: &mut RngStream,
) -> Result<Vec<f32>, EyeGenError> {
    if !(yaw_deg.abs() <= MAX_RENDER_DEG && pitch_deg.abs() <= MAX_RENDER_DEG) {
        return Err(EyeGenError::GazeOutOfRange {
            yaw: yaw_deg,
            pitch: pitch_deg,
        });
    }
    let geom = EyeGeom::new(subject, look, eye, yaw_deg, pitch_deg, dims);
    let (w, h) = (dims.width as f64, dims.height as f64);
    let r_max2 = (w / 2.0).powi(2) + (h / 2.0).powi(2);
    let (coords, skin) = match (domain, warp) {
        (Domain::Real, Some(f)) => (Some(&f.table), look.skin_warped.as_ref().expect("look built without warp")),
        _ => (None, &look.skin_plain),
    };
    let mut out = Vec::with_capacity(dims.pixels());
    for (i, (x, y)) in pixel_centers(dims).enumerate() {
        let (sx, sy) = coords.map_or((x, y), |t| t[i]);
        let mut v = geom.at(sx, sy, skin[i]);
        v += shift.sensor_noise_sigma * rng.normal();
        if domain == Domain::Real {
            let r2 = ((x - w / 2.0).powi(2) + (y - h / 2.0).powi(2)) / r_max2;
            v *= 1.0 - shift.vignette * r2;
            v = v.clamp(0.0, 1.0).powf(shift.tone_gamma);
            v += shift.real_noise_sigma * rng.normal();
        }
        out.push(v.clamp(0.0, 1.0) as f32);
    }
    Ok(out)
}

/// Analytic inverse of the REAL photometric chain (tone curve, then
/// vignette) at pixel `(px, py)`. The warp is geometric and not inverted.
pub fn invert_photometric(value: f32, px: usize, py: usize, shift: &DomainShift, dims: ImageDims) -> f32 {
    let (w, h) = (dims.width as f64, dims.height as f64);
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let r2 = ((x - w / 2.0).powi(2) + (y - h / 2.0).powi(2)) / ((w / 2.0).powi(2) + (h / 2.0).powi(2));
    let lin = (value as f64).max(0.0).powf(1.0 / shift.tone_gamma);
    (lin / (1.0 - shift.vignette * r2)) as f32
}

/// Deterministic subject parameters for `(dataset seed, subject index)`.
pub fn subject_params(dataset_seed: u64, subject: u32) -> SubjectParams {
    let mut r = RngStream::new(dataset_seed, mix64(0x5B_1EC7 ^ subject as u64));
    let iris_radius_ratio = r.uniform_in(0.18, 0.30);
    let pupil_ratio = r.uniform_in(0.25, 0.55);
    let eyelid_aperture = r.uniform_in(0.55, 1.0);
    let sclera_brightness = r.uniform_in(0.6, 0.95);
    let skin_seed = r.next_u64();
    let eye_corner_offset = [
        (r.uniform_in(-3.0, 3.0), r.uniform_in(-3.0, 3.0)),
        (r.uniform_in(-3.0, 3.0), r.uniform_in(-3.0, 3.0)),
    ];
    let n_glints = 1 + r.below(4);
    let phase = r.uniform_in(0.0, 2.0 * PI);
    let glint_layout = (0..n_glints)
        .map(|k| {
            let a = phase + 2.0 * PI * k as f64 / n_glints as f64;
            (0.75 * a.cos(), 0.75 * a.sin())
        })
        .collect();
    SubjectParams {
        iris_radius_ratio,
        pupil_ratio,
        eyelid_aperture,
        sclera_brightness,
        skin_seed,
        eye_corner_offset,
        glint_layout,
    }
}
