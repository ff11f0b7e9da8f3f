//! Weak (teacher) and strong (student) photometric augmentation of single
//! eye images. Geometry that would change the gaze label is never applied.

use thiserror::Error;

use crate::eyegen::ImageDims;
use crate::tensorcore::RngStream;

#[derive(Debug, Error, PartialEq)]
#[error("invalid augmentation config: {0}")]
pub struct AugmentError(pub String);

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub gamma: (f64, f64),
    pub scale: (f64, f64),
    /// Probability of each strong op, drawn independently.
    pub p: f64,
    pub blur_sigma: (f64, f64),
    pub motion_lengths: Vec<usize>,
    pub quant_levels: usize,
    pub quant_block: usize,
    /// Additive brightness offset is drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub shadow: (f64, f64),
    pub dropout_max_rects: usize,
    /// Upper bound on each dropout rectangle's area, as a fraction of the image.
    pub dropout_max_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gamma: (0.8, 1.25),
            scale: (0.9, 1.1),
            p: 0.3,
            blur_sigma: (0.5, 1.5),
            motion_lengths: vec![3, 5],
            quant_levels: 16,
            quant_block: 8,
            brightness: 0.15,
            contrast: (0.8, 1.2),
            shadow: (0.1, 0.4),
            dropout_max_rects: 3,
            dropout_max_area: 0.15,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(AugmentError(format!("{name} range ({lo}, {hi}) is not ordered")))
            }
        };
        range("gamma", self.gamma)?;
        range("scale", self.scale)?;
        range("blur_sigma", self.blur_sigma)?;
        range("contrast", self.contrast)?;
        range("shadow", self.shadow)?;
        if !(0.0..=1.0).contains(&self.p) {
            return Err(AugmentError(format!("probability {} outside [0, 1]", self.p)));
        }
        if self.gamma.0 <= 0.0 || self.scale.0 <= 0.0 {
            return Err(AugmentError("gamma and scale must be positive".into()));
        }
        if self.motion_lengths.is_empty() || self.motion_lengths.contains(&0) {
            return Err(AugmentError("motion lengths must be non-empty and positive".into()));
        }
        if self.quant_levels < 2 || self.quant_block == 0 {
            return Err(AugmentError("quantization needs >= 2 levels and a non-empty block".into()));
        }
        if self.dropout_max_rects == 0 || !(0.0..=1.0).contains(&self.dropout_max_area) {
            return Err(AugmentError("dropout needs >= 1 rectangle and an area fraction in [0, 1]".into()));
        }
        if self.brightness < 0.0 || self.blur_sigma.0 < 0.0 || self.shadow.0 < 0.0 {
            return Err(AugmentError("magnitudes must be non-negative".into()));
        }
        Ok(())
    }

    /// Same ranges with every strong op disabled.
    pub fn weak_only(&self) -> Self {
        Self { p: 0.0, ..self.clone() }
    }
}

fn draw(rng: &mut RngStream, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.uniform_in(lo, hi)
    }
}

fn clamp01(img: &mut [f32]) {
    for v in img {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Bilinear read with edge replication.
fn sample(img: &[f32], dims: ImageDims, x: f64, y: f64) -> f32 {
    let (w, h) = (dims.width as isize, dims.height as isize);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |xi: isize, yi: isize| img[(yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)) as usize];
    let (xi, yi) = (x0 as isize, y0 as isize);
    if fx == 0.0 && fy == 0.0 {
        return at(xi, yi);
    }
    let top = at(xi, yi) * (1.0 - fx) + at(xi + 1, yi) * fx;
    let bot = at(xi, yi + 1) * (1.0 - fx) + at(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Isotropic rescale about the image center, re-cropped (or edge-padded)
/// back to the original size.
pub fn rescale(img: &[f32], dims: ImageDims, s: f64) -> Vec<f32> {
    let (cx, cy) = (dims.width as f64 / 2.0, dims.height as f64 / 2.0);
    let mut out = Vec::with_capacity(img.len());
    for py in 0..dims.height {
        for px in 0..dims.width {
            let sx = cx + (px as f64 + 0.5 - cx) / s - 0.5;
            let sy = cy + (py as f64 + 0.5 - cy) / s - 0.5;
            out.push(sample(img, dims, sx, sy));
        }
    }
    out
}

/// Gamma jitter followed by a random rescale.
pub fn weak_augment(img: &[f32], dims: ImageDims, cfg: &AugmentConfig, rng: &mut RngStream) -> Vec<f32> {
    assert_eq!(img.len(), dims.pixels(), "image does not match dims");
    let g = draw(rng, cfg.gamma) as f32;
    let s = draw(rng, cfg.scale);
    let powed: Vec<f32> = img.iter().map(|v| v.clamp(0.0, 1.0).powf(g)).collect();
    let mut out = if s == 1.0 { powed } else { rescale(&powed, dims, s) };
    clamp01(&mut out);
    out
}

/// Weak view, then each strong op independently with probability `cfg.p`.
pub fn strong_augment(img: &[f32], dims: ImageDims, cfg: &AugmentConfig, rng: &mut RngStream) -> Vec<f32> {
    let mut out = weak_augment(img, dims, cfg, rng);
    if rng.bernoulli(cfg.p) {
        let sigma = draw(rng, cfg.blur_sigma);
        out = gaussian_blur(&out, dims, sigma);
    }
    if rng.bernoulli(cfg.p) {
        let len = cfg.motion_lengths[rng.below(cfg.motion_lengths.len())];
        let angle = rng.uniform_in(0.0, std::f64::consts::PI);
        out = motion_blur(&out, dims, len, angle);
    }
    if rng.bernoulli(cfg.p) {
        block_quantize(&mut out, dims, cfg.quant_block, cfg.quant_levels);
    }
    if rng.bernoulli(cfg.p) {
        let b = rng.uniform_in(-cfg.brightness, cfg.brightness);
        let c = draw(rng, cfg.contrast);
        brightness_contrast(&mut out, b, c);
    }
    if rng.bernoulli(cfg.p) {
        inpaint_brightest_blob(&mut out, dims);
    }
    if rng.bernoulli(cfg.p) {
        let strength = draw(rng, cfg.shadow);
        let angle = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        linear_shadow(&mut out, dims, strength, angle);
    }
    if rng.bernoulli(cfg.p) {
        let n = 1 + rng.below(cfg.dropout_max_rects);
        for _ in 0..n {
            let area = rng.uniform_in(0.02f64.min(cfg.dropout_max_area), cfg.dropout_max_area) * dims.pixels() as f64;
            let aspect = rng.uniform_in(0.5, 2.0);
            let w = ((area * aspect).sqrt().floor() as usize).clamp(1, dims.width);
            let h = ((area / w as f64).floor() as usize).clamp(1, dims.height);
            let x0 = rng.below(dims.width - w + 1);
            let y0 = rng.below(dims.height - h + 1);
            dropout_rect(&mut out, dims, x0, y0, w, h);
        }
    }
    clamp01(&mut out);
    out
}

fn convolve_1d(img: &[f32], dims: ImageDims, kernel: &[f32], horizontal: bool) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (dims.width as isize, dims.height as isize);
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let o = k as isize - r;
                let (sx, sy) = if horizontal { ((x + o).clamp(0, w - 1), y) } else { (x, (y + o).clamp(0, h - 1)) };
                acc += kv * img[(sy * w + sx) as usize];
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &[f32], dims: ImageDims, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let tmp = convolve_1d(img, dims, &k, true);
    convolve_1d(&tmp, dims, &k, false)
}

/// Average of `len` bilinear taps along direction `angle`.
pub fn motion_blur(img: &[f32], dims: ImageDims, len: usize, angle: f64) -> Vec<f32> {
    let (dx, dy) = (angle.cos(), angle.sin());
    let half = (len as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(img.len());
    for py in 0..dims.height {
        for px in 0..dims.width {
            let mut acc = 0.0;
            for t in 0..len {
                let o = t as f64 - half;
                acc += sample(img, dims, px as f64 + o * dx, py as f64 + o * dy);
            }
            out.push(acc / len as f32);
        }
    }
    out
}

/// Snap every `block`×`block` tile onto `levels` evenly spaced values between
/// the tile's own minimum and maximum.
pub fn block_quantize(img: &mut [f32], dims: ImageDims, block: usize, levels: usize) {
    let steps = (levels - 1) as f32;
    for by in (0..dims.height).step_by(block) {
        for bx in (0..dims.width).step_by(block) {
            let idx = |i: usize, j: usize| (by + i) * dims.width + bx + j;
            let (bh, bw) = (block.min(dims.height - by), block.min(dims.width - bx));
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for i in 0..bh {
                for j in 0..bw {
                    lo = lo.min(img[idx(i, j)]);
                    hi = hi.max(img[idx(i, j)]);
                }
            }
            let span = hi - lo;
            if span <= 0.0 {
                continue;
            }
            for i in 0..bh {
                for j in 0..bw {
                    let v = &mut img[idx(i, j)];
                    let q = ((*v - lo) / span * steps).round();
                    *v = lo + q / steps * span;
                }
            }
        }
    }
}

/// Contrast about the image mean, then an additive offset.
pub fn brightness_contrast(img: &mut [f32], brightness: f64, contrast: f64) {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    for v in img.iter_mut() {
        *v = ((*v as f64 - mean) * contrast + mean + brightness) as f32;
    }
}

/// Fill the connected region around the brightest pixel with the median of
/// the ring just outside it. Mimics removal of corneal glints.
pub fn inpaint_brightest_blob(img: &mut [f32], dims: ImageDims) {
    const MAX_BLOB: usize = 64;
    let (w, h) = (dims.width, dims.height);
    let Some((seed, &peak)) = img.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) else {
        return;
    };
    let thresh = peak - 0.15;
    let mut in_blob = vec![false; img.len()];
    let mut stack = vec![seed];
    let mut blob = Vec::new();
    in_blob[seed] = true;
    while let Some(i) = stack.pop() {
        blob.push(i);
        if blob.len() >= MAX_BLOB {
            break;
        }
        let (x, y) = (i % w, i / w);
        let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
        for (nx, ny) in nbrs {
            if nx < w && ny < h {
                let j = ny * w + nx;
                if !in_blob[j] && img[j] >= thresh {
                    in_blob[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    // Pixels pushed but never popped are not part of the fill.
    in_blob.iter_mut().for_each(|b| *b = false);
    blob.iter().for_each(|&i| in_blob[i] = true);

    let mut ring = Vec::new();
    let mut seen = vec![false; img.len()];
    for &i in &blob {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for oy in -2..=2isize {
            for ox in -2..=2isize {
                let (nx, ny) = (x + ox, y + oy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    let j = ny as usize * w + nx as usize;
                    if !in_blob[j] && !seen[j] {
                        seen[j] = true;
                        ring.push(img[j]);
                    }
                }
            }
        }
    }
    if ring.is_empty() {
        return;
    }
    ring.sort_by(f32::total_cmp);
    let n = ring.len();
    let median = if n % 2 == 1 { ring[n / 2] } else { 0.5 * (ring[n / 2 - 1] + ring[n / 2]) };
    for &i in &blob {
        img[i] = median;
    }
}

/// Multiply by `1 − strength·t`, where `t ∈ [0, 1]` ramps across the image
/// along `angle`.
pub fn linear_shadow(img: &mut [f32], dims: ImageDims, strength: f64, angle: f64) {
    let (c, s) = (angle.cos(), angle.sin());
    let (cx, cy) = (dims.width as f64 / 2.0, dims.height as f64 / 2.0);
    let half_extent = (cx * c.abs() + cy * s.abs()).max(1e-9);
    for py in 0..dims.height {
        for px in 0..dims.width {
            let proj = (px as f64 + 0.5 - cx) * c + (py as f64 + 0.5 - cy) * s;
            let t = (0.5 + 0.5 * proj / half_extent).clamp(0.0, 1.0);
            img[py * dims.width + px] *= (1.0 - strength * t) as f32;
        }
    }
}

/// Zero a `w`×`h` rectangle with top-left corner `(x0, y0)`, clipped to the image.
pub fn dropout_rect(img: &mut [f32], dims: ImageDims, x0: usize, y0: usize, w: usize, h: usize) {
    for y in y0..(y0 + h).min(dims.height) {
        for x in x0..(x0 + w).min(dims.width) {
            img[y * dims.width + x] = 0.0;
        }
    }
}
