//! `EYE1` shard files: one per pool, plus a `dataset.kv` describing the spec.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::dataset::{DatasetBundle, DatasetSpec, Split};
use super::render::ImageDims;
use super::{Domain, EyeGenError, GazeTarget, Sample};

pub const SHARD_MAGIC: [u8; 4] = *b"EYE1";
pub const SHARD_VERSION: u32 = 1;

pub fn save_shard(path: &Path, dims: ImageDims, samples: &[Sample]) -> Result<(), EyeGenError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&SHARD_MAGIC)?;
    w.write_all(&SHARD_VERSION.to_le_bytes())?;
    w.write_all(&(dims.width as u16).to_le_bytes())?;
    w.write_all(&(dims.height as u16).to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        w.write_all(&s.subject_id.to_le_bytes())?;
        w.write_all(&s.recording_id.to_le_bytes())?;
        w.write_all(&s.frame_id.to_le_bytes())?;
        w.write_all(&[s.domain.code(), s.has_gaze() as u8])?;
        if let Some(g) = s.gaze() {
            for v in g.to_array() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        for img in [&s.image_left, &s.image_right] {
            debug_assert_eq!(img.len(), dims.pixels());
            for v in img.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], EyeGenError> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => EyeGenError::Truncated(what),
            _ => EyeGenError::Io(e),
        })?;
        Ok(b)
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, EyeGenError> {
        let mut raw = vec![0u8; n * 4];
        self.r.read_exact(&mut raw).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => EyeGenError::Truncated(what),
            _ => EyeGenError::Io(e),
        })?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn load_shard(path: &Path) -> Result<(ImageDims, Vec<Sample>), EyeGenError> {
    let mut c = Cursor {
        r: BufReader::new(fs::File::open(path)?),
    };
    let magic = c.bytes::<4>("magic")?;
    if magic != SHARD_MAGIC {
        return Err(EyeGenError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(c.bytes("version")?);
    if version != SHARD_VERSION {
        return Err(EyeGenError::Version {
            found: version,
            expected: SHARD_VERSION,
        });
    }
    let width = u16::from_le_bytes(c.bytes("dims")?) as usize;
    let height = u16::from_le_bytes(c.bytes("dims")?) as usize;
    let dims = ImageDims { width, height };
    let count = u64::from_le_bytes(c.bytes("record count")?);
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let subject = u32::from_le_bytes(c.bytes("record header")?);
        let recording = u32::from_le_bytes(c.bytes("record header")?);
        let frame = u32::from_le_bytes(c.bytes("record header")?);
        let [dcode, has_gaze] = c.bytes::<2>("record header")?;
        let domain = Domain::from_code(dcode).ok_or(EyeGenError::InvalidSpec(format!("unknown domain code {dcode}")))?;
        let gaze = match has_gaze {
            0 => None,
            1 => {
                let g = c.f32s(4, "gaze")?;
                Some(GazeTarget::new(g[0] as f64, g[1] as f64, g[2] as f64, g[3] as f64))
            }
            v => return Err(EyeGenError::InvalidSpec(format!("bad has_gaze flag {v}"))),
        };
        let left = c.f32s(dims.pixels(), "image")?;
        let right = c.f32s(dims.pixels(), "image")?;
        out.push(match gaze {
            Some(g) => Sample::labeled(left, right, g, subject, recording, frame, domain),
            None => Sample::unlabeled(left, right, subject, recording, frame, domain),
        });
    }
    Ok((dims, out))
}

const SPEC_FILE: &str = "dataset.kv";

fn shard_path(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.eye1", split.name()))
}

/// Write `bundle` into directory `dir` (created if absent).
pub fn save_dataset(bundle: &DatasetBundle, dir: &Path) -> Result<(), EyeGenError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SPEC_FILE), bundle.spec.to_kv())?;
    for split in Split::ALL {
        save_shard(&shard_path(dir, split), bundle.spec.dims, bundle.split(split))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetBundle, EyeGenError> {
    let spec = DatasetSpec::from_kv(&fs::read_to_string(dir.join(SPEC_FILE))?)?;
    let mut parts = Vec::new();
    for split in Split::ALL {
        let (dims, samples) = load_shard(&shard_path(dir, split))?;
        if dims != spec.dims {
            return Err(EyeGenError::InvalidSpec(format!(
                "{} shard dims {}x{} differ from spec",
                split.name(),
                dims.width,
                dims.height
            )));
        }
        parts.push(samples);
    }
    Ok(DatasetBundle::from_parts(spec, parts))
}
