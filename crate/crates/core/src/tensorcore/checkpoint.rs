//! `GDCK` checkpoint records.
//!
//! Layout: magic `GDCK`, format version `u32`, then records until end of
//! file. Each record is `name_len u32`, UTF-8 name, `rank u32`,
//! `dims u32 × rank`, little-endian `f32` payload. Optimizer state uses the
//! same records under an `/opt/` prefix and bundle metadata under `/meta/`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{OptimizerState, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"GDCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected GDCK, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("record name is not UTF-8")]
    Name,
    #[error("missing record {0}")]
    Missing(String),
    #[error("record {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

pub type Record = (String, Tensor<f32>);

pub fn write_records(w: &mut impl Write, records: &[Record]) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated(what),
        _ => CheckpointError::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_records(r: &mut impl Read) -> Result<Vec<Record>, CheckpointError> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            let n = r.read(&mut first[got..])?;
            if n == 0 {
                break;
            }
            got += n;
        }
        if got == 0 {
            return Ok(out);
        }
        if got < 4 {
            return Err(CheckpointError::Truncated("record header"));
        }
        let name_len = u32::from_le_bytes(first) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(r, &mut name, "record name")?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Name)?;
        let rank = read_u32(r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, "dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact_or(r, &mut raw, "payload")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(&shape, data).expect("payload sized from dims")));
    }
}

pub fn save(path: &Path, records: &[Record]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Record>, CheckpointError> {
    read_records(&mut BufReader::new(File::open(path)?))
}

pub fn param_records(params: &ParamSet) -> Vec<Record> {
    params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

/// Optimizer moments and step counter as `/opt/` records.
pub fn optimizer_records(params: &ParamSet, opt: &OptimizerState) -> Vec<Record> {
    let (m, v) = opt.moments();
    let mut out = vec![(
        "/opt/step".to_string(),
        Tensor::new(&[2], split_u64(opt.step_count())).expect("step record"),
    )];
    for (i, name) in params.names().iter().enumerate() {
        out.push((format!("/opt/m/{name}"), m[i].clone()));
        out.push((format!("/opt/v/{name}"), v[i].clone()));
    }
    out
}

// A u64 step counter stored exactly as two f32-encoded u32 halves (bit cast).
fn split_u64(x: u64) -> Vec<f32> {
    vec![f32::from_bits(x as u32), f32::from_bits((x >> 32) as u32)]
}

fn join_u64(v: &[f32]) -> u64 {
    v[0].to_bits() as u64 | ((v[1].to_bits() as u64) << 32)
}

fn find<'a>(records: &'a [Record], name: &str) -> Result<&'a Tensor<f32>, CheckpointError> {
    records
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| CheckpointError::Missing(name.to_string()))
}

/// Overwrite `params` from matching records; every parameter must be present.
pub fn restore_params(params: &mut ParamSet, records: &[Record]) -> Result<(), CheckpointError> {
    for i in 0..params.len() {
        let name = params.name(i).to_string();
        let t = find(records, &name)?;
        if t.shape() != params.get(i).shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: t.shape().to_vec(),
                expected: params.get(i).shape().to_vec(),
            });
        }
        params.set(i, t.clone()).expect("shape checked");
    }
    Ok(())
}

pub fn restore_optimizer(params: &ParamSet, opt: &mut OptimizerState, records: &[Record]) -> Result<(), CheckpointError> {
    let step = join_u64(find(records, "/opt/step")?.data());
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for name in params.names() {
        m.push(find(records, &format!("/opt/m/{name}"))?.clone());
        v.push(find(records, &format!("/opt/v/{name}"))?.clone());
    }
    opt.restore(step, m, v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::{AdamWConfig, LrSchedule};

    fn sample_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.push("conv.w", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.5 - 2.0));
        p.push("fc.b", Tensor::new(&[3], vec![1.5, -0.25, 3.0e-7]).unwrap());
        p
    }

    #[test]
    fn round_trip_params_and_optimizer() {
        let mut p = sample_params();
        let mut opt = OptimizerState::new(&p, AdamWConfig::default(), LrSchedule::constant(0.1, 5));
        let grads: Vec<_> = (0..p.len()).map(|i| Tensor::ones(p.get(i).shape())).collect();
        opt.step(&mut p, &grads).unwrap();
        let mut recs = param_records(&p);
        recs.extend(optimizer_records(&p, &opt));
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(&mut buf.as_slice()).unwrap();
        assert_eq!(back, recs);

        let mut q = sample_params();
        restore_params(&mut q, &back).unwrap();
        assert_eq!(q, p);
        let mut opt2 = OptimizerState::new(&q, AdamWConfig::default(), LrSchedule::constant(0.1, 5));
        restore_optimizer(&q, &mut opt2, &back).unwrap();
        assert_eq!(opt2.step_count(), 1);
        assert_eq!(opt2.moments().0, opt.moments().0);
    }

    #[test]
    fn header_layout_is_exact() {
        let recs = vec![("a".to_string(), Tensor::new(&[1], vec![1.0f32]).unwrap())];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let mut expected = b"GDCK".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"a");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn distinct_errors() {
        let recs = param_records(&sample_params());
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_records(&mut bad.as_slice()), Err(CheckpointError::BadMagic(_))));

        let mut ver = buf.clone();
        ver[4] = 9;
        assert!(matches!(
            read_records(&mut ver.as_slice()),
            Err(CheckpointError::Version { found: 9, .. })
        ));

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(read_records(&mut &cut[..]), Err(CheckpointError::Truncated(_))));
    }
}
