//! Text ingestion ("user service time value" lines, optionally gzipped) and
//! the flat binary tensor cache.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::QosTensor;

const CACHE_MAGIC: &[u8; 4] = b"TPMC";
const CACHE_VERSION: u32 = 1;

/// Loads a temporal QoS log with declared dimensions. Lines are
/// whitespace-separated `userID serviceID timesliceID value` with 0-based
/// integer IDs. Lines with value <= 0 encode invalid invocations and are
/// skipped; duplicate triples resolve to the last occurrence (warned once per
/// file).
pub fn load_qos_log<S: Scalar>(path: &Path, n: u32, m: u32, t_len: u32) -> Result<QosTensor<S>> {
    let file = File::open(path)?;
    let mut head = BufReader::new(file);
    let buf = head.fill_buf()?;
    let gz = buf.starts_with(&[0x1f, 0x8b]);
    if gz {
        parse_log(BufReader::new(GzDecoder::new(head)), n, m, t_len)
    } else {
        parse_log(head, n, m, t_len)
    }
}

fn parse_log<S: Scalar, R: BufRead>(reader: R, n: u32, m: u32, t_len: u32) -> Result<QosTensor<S>> {
    let mut tensor = QosTensor::new(n, m, t_len);
    let mut duplicates = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (a, b, c, d) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c), Some(d)) if fields.next().is_none() => (a, b, c, d),
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    reason: "expected 4 whitespace-separated fields".into(),
                })
            }
        };
        let parse_idx = |s: &str, what: &str| -> Result<u32> {
            s.parse().map_err(|_| Error::Parse {
                line: lineno,
                reason: format!("bad {what} `{s}`"),
            })
        };
        let i = parse_idx(a, "user index")?;
        let j = parse_idx(b, "service index")?;
        let t = parse_idx(c, "time index")?;
        let v: f64 = d.parse().map_err(|_| Error::Parse {
            line: lineno,
            reason: format!("bad value `{d}`"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("non-finite value `{d}`"),
            });
        }
        if i >= n || j >= m || t >= t_len {
            return Err(Error::IndexOutOfRange(format!(
                "line {lineno}: entry ({i},{j},{t}) outside declared {n}x{m}x{t_len}"
            )));
        }
        if v <= 0.0 {
            continue;
        }
        if tensor.get(i, j, t).is_some() {
            duplicates += 1;
        }
        tensor.insert(i, j, t, S::cast(v))?;
    }
    if duplicates > 0 {
        log::warn!("{duplicates} duplicate triples in input; kept last occurrence of each");
    }
    Ok(tensor)
}

/// Writes the binary cache: magic, version, dims, entry count, then
/// `(u32,u32,u32,f64)` records in (time, user, service) order, all
/// little-endian.
pub fn write_tensor_cache<S: Scalar>(path: &Path, tensor: &QosTensor<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&tensor.n().to_le_bytes())?;
    w.write_all(&tensor.m().to_le_bytes())?;
    w.write_all(&tensor.t_len().to_le_bytes())?;
    w.write_all(&(tensor.len() as u64).to_le_bytes())?;
    for &(i, j, t, v) in tensor.entries() {
        w.write_all(&i.to_le_bytes())?;
        w.write_all(&j.to_le_bytes())?;
        w.write_all(&t.to_le_bytes())?;
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_cache<S: Scalar>(path: &Path) -> Result<QosTensor<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a tensor cache (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor cache version {version}"
        )));
    }
    let n = read_u32(&mut r)?;
    let m = read_u32(&mut r)?;
    let t_len = read_u32(&mut r)?;
    let count = read_u64(&mut r)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let i = read_u32(&mut r)?;
        let j = read_u32(&mut r)?;
        let t = read_u32(&mut r)?;
        let mut vb = [0u8; 8];
        r.read_exact(&mut vb)?;
        entries.push((i, j, t, S::cast(f64::from_le_bytes(vb))));
    }
    QosTensor::from_entries(n, m, t_len, entries)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
