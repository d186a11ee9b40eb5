//! Content-addressed cache paths. Every cached artifact is keyed by a hash
//! of its input bytes plus the config subset that shaped it, so changed data
//! or settings land on fresh files and stale entries are simply never hit.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tpmcf::error::Result;

pub fn file_digest(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// First 16 hex digits over the delimited parts (order-sensitive).
pub fn key_digest(parts: &[String]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0u8]);
    }
    let hex = format!("{:x}", hasher.finalize());
    hex[..16].to_string()
}

pub fn cache_path(dir: &str, kind: &str, key: &str, ext: &str) -> PathBuf {
    PathBuf::from(dir).join(format!("{kind}-{key}.{ext}"))
}
