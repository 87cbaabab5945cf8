//! Versioned binary container shared by all checkpoint files:
//! 4-byte magic, u32 version, u32-prefixed JSON header, then u64-prefixed
//! little-endian `f64` arrays.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub fn write<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    header: &H,
    arrays: &[Vec<f64>],
) -> Result<()> {
    let head = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + head.len() + arrays.iter().map(|a| 8 + 8 * a.len()).sum::<usize>());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for v in a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 4], version: u32) -> Result<(H, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(bad("wrong magic number"));
    }
    let mut at = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| bad("truncated file"))?;
        at += n;
        Ok(s)
    };
    let found = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if found != version {
        return Err(bad(&format!("version {found}, expected {version}")));
    }
    let hlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let header: H = serde_json::from_slice(take(hlen)?)?;
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut arrays = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let raw = take(8 * len)?;
        arrays.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    Ok((header, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_version_guard() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let arrays = vec![vec![1.0, -0.1, f64::MIN_POSITIVE], vec![]];
        write(&p, b"TEST", 3, &("hdr", 7), &arrays).unwrap();
        let (h, a): ((String, i32), _) = read(&p, b"TEST", 3).unwrap();
        assert_eq!(h, ("hdr".to_string(), 7));
        assert_eq!(a, arrays);
        assert!(read::<(String, i32)>(&p, b"TEST", 4).is_err());
        assert!(read::<(String, i32)>(&p, b"NOPE", 3).is_err());
    }
}
