//! Dataset files: JSON-lines (interchange) and a flat little-endian binary
//! layout. The format is detected from the leading magic bytes.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{DatasetHeader, OfflineDataset, Trajectory};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"NBDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    JsonLines,
    Binary,
}

impl DatasetFormat {
    /// `.bin` selects the binary layout; anything else is JSON-lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => DatasetFormat::Binary,
            _ => DatasetFormat::JsonLines,
        }
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        read_binary(&bytes)
    } else {
        read_jsonl(&bytes)
    }
}

pub fn save_dataset(ds: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match DatasetFormat::from_path(path) {
        DatasetFormat::JsonLines => save_dataset_jsonl(ds, path),
        DatasetFormat::Binary => save_dataset_binary(ds, path),
    }
}

pub fn save_dataset_jsonl(ds: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &ds.header())?;
    out.push(b'\n');
    for tr in ds.trajectories() {
        serde_json::to_writer(&mut out, tr)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_jsonl(bytes: &[u8]) -> Result<OfflineDataset> {
    let mut lines = BufReader::new(bytes)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
    let (_, first) = lines.next().ok_or(Error::Empty)?;
    let first = first.map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("header: {e}"),
    })?;
    let mut trajectories = Vec::with_capacity(header.n_trajectories);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        let tr: Trajectory = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        trajectories.push(tr);
    }
    if trajectories.len() != header.n_trajectories {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "header declares {} trajectories, file holds {}",
                header.n_trajectories,
                trajectories.len()
            ),
        });
    }
    OfflineDataset::new(header.state_dim, header.action_dim, header.max_len, header.gamma, trajectories)
}

pub fn save_dataset_binary(ds: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let h = ds.header();
    let mut w = BinWriter(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(h.state_dim as u32);
    w.u32(h.action_dim as u32);
    w.u32(h.max_len as u32);
    w.f32(h.gamma);
    w.u32(h.n_trajectories as u32);
    for tr in ds.trajectories() {
        w.u32(tr.len() as u32);
        tr.states.iter().flatten().for_each(|&x| w.f32(x));
        tr.actions.iter().flatten().for_each(|&x| w.f32(x));
        tr.rewards.iter().for_each(|&x| w.f32(x));
        tr.terminals.iter().for_each(|&d| w.f32(if d { 1.0 } else { 0.0 }));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&w.0).map_err(|e| Error::io(path, e))
}

struct BinWriter(Vec<u8>);

impl BinWriter {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct BinReader<'a>(&'a [u8]);

impl BinReader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.0.read_exact(&mut b).map_err(|_| Error::Parse {
            line: 0,
            msg: "truncated binary dataset".into(),
        })?;
        Ok(u32::from_le_bytes(b))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_bits(self.u32()?) as f64)
    }
    fn rows(&mut self, rows: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
        (0..rows).map(|_| (0..dim).map(|_| self.f32()).collect()).collect()
    }
}

fn read_binary(bytes: &[u8]) -> Result<OfflineDataset> {
    let mut r = BinReader(&bytes[MAGIC.len()..]);
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse {
            line: 0,
            msg: format!("unsupported binary dataset version {version}"),
        });
    }
    let state_dim = r.u32()? as usize;
    let action_dim = r.u32()? as usize;
    let max_len = r.u32()? as usize;
    let gamma = r.f32()?;
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(Error::Empty);
    }
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.u32()? as usize;
        let states = r.rows(l + 1, state_dim)?;
        let actions = r.rows(l, action_dim)?;
        let rewards = r.rows(1, l)?.remove(0);
        let terminals = r.rows(1, l)?.remove(0).into_iter().map(|d| d != 0.0).collect();
        trajectories.push(Trajectory {
            states,
            actions,
            rewards,
            terminals,
        });
    }
    OfflineDataset::new(state_dim, action_dim, max_len, gamma, trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> OfflineDataset {
        let tr = Trajectory {
            states: vec![vec![0.0, 1.5], vec![0.25, -2.0], vec![0.5, 3.0]],
            actions: vec![vec![1.0], vec![-0.5]],
            rewards: vec![0.125, -0.75],
            terminals: vec![false, true],
        };
        OfflineDataset::new(2, 1, 5, 0.99, vec![tr.clone(), tr]).unwrap()
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_dataset(&small(), &a).unwrap();
        let ds = load_dataset(&a).unwrap();
        assert_eq!(ds, small());
        save_dataset(&ds, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        save_dataset(&small(), &a).unwrap();
        let ds = load_dataset(&a).unwrap();
        // Values chosen to be exact in f32.
        assert_eq!(ds, small().with_gamma(0.99f32 as f64).unwrap());
        save_dataset(&ds, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn empty_file_has_no_trajectories() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "").unwrap();
        let err = load_dataset(&p).unwrap_err();
        assert_eq!(err.to_string(), "no trajectories");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"state_dim\":2,\"action_dim\":1,\"T\":5,\"gamma\":0.9,\"n_trajectories\":1}\n\
             {\"states\":[[0.0],[1.0]],\"actions\":[[1.0]],\"rewards\":[0.0],\"terminals\":[false]}\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&p), Err(Error::Trajectory { .. })));
    }
}
