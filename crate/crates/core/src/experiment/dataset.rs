//! `.cfz` dataset container.
//!
//! ```text
//! "CANFUSE1" u8 version=1
//! u64 n_samples, u32 h, u32 w, u32 c, u32 can_dim
//! per sample: f64 timestamp_ms, u8 group_id, f64 can[can_dim],
//!             f64 steering_angle, f64 pixels[h*w*c]
//! ```
//! Little-endian throughout.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{write_atomic, ExperimentError, Result};
use crate::sync::SyncedSample;
use crate::videostream::Image;

pub const DATASET_MAGIC: &[u8; 8] = b"CANFUSE1";
pub const DATASET_VERSION: u8 = 1;
const CAN_DIM: usize = 5;

pub fn save_dataset<W: Write>(samples: &[SyncedSample], mut out: W) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(ExperimentError::EmptyDataset);
    };
    let (h, w, c) = (first.image.height, first.image.width, first.image.channels);
    if let Some(s) = samples.iter().find(|s| (s.image.height, s.image.width, s.image.channels) != (h, w, c)) {
        return Err(ExperimentError::InvalidConfig(format!(
            "mixed image geometry: {h}x{w}x{c} and {}x{}x{}",
            s.image.height, s.image.width, s.image.channels
        )));
    }
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.push(DATASET_VERSION);
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for d in [h, w, c, CAN_DIM] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.write_all(&buf)?;
    let mut rec = Vec::with_capacity(8 * (h * w * c + CAN_DIM + 2) + 1);
    for s in samples {
        rec.clear();
        rec.extend_from_slice(&s.timestamp_ms.to_le_bytes());
        rec.push(s.group_id);
        for v in s.can_features.iter().chain([&s.steering_angle]).chain(&s.image.pixels) {
            rec.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&rec)?;
    }
    out.flush()?;
    Ok(())
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ExperimentError::TruncatedFile,
        _ => e.into(),
    })
}

fn read_f64s<R: Read>(r: &mut R, n: usize, scratch: &mut Vec<u8>) -> Result<Vec<f64>> {
    scratch.resize(n * 8, 0);
    fill(r, scratch)?;
    Ok(scratch.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
}

pub fn load_dataset<R: Read>(mut r: R) -> Result<Vec<SyncedSample>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ExperimentError::BadMagic)?;
    if &magic != DATASET_MAGIC {
        return Err(ExperimentError::BadMagic);
    }
    let mut head = [0u8; 25];
    fill(&mut r, &mut head)?;
    if head[0] != DATASET_VERSION {
        return Err(ExperimentError::VersionMismatch(head[0]));
    }
    let n = u64::from_le_bytes(head[1..9].try_into().expect("8 bytes"));
    let dim = |i: usize| u32::from_le_bytes(head[9 + 4 * i..13 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c, can_dim) = (dim(0), dim(1), dim(2), dim(3));
    if n == 0 {
        return Err(ExperimentError::EmptyDataset);
    }
    if can_dim != CAN_DIM || h == 0 || w == 0 || c == 0 {
        return Err(ExperimentError::InvalidConfig(format!("unsupported layout {h}x{w}x{c}, can_dim {can_dim}")));
    }
    let px = h * w * c;
    let mut samples = Vec::new();
    let mut scratch = Vec::new();
    for _ in 0..n {
        let mut ts = [0u8; 9];
        fill(&mut r, &mut ts)?;
        let timestamp_ms = f64::from_le_bytes(ts[..8].try_into().expect("8 bytes"));
        let group_id = ts[8];
        let vals = read_f64s(&mut r, CAN_DIM + 1, &mut scratch)?;
        let pixels = read_f64s(&mut r, px, &mut scratch)?;
        samples.push(SyncedSample {
            timestamp_ms,
            image: Image::new(h, w, c, pixels),
            can_features: vals[..CAN_DIM].try_into().expect("five features"),
            steering_angle: vals[CAN_DIM],
            group_id,
        });
    }
    Ok(samples)
}

pub fn save_dataset_file(samples: &[SyncedSample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    save_dataset(samples, &mut buf)?;
    write_atomic(path, &buf)
}

pub fn load_dataset_file(path: &Path) -> Result<Vec<SyncedSample>> {
    let file = fs::File::open(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    load_dataset(BufReader::new(file))
}

/// Streams a dataset to `path` without the atomic rename, for large sets.
pub fn write_dataset_file(samples: &[SyncedSample], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    save_dataset(samples, BufWriter::new(file))
}
