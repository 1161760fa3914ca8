//! Binary tensor container for feature datasets.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `FRNTENS\0` |
//! | 8 | 4 | version (`1`) |
//! | 12 | 4 | dtype tag (`1` = f32, `2` = f64) |
//! | 16 | 4 | rank `n` |
//! | 20 | 4·n | dims |
//! | 20+4n | prod(dims)·size | row-major payload |
//! | end−4 | 4 | CRC32 of every preceding byte |
//!
//! A dataset is a rank-3 tensor `[items, r, d]` plus a CSV manifest next to
//! it (same path, `.csv` extension) with header `item_index,class_id`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::episode::Dataset;
use crate::error::{Error, Result};
use crate::frn::FeatureMap;
use crate::linalg::{Matrix, Precision};

pub const MAGIC: &[u8; 8] = b"FRNTENS\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub precision: Precision,
    pub data: Vec<f64>,
}

fn ingest_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Ingest {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let count: usize = t.dims.iter().product();
    if count != t.data.len() {
        return Err(Error::Argument(format!(
            "dims {:?} hold {count} values, got {}",
            t.dims,
            t.data.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * t.dims.len() + count * t.precision.bytes() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&t.precision.tag().to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| Error::Argument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.precision {
        Precision::F32 => t.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Precision::F64 => t.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| ingest_err(at, "truncated header"))
}

/// Validates and decodes a container. Errors carry the byte offset of the
/// first offending field.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(ingest_err(0, "bad magic"));
    }
    let version = read_u32(bytes, 8)?;
    if version != VERSION {
        return Err(ingest_err(8, format!("unsupported version {version}")));
    }
    let tag = read_u32(bytes, 12)?;
    let precision = Precision::from_tag(tag).ok_or_else(|| ingest_err(12, format!("unknown dtype tag {tag}")))?;
    let rank = read_u32(bytes, 16)? as usize;
    if rank == 0 || rank > 8 {
        return Err(ingest_err(16, format!("unsupported rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = HEADER + 4 * i;
        let d = read_u32(bytes, at)? as usize;
        if d == 0 {
            return Err(ingest_err(at, "zero-length dimension"));
        }
        dims.push(d);
    }
    let payload_at = HEADER + 4 * rank;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| ingest_err(HEADER, "dimension product overflows"))?;
    let size = precision.bytes();
    let expected = payload_at + count * size + 4;
    if bytes.len() != expected {
        return Err(ingest_err(
            payload_at,
            format!("payload for dims {dims:?} needs {expected} bytes in total, file has {}", bytes.len()),
        ));
    }
    let crc_at = expected - 4;
    let stored = read_u32(bytes, crc_at)?;
    if crc32fast::hash(&bytes[..crc_at]) != stored {
        return Err(ingest_err(crc_at, "checksum mismatch"));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let at = payload_at + i * size;
        let chunk = &bytes[at..at + size];
        let v = match precision {
            Precision::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
            Precision::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
        };
        if !v.is_finite() {
            return Err(ingest_err(at, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    Ok(Tensor { dims, precision, data })
}

/// Where the label manifest for `path` lives.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

fn parse_manifest(text: &str, items: usize) -> Result<Vec<usize>> {
    let mut labels = vec![None; items];
    let mut offset = 0;
    for (lineno, line) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len();
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with("item_index")) {
            continue;
        }
        let parsed = line.split_once(',').and_then(|(a, b)| {
            Some((a.trim().parse::<usize>().ok()?, b.trim().parse::<usize>().ok()?))
        });
        let (idx, class) = parsed.ok_or_else(|| ingest_err(at, format!("manifest line `{line}` is not `item_index,class_id`")))?;
        let slot = labels
            .get_mut(idx)
            .ok_or_else(|| ingest_err(at, format!("item index {idx} out of range for {items} items")))?;
        if slot.replace(class).is_some() {
            return Err(ingest_err(at, format!("item {idx} labeled twice")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.ok_or_else(|| ingest_err(offset, format!("item {i} has no label"))))
        .collect()
}

/// Reads a dataset container and its label manifest.
pub fn ingest(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let t = decode_tensor(&bytes)?;
    if t.dims.len() != 3 {
        return Err(ingest_err(16, format!("dataset tensors have rank 3, found {}", t.dims.len())));
    }
    let (n, r, d) = (t.dims[0], t.dims[1], t.dims[2]);
    let manifest = fs::read_to_string(manifest_path(path))?;
    let labels = parse_manifest(&manifest, n)?;
    let block = r * d;
    let items = labels.into_iter().enumerate().map(|(i, c)| {
        let m = Matrix::from_vec(r, d, t.data[i * block..(i + 1) * block].to_vec()).expect("block sized r*d");
        (c, FeatureMap::new(m).expect("decoded values are finite"))
    });
    Dataset::from_items(items)
}

/// Writes `ds` in class order, with its manifest.
pub fn export(ds: &Dataset, path: &Path, precision: Precision) -> Result<()> {
    let mut data = Vec::with_capacity(ds.len() * ds.r() * ds.d());
    let mut manifest = String::from("item_index,class_id\n");
    for (i, (c, m)) in ds.iter().enumerate() {
        data.extend_from_slice(m.values().as_slice());
        manifest.push_str(&format!("{i},{c}\n"));
    }
    let t = Tensor {
        dims: vec![ds.len(), ds.r(), ds.d()],
        precision,
        data,
    };
    fs::write(path, encode_tensor(&t)?)?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}
