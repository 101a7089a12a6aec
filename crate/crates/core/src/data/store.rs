//! Native record format.
//!
//! Each record is two files in one directory:
//!
//! * `<id>.toml`: sidecar with `record_id`, `fs`, `n_channels`, `n_samples`,
//!   `data_file`, `data_sha256`, an `[attributes]` table, optional `labels`
//!   and optional `mask_spans` (half-open `[start, end)` sample ranges).
//! * `<id>.f32`: samples as little-endian IEEE-754 `f32`, channel-major
//!   (all of channel 0, then channel 1, ...), `n_channels * n_samples * 4`
//!   bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::signal::{AttributeVector, EcgRecord};

pub const SIDECAR_EXT: &str = "toml";
pub const DATA_EXT: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    record_id: String,
    fs: f64,
    n_channels: usize,
    n_samples: usize,
    data_file: String,
    data_sha256: String,
    #[serde(default)]
    labels: Option<Vec<String>>,
    #[serde(default)]
    mask_spans: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    attributes: AttributeVector,
}

/// Half-open runs of ones in a 0/1 mask.
pub fn mask_to_spans(mask: &[u8]) -> Vec<[usize; 2]> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push([s, i]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push([s, mask.len()]);
    }
    spans
}

pub fn spans_to_mask(spans: &[[usize; 2]], len: usize) -> Result<Vec<u8>> {
    let mut mask = vec![0u8; len];
    for &[a, b] in spans {
        if a > b || b > len {
            return Err(CoreError::CorruptRecord(format!("mask span [{a}, {b}) outside 0..{len}")));
        }
        mask[a..b].fill(1);
    }
    Ok(mask)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(CoreError::Validation(format!("record id {id:?} is not a safe file name")))
    }
}

fn encode_samples(record: &EcgRecord) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(record.n_channels() * record.n_samples() * 4);
    for ch in &record.channels {
        for v in ch {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    bytes
}

/// Write `record` into `dir`, returning the sidecar path. Samples are stored
/// as `f32`, so values round to single precision.
pub fn write_record(dir: &Path, record: &EcgRecord) -> Result<PathBuf> {
    record.validate()?;
    check_id(&record.record_id)?;
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let bytes = encode_samples(record);
    let data_file = format!("{}.{DATA_EXT}", record.record_id);
    let sidecar = Sidecar {
        record_id: record.record_id.clone(),
        fs: record.fs,
        n_channels: record.n_channels(),
        n_samples: record.n_samples(),
        data_file: data_file.clone(),
        data_sha256: sha256_hex(&bytes),
        labels: record.labels.clone(),
        mask_spans: record.anomaly_mask.as_deref().map(mask_to_spans),
        attributes: record.attributes.clone(),
    };
    let data_path = dir.join(&data_file);
    fs::write(&data_path, &bytes).map_err(|e| CoreError::io(&data_path, e))?;
    let text = toml::to_string(&sidecar).map_err(|e| CoreError::Data(e.to_string()))?;
    let path = dir.join(format!("{}.{SIDECAR_EXT}", record.record_id));
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(path)
}

/// Read a record from its sidecar path.
pub fn read_record(sidecar_path: &Path) -> Result<EcgRecord> {
    let text = fs::read_to_string(sidecar_path).map_err(|e| CoreError::io(sidecar_path, e))?;
    let sc: Sidecar = toml::from_str(&text)
        .map_err(|e| CoreError::CorruptRecord(format!("{}: {e}", sidecar_path.display())))?;
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let data_path = dir.join(&sc.data_file);
    let bytes = fs::read(&data_path).map_err(|e| CoreError::io(&data_path, e))?;
    let expected = sc.n_channels * sc.n_samples * 4;
    if bytes.len() != expected {
        return Err(CoreError::CorruptRecord(format!(
            "{}: {} bytes, header implies {expected}",
            data_path.display(),
            bytes.len()
        )));
    }
    if sha256_hex(&bytes) != sc.data_sha256 {
        return Err(CoreError::CorruptRecord(format!("{}: checksum mismatch", data_path.display())));
    }
    let channels = bytes
        .chunks_exact(sc.n_samples.max(1) * 4)
        .take(sc.n_channels)
        .map(|ch| {
            ch.chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect()
        })
        .collect();
    let anomaly_mask = sc
        .mask_spans
        .as_deref()
        .map(|s| spans_to_mask(s, sc.n_samples))
        .transpose()?;
    let record = EcgRecord {
        record_id: sc.record_id,
        channels,
        fs: sc.fs,
        attributes: sc.attributes,
        labels: sc.labels,
        anomaly_mask,
    };
    record
        .validate()
        .map_err(|e| CoreError::CorruptRecord(e.to_string()))?;
    Ok(record)
}

/// Sidecar paths in `dir`, sorted by file name. Other `.toml` files (run
/// manifests, splits) are skipped by requiring a matching data file.
pub fn list_records(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CoreError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == SIDECAR_EXT) && path.with_extension(DATA_EXT).is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> Result<Vec<EcgRecord>> {
    list_records(dir)?.iter().map(|p| read_record(p)).collect()
}

/// SHA-256 over the sorted file names and contents of every record in `dir`.
pub fn checksum_dir(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for sidecar in list_records(dir)? {
        for path in [sidecar.clone(), sidecar.with_extension(DATA_EXT)] {
            let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
            h.update(path.file_name().unwrap_or_default().as_encoded_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Checksum of in-memory records, independent of file layout.
pub fn checksum_records(records: &[EcgRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.record_id.as_bytes());
        h.update(r.fs.to_le_bytes());
        for ch in &r.channels {
            for v in ch {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(ls) = &r.labels {
            for l in ls {
                h.update(l.as_bytes());
                h.update([0]);
            }
        }
        if let Some(m) = &r.anomaly_mask {
            h.update(m);
        }
        for v in r.attributes.as_array() {
            h.update(v.unwrap_or(f64::NAN).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
