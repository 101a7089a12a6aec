//! Minimal WFDB reader and writer for single-segment format-16 records.
//!
//! Header (`.hea`) layout, whitespace separated, `#` starts a comment:
//!
//! ```text
//! <name> <n_sig> <fs> <n_samples>
//! <file> 16 <gain>(<baseline>)/<units> <adc_res> <adc_zero> <init> <checksum> <block> <description>
//! ...one line per signal
//! ```
//!
//! Signals sharing a data file are interleaved sample by sample, each sample
//! a little-endian two's-complement `i16`. Physical value is
//! `(adc - baseline) / gain`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};
use crate::signal::EcgRecord;

const DEFAULT_GAIN: f64 = 200.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file: String,
    pub format: u32,
    pub byte_offset: u64,
    pub gain: f64,
    pub baseline: i32,
    pub units: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfdbHeader {
    pub name: String,
    pub fs: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> CoreError {
    CoreError::CorruptRecord(format!("{}: {msg}", path.display()))
}

fn leading_number(s: &str) -> &str {
    let end = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == 'e' || c == 'E' || c == '+'))
        .unwrap_or(s.len());
    &s[..end]
}

/// `format[xN][:skew][+offset]`
fn parse_format(field: &str) -> (Option<u32>, u64) {
    let (head, offset) = match field.split_once('+') {
        Some((h, o)) => (h, o.parse().unwrap_or(0)),
        None => (field, 0),
    };
    let digits: String = head.chars().take_while(char::is_ascii_digit).collect();
    (digits.parse().ok(), offset)
}

/// `gain[(baseline)][/units]`
fn parse_gain(field: &str) -> Option<(f64, Option<i32>, String)> {
    let (body, units) = match field.split_once('/') {
        Some((b, u)) => (b, u.to_string()),
        None => (field, "mV".to_string()),
    };
    let (gain_s, baseline) = match body.split_once('(') {
        Some((g, rest)) => (g, Some(rest.trim_end_matches(')').parse().ok()?)),
        None => (body, None),
    };
    let gain: f64 = gain_s.parse().ok()?;
    Some((if gain == 0.0 { DEFAULT_GAIN } else { gain }, baseline, units))
}

pub fn parse_header(text: &str, path: &Path) -> Result<WfdbHeader> {
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty());
    let record_line = lines.next().ok_or_else(|| corrupt(path, "empty header"))?;
    let f: Vec<&str> = record_line.split_whitespace().collect();
    if f.len() < 4 {
        return Err(corrupt(path, "record line needs name, n_sig, fs and n_samples"));
    }
    if f[0].contains('/') {
        return Err(CoreError::UnsupportedFormat(format!(
            "{}: multi-segment records are not supported",
            path.display()
        )));
    }
    let n_sig: usize = f[1].parse().map_err(|_| corrupt(path, "bad signal count"))?;
    let fs: f64 = leading_number(f[2]).parse().map_err(|_| corrupt(path, "bad sampling frequency"))?;
    let n_samples: usize = f[3].parse().map_err(|_| corrupt(path, "bad sample count"))?;
    let mut signals = Vec::with_capacity(n_sig);
    for _ in 0..n_sig {
        let line = lines.next().ok_or_else(|| corrupt(path, "missing signal line"))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 2 {
            return Err(corrupt(path, format!("signal line {line:?} too short")));
        }
        let (format, byte_offset) = parse_format(f[1]);
        let format = format.ok_or_else(|| corrupt(path, format!("bad format field {:?}", f[1])))?;
        if format != 16 {
            return Err(CoreError::UnsupportedFormat(format!(
                "{}: signal format {format} (only 16 is supported)",
                path.display()
            )));
        }
        let (gain, baseline, units) = match f.get(2) {
            Some(g) => parse_gain(g).ok_or_else(|| corrupt(path, format!("bad gain field {g:?}")))?,
            None => (DEFAULT_GAIN, None, "mV".into()),
        };
        let adc_zero: i32 = f.get(4).and_then(|z| z.parse().ok()).unwrap_or(0);
        signals.push(SignalSpec {
            file: f[0].to_string(),
            format,
            byte_offset,
            gain,
            baseline: baseline.unwrap_or(adc_zero),
            units,
            description: f.get(8..).map(|d| d.join(" ")).unwrap_or_default(),
        });
    }
    Ok(WfdbHeader {
        name: f[0].to_string(),
        fs,
        n_samples,
        signals,
    })
}

/// Decode an interleaved format-16 buffer into `n_sig` sample vectors.
pub fn decode_format16(bytes: &[u8], n_sig: usize) -> Vec<Vec<i16>> {
    let mut out = vec![Vec::with_capacity(bytes.len() / 2 / n_sig.max(1)); n_sig];
    for (i, pair) in bytes.chunks_exact(2).enumerate() {
        out[i % n_sig].push(i16::from_le_bytes([pair[0], pair[1]]));
    }
    out
}

pub fn encode_format16(signals: &[Vec<i16>]) -> Vec<u8> {
    let n = signals.first().map_or(0, Vec::len);
    let mut bytes = Vec::with_capacity(n * signals.len() * 2);
    for t in 0..n {
        for s in signals {
            bytes.extend_from_slice(&s[t].to_le_bytes());
        }
    }
    bytes
}

/// Raw ADC values of every signal, in header order.
pub fn read_wfdb16_adc(header_path: &Path) -> Result<(WfdbHeader, Vec<Vec<i16>>)> {
    let text = fs::read_to_string(header_path).map_err(|e| CoreError::io(header_path, e))?;
    let header = parse_header(&text, header_path)?;
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let mut adc = vec![Vec::new(); header.signals.len()];
    // group consecutive signals by data file
    let mut i = 0;
    while i < header.signals.len() {
        let file = &header.signals[i].file;
        let j = header.signals[i..]
            .iter()
            .position(|s| &s.file != file)
            .map_or(header.signals.len(), |k| i + k);
        let group = j - i;
        let data_path = dir.join(file);
        let bytes = fs::read(&data_path).map_err(|e| CoreError::io(&data_path, e))?;
        let offset = header.signals[i].byte_offset as usize;
        let expected = header.n_samples * group * 2;
        if bytes.len() < offset || bytes.len() - offset != expected {
            return Err(CoreError::CorruptRecord(format!(
                "{}: {} data bytes, header implies {expected}",
                data_path.display(),
                bytes.len().saturating_sub(offset)
            )));
        }
        for (k, sig) in decode_format16(&bytes[offset..], group).into_iter().enumerate() {
            adc[i + k] = sig;
        }
        i = j;
    }
    Ok((header, adc))
}

/// Read a format-16 record as physical values.
pub fn read_wfdb16(header_path: &Path) -> Result<EcgRecord> {
    let (header, adc) = read_wfdb16_adc(header_path)?;
    let channels = header
        .signals
        .iter()
        .zip(&adc)
        .map(|(s, a)| a.iter().map(|v| (f64::from(*v) - f64::from(s.baseline)) / s.gain).collect())
        .collect();
    EcgRecord::new(header.name, channels, header.fs)
}

/// Quantise a record to ADC units: `round(value * gain) + baseline`,
/// saturating at the `i16` range.
pub fn quantize(values: &[f64], gain: f64, baseline: i32) -> Vec<i16> {
    values
        .iter()
        .map(|v| (v * gain).round().clamp(-32768.0, 32767.0) as i32 + baseline)
        .map(|a| a.clamp(i32::from(i16::MIN), i32::from(i16::MAX)) as i16)
        .collect()
}

/// Write raw ADC signals as `<dir>/<name>.hea` plus one interleaved
/// `<name>.dat`.
pub fn write_wfdb16_adc(dir: &Path, name: &str, fs: f64, adc: &[Vec<i16>], gain: f64, baseline: i32) -> Result<PathBuf> {
    let n = adc.first().map_or(0, Vec::len);
    if adc.iter().any(|s| s.len() != n) {
        return Err(CoreError::Validation("signals differ in length".into()));
    }
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let dat = format!("{name}.dat");
    let dat_path = dir.join(&dat);
    fs::write(&dat_path, encode_format16(adc)).map_err(|e| CoreError::io(&dat_path, e))?;
    let mut hea = format!("{name} {} {fs} {n}\n", adc.len());
    for (k, s) in adc.iter().enumerate() {
        let init = s.first().copied().unwrap_or(0);
        hea.push_str(&format!("{dat} 16 {gain}({baseline})/mV 16 0 {init} 0 0 sig{k}\n"));
    }
    let hea_path = dir.join(format!("{name}.hea"));
    fs::write(&hea_path, hea).map_err(|e| CoreError::io(&hea_path, e))?;
    Ok(hea_path)
}

pub fn write_wfdb16(dir: &Path, record: &EcgRecord, gain: f64, baseline: i32) -> Result<PathBuf> {
    record.validate()?;
    let adc: Vec<Vec<i16>> = record.channels.iter().map(|c| quantize(c, gain, baseline)).collect();
    write_wfdb16_adc(dir, &record.record_id, record.fs, &adc, gain, baseline)
}
