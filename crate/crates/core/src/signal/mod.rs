//! ECG records, preprocessing and the synthetic generator.

mod filter;
mod rpeak;
mod segment;
pub mod synth;

pub use filter::{bandpass_filter, filter_signal, FilterConfig};
pub use rpeak::{detect_r_peaks, RPeakConfig};
pub use segment::{extract_trend, segment_beats, TrendConfig};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const DEFAULT_GLOBAL_LEN: usize = 5000;
pub const DEFAULT_BEAT_LEN: usize = 500;

/// Demographic and interval attributes of a record. Missing values are
/// imputed during normalisation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    /// 0 = female, 1 = male.
    pub sex: Option<u8>,
    pub age: Option<f64>,
    pub heart_rate: Option<f64>,
    pub pr_ms: Option<f64>,
    pub qt_ms: Option<f64>,
    pub qtc_ms: Option<f64>,
    pub qrs_ms: Option<f64>,
}

impl AttributeVector {
    pub const NAMES: [&'static str; 7] = ["sex", "age", "heart_rate", "pr_ms", "qt_ms", "qtc_ms", "qrs_ms"];

    /// Values in [`AttributeVector::NAMES`] order.
    pub fn as_array(&self) -> [Option<f64>; 7] {
        [
            self.sex.map(f64::from),
            self.age,
            self.heart_rate,
            self.pr_ms,
            self.qt_ms,
            self.qtc_ms,
            self.qrs_ms,
        ]
    }

    pub fn from_array(v: [Option<f64>; 7]) -> Self {
        Self {
            sex: v[0].map(|s| if s >= 0.5 { 1 } else { 0 }),
            age: v[1],
            heart_rate: v[2],
            pr_ms: v[3],
            qt_ms: v[4],
            qtc_ms: v[5],
            qrs_ms: v[6],
        }
    }

    /// Ten-year age bin lower edge, e.g. 59 -> 50.
    pub fn age_decade(&self) -> Option<u32> {
        self.age.filter(|a| *a >= 0.0).map(|a| (a / 10.0).floor() as u32 * 10)
    }
}

/// One multi-channel recording in physical units (mV).
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    /// `channels[c][t]`.
    pub channels: Vec<Vec<f64>>,
    pub fs: f64,
    pub attributes: AttributeVector,
    /// Diagnostic class names; `None` when the record is unlabelled.
    pub labels: Option<Vec<String>>,
    /// Per-sample localisation ground truth (1 = anomalous).
    pub anomaly_mask: Option<Vec<u8>>,
}

impl EcgRecord {
    pub fn new(record_id: impl Into<String>, channels: Vec<Vec<f64>>, fs: f64) -> Result<Self> {
        let r = Self {
            record_id: record_id.into(),
            channels,
            fs,
            attributes: AttributeVector::default(),
            labels: None,
            anomaly_mask: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(CoreError::Validation(format!(
                "{}: sampling rate must be positive, got {}",
                self.record_id, self.fs
            )));
        }
        let n = self.n_samples();
        if self.channels.iter().any(|c| c.len() != n) {
            return Err(CoreError::Validation(format!(
                "{}: channels differ in length",
                self.record_id
            )));
        }
        if let Some(m) = &self.anomaly_mask {
            if m.len() != n {
                return Err(CoreError::Validation(format!(
                    "{}: anomaly mask has {} samples, record has {}",
                    self.record_id,
                    m.len(),
                    n
                )));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// True when the record carries a label other than `normal_class`.
    pub fn is_abnormal(&self, normal_class: &str) -> Option<bool> {
        self.labels
            .as_ref()
            .map(|ls| ls.iter().any(|l| l != normal_class))
    }

    /// Channel 0 cropped or zero-padded to `len` samples.
    pub fn global_signal(&self, len: usize) -> GlobalSignal {
        let mut values = self.channels.first().cloned().unwrap_or_default();
        values.resize(len, 0.0);
        GlobalSignal {
            values,
            fs: self.fs,
        }
    }

    /// Anomaly mask cropped or zero-padded like [`EcgRecord::global_signal`].
    pub fn mask_for(&self, len: usize) -> Option<Vec<u8>> {
        self.anomaly_mask.as_ref().map(|m| {
            let mut m = m.clone();
            m.resize(len, 0);
            m
        })
    }
}

/// The full-length rhythm strip fed to the global branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSignal {
    pub values: Vec<f64>,
    pub fs: f64,
}

impl GlobalSignal {
    pub fn new(values: Vec<f64>, fs: f64) -> Self {
        Self { values, fs }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One beat window. `origin` is the frame position of `values[0]`; it is
/// negative (or runs past the end) for beats clipped at a record boundary,
/// whose out-of-frame part is zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBeat {
    pub values: Vec<f64>,
    pub origin: isize,
}

impl LocalBeat {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Frame positions covered by this window, clipped to `[0, frame_len)`.
    pub fn frame_range(&self, frame_len: usize) -> std::ops::Range<usize> {
        let start = self.origin.max(0) as usize;
        let end = (self.origin + self.values.len() as isize).clamp(0, frame_len as isize) as usize;
        start.min(end)..end
    }
}

/// Smoothed-then-differenced global signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendSignal {
    pub values: Vec<f64>,
}

/// Rearrange a standard 12-lead recording into the four-channel report
/// layout: channel 0 is the full lead II strip and channels 1..=3 are the
/// three report rows, each built from four consecutive quarter-length
/// segments (`I aVR V1 V4`, `II aVL V2 V5`, `III aVF V3 V6`).
pub fn to_report_layout(record: &EcgRecord, lead_names: &[String]) -> Result<EcgRecord> {
    const ROWS: [[&str; 4]; 3] = [
        ["I", "AVR", "V1", "V4"],
        ["II", "AVL", "V2", "V5"],
        ["III", "AVF", "V3", "V6"],
    ];
    if lead_names.len() != record.n_channels() {
        return Err(CoreError::Validation(format!(
            "{} lead names for {} channels",
            lead_names.len(),
            record.n_channels()
        )));
    }
    let find = |name: &str| -> Result<&Vec<f64>> {
        lead_names
            .iter()
            .position(|l| l.eq_ignore_ascii_case(name))
            .map(|i| &record.channels[i])
            .ok_or_else(|| CoreError::Validation(format!("lead {name} missing")))
    };
    let n = record.n_samples();
    let quarter = n / 4;
    let mut channels = vec![find("II")?.clone()];
    for row in ROWS {
        let mut ch = Vec::with_capacity(n);
        for (q, lead) in row.iter().enumerate() {
            let src = find(lead)?;
            let end = if q == 3 { n } else { (q + 1) * quarter };
            ch.extend_from_slice(&src[q * quarter..end]);
        }
        channels.push(ch);
    }
    Ok(EcgRecord {
        channels,
        ..record.clone()
    })
}
