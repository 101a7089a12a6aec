//! Turn a stored record into model-ready inputs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::signal::{
    bandpass_filter, detect_r_peaks, extract_trend, segment_beats, EcgRecord, FilterConfig, GlobalSignal,
    LocalBeat, RPeakConfig, TrendConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    /// Skip for records that were already filtered by `preprocess`.
    pub apply_filter: bool,
    pub filter: FilterConfig,
    pub rpeak: RPeakConfig,
    pub trend: TrendConfig,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            apply_filter: true,
            filter: FilterConfig::default(),
            rpeak: RPeakConfig::default(),
            trend: TrendConfig::default(),
        }
    }
}

/// Filtered global strip, its beats and trend, plus the record metadata the
/// training and evaluation code needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub record_id: String,
    pub global: GlobalSignal,
    pub beats: Vec<LocalBeat>,
    pub trend: Vec<f64>,
    pub record: EcgRecord,
}

impl PreparedRecord {
    /// Ground-truth localisation mask aligned with `global`.
    pub fn mask(&self) -> Option<Vec<u8>> {
        self.record.mask_for(self.global.len())
    }
}

pub fn prepare(record: &EcgRecord, global_len: usize, beat_len: usize, cfg: &PrepConfig) -> Result<PreparedRecord> {
    record.validate()?;
    let filtered = if cfg.apply_filter {
        bandpass_filter(record, &cfg.filter)?
    } else {
        record.clone()
    };
    let global = filtered.global_signal(global_len);
    let peaks = detect_r_peaks(&global, &cfg.rpeak);
    let beats = segment_beats(&global, &peaks, beat_len);
    let trend = extract_trend(&global, &cfg.trend)?.values;
    Ok(PreparedRecord {
        record_id: record.record_id.clone(),
        global,
        beats,
        trend,
        record: record.clone(),
    })
}
