//! Gaussian-wave ECG generator with labelled anomaly injection.
//!
//! Each beat is a sum of five Gaussians (P, Q, R, S, T) placed relative to
//! the R peak. Injected anomalies alter a span of beats and mark the altered
//! samples in the record's anomaly mask.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AttributeVector, EcgRecord};
use crate::error::{CoreError, Result};

pub const NORMAL_CLASS: &str = "normal";

/// A generator parameter: either fixed or drawn uniformly per record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Fixed(f64),
    Range([f64; 2]),
}

impl Param {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Param::Fixed(v) => v,
            Param::Range([a, b]) if a == b => a,
            Param::Range([a, b]) => rng.random_range(a..b),
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Param::Fixed(v) => (v, v),
            Param::Range([a, b]) => (a, b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    StShift,
    QrsWiden,
    PrProlong,
    DroppedBeat,
    NoiseBurst,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        AnomalyKind::StShift,
        AnomalyKind::QrsWiden,
        AnomalyKind::PrProlong,
        AnomalyKind::DroppedBeat,
        AnomalyKind::NoiseBurst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::StShift => "st_shift",
            AnomalyKind::QrsWiden => "qrs_widen",
            AnomalyKind::PrProlong => "pr_prolong",
            AnomalyKind::DroppedBeat => "dropped_beat",
            AnomalyKind::NoiseBurst => "noise_burst",
        }
    }

    /// Magnitude used when a random injection is drawn: mV for ST shift and
    /// noise, a width factor for QRS widening, added ms for PR prolongation.
    fn magnitude_range(self) -> (f64, f64) {
        match self {
            AnomalyKind::StShift => (0.15, 0.35),
            AnomalyKind::QrsWiden => (1.8, 2.5),
            AnomalyKind::PrProlong => (60.0, 100.0),
            AnomalyKind::DroppedBeat => (1.0, 1.0),
            AnomalyKind::NoiseBurst => (0.08, 0.15),
        }
    }

    fn span_range(self) -> (usize, usize) {
        match self {
            AnomalyKind::DroppedBeat => (1, 1),
            AnomalyKind::NoiseBurst => (1, 3),
            _ => (2, 4),
        }
    }
}

impl std::fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One injection over the inclusive beat range `beats[0]..=beats[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub beats: [usize; 2],
    /// Kind-specific strength; a typical value is used when absent.
    pub magnitude: Option<f64>,
}

impl AnomalySpec {
    fn magnitude(&self) -> f64 {
        self.magnitude.unwrap_or_else(|| {
            let (a, b) = self.kind.magnitude_range();
            if self.kind == AnomalyKind::StShift {
                0.25
            } else {
                0.5 * (a + b)
            }
        })
    }

    fn covers(&self, beat: usize) -> bool {
        (self.beats[0]..=self.beats[1]).contains(&beat)
    }
}

/// Generator configuration, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSpec {
    pub fs: f64,
    pub duration_s: f64,
    pub heart_rate: Param,
    /// Beat-to-beat RR jitter as a fraction of the mean RR.
    pub hrv: f64,
    pub p_amp: Param,
    pub q_amp: Param,
    pub r_amp: Param,
    pub s_amp: Param,
    pub t_amp: Param,
    pub pr_ms: Param,
    pub qrs_ms: Param,
    pub qt_ms: Param,
    /// White measurement noise, mV.
    pub noise_std: Param,
    /// Peak amplitude of a slow respiratory baseline drift, mV.
    pub baseline_wander: Param,
    pub age: Param,
    pub male_fraction: f64,
    /// Explicit injections. When empty, `anomaly_rate` draws one at random.
    pub anomaly: Vec<AnomalySpec>,
    pub anomaly_rate: f64,
    /// Relative frequency of each kind for random injections.
    pub anomaly_weights: BTreeMap<AnomalyKind, f64>,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            fs: 500.0,
            duration_s: 10.0,
            heart_rate: Param::Range([55.0, 80.0]),
            hrv: 0.02,
            p_amp: Param::Range([0.1, 0.2]),
            q_amp: Param::Range([0.05, 0.15]),
            r_amp: Param::Range([0.8, 1.4]),
            s_amp: Param::Range([0.1, 0.3]),
            t_amp: Param::Range([0.2, 0.4]),
            pr_ms: Param::Range([130.0, 180.0]),
            qrs_ms: Param::Range([80.0, 100.0]),
            qt_ms: Param::Range([350.0, 400.0]),
            noise_std: Param::Fixed(0.01),
            baseline_wander: Param::Fixed(0.0),
            age: Param::Range([20.0, 90.0]),
            male_fraction: 0.5,
            anomaly: Vec::new(),
            anomaly_rate: 0.0,
            anomaly_weights: AnomalyKind::ALL.iter().map(|k| (*k, 1.0)).collect(),
        }
    }
}

impl SynthesisSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Validation(m));
        if !(self.fs > 0.0) || !(self.duration_s > 0.0) {
            return bad("fs and duration_s must be positive".into());
        }
        let params = [
            ("heart_rate", self.heart_rate),
            ("p_amp", self.p_amp),
            ("q_amp", self.q_amp),
            ("r_amp", self.r_amp),
            ("s_amp", self.s_amp),
            ("t_amp", self.t_amp),
            ("pr_ms", self.pr_ms),
            ("qrs_ms", self.qrs_ms),
            ("qt_ms", self.qt_ms),
            ("noise_std", self.noise_std),
            ("baseline_wander", self.baseline_wander),
            ("age", self.age),
        ];
        for (name, p) in params {
            let (a, b) = p.bounds();
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return bad(format!("{name}: invalid range [{a}, {b}]"));
            }
        }
        if self.heart_rate.bounds().0 <= 0.0 {
            return bad("heart_rate must be positive".into());
        }
        if !(0.0..0.2).contains(&self.hrv) {
            return bad(format!("hrv {} outside [0, 0.2)", self.hrv));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) || !(0.0..=1.0).contains(&self.male_fraction) {
            return bad("anomaly_rate and male_fraction must lie in [0, 1]".into());
        }
        if self.anomaly_rate > 0.0 && self.anomaly_weights.values().sum::<f64>() <= 0.0 {
            return bad("anomaly_weights must have positive total".into());
        }
        for a in &self.anomaly {
            if a.beats[0] > a.beats[1] {
                return bad(format!("{}: beat range {:?} is reversed", a.kind, a.beats));
            }
        }
        // worst case over the ranges: longest PR and QT at the shortest RR
        let rr_min = 60.0 / self.heart_rate.bounds().1 * 1000.0;
        let pr = self.pr_ms.bounds().1;
        let qt = self.qt_ms.bounds().1;
        if pr + qt >= rr_min {
            return bad(format!(
                "PR {pr} ms + QT {qt} ms does not fit in an RR interval of {rr_min:.0} ms"
            ));
        }
        Ok(())
    }
}

/// A generated record together with the true R-peak sample positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEcg {
    pub record: EcgRecord,
    pub r_peaks: Vec<usize>,
}

struct Wave {
    center: f64,
    sigma: f64,
    amp: f64,
}

struct Beat {
    r: f64,
    p_onset: f64,
    qrs_onset: f64,
    qrs_end: f64,
    t_end: f64,
    waves: Vec<Wave>,
    dropped: bool,
}

fn add_gaussian(x: &mut [f64], fs: f64, w: &Wave) {
    let n = x.len() as isize;
    let lo = (((w.center - 6.0 * w.sigma) * fs).floor() as isize).clamp(0, n);
    let hi = (((w.center + 6.0 * w.sigma) * fs).ceil() as isize + 1).clamp(0, n);
    for i in lo..hi {
        let z = (i as f64 / fs - w.center) / w.sigma;
        x[i as usize] += w.amp * (-0.5 * z * z).exp();
    }
}

fn sample_range(fs: f64, n: usize, a: f64, b: f64) -> std::ops::Range<usize> {
    let lo = ((a * fs).ceil().max(0.0) as usize).min(n);
    let hi = ((b * fs).ceil().max(0.0) as usize).min(n);
    lo..hi.max(lo)
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Draw one random injection for a record with `n_beats` beats, keeping it
/// clear of the first and last beat.
pub fn random_anomaly<R: Rng + ?Sized>(kind: AnomalyKind, n_beats: usize, rng: &mut R) -> AnomalySpec {
    let (lo, hi) = kind.span_range();
    let span = rng.random_range(lo..=hi).min(n_beats.saturating_sub(2).max(1));
    let last_start = n_beats.saturating_sub(span + 1).max(1);
    let start = rng.random_range(1..=last_start);
    let (a, b) = kind.magnitude_range();
    let mut magnitude = if a == b { a } else { rng.random_range(a..b) };
    if kind == AnomalyKind::StShift && rng.random_bool(0.5) {
        magnitude = -magnitude;
    }
    AnomalySpec {
        kind,
        beats: [start, start + span - 1],
        magnitude: Some(magnitude),
    }
}

fn pick_kind<R: Rng + ?Sized>(weights: &BTreeMap<AnomalyKind, f64>, rng: &mut R) -> AnomalyKind {
    let total: f64 = weights.values().sum();
    let mut u = rng.random_range(0.0..total);
    for (k, w) in weights {
        if u < *w {
            return *k;
        }
        u -= w;
    }
    *weights.keys().next_back().expect("non-empty weights")
}

/// Generate one record. Identical `(spec, seed)` pairs give bit-identical
/// output.
pub fn synthesize_ecg(spec: &SynthesisSpec, seed: u64) -> Result<SyntheticEcg> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = spec.fs;
    let n = (spec.duration_s * fs).round() as usize;
    let dur = n as f64 / fs;

    let hr = spec.heart_rate.sample(&mut rng);
    let rr = 60.0 / hr;
    let p_amp = spec.p_amp.sample(&mut rng);
    let q_amp = spec.q_amp.sample(&mut rng);
    let r_amp = spec.r_amp.sample(&mut rng);
    let s_amp = spec.s_amp.sample(&mut rng);
    let t_amp = spec.t_amp.sample(&mut rng);
    let pr = spec.pr_ms.sample(&mut rng) / 1000.0;
    let qrs = spec.qrs_ms.sample(&mut rng) / 1000.0;
    let qt = spec.qt_ms.sample(&mut rng) / 1000.0;
    let noise_std = spec.noise_std.sample(&mut rng);
    let wander = spec.baseline_wander.sample(&mut rng);
    let age = spec.age.sample(&mut rng).round();
    let sex = u8::from(rng.random_bool(spec.male_fraction));
    if pr + qt >= rr {
        return Err(CoreError::Validation(format!(
            "PR {:.0} ms + QT {:.0} ms does not fit in RR {:.0} ms",
            pr * 1e3,
            qt * 1e3,
            rr * 1e3
        )));
    }

    // beat times
    let jitter = Normal::new(0.0, spec.hrv.max(0.0)).expect("finite std");
    let mut r_times = Vec::new();
    let mut r = 0.5 * rr.min(1.0) + rng.random_range(0.0..0.1);
    while r < dur {
        r_times.push(r);
        let step = rr * (1.0 + jitter.sample(&mut rng)).clamp(0.8, 1.2);
        r += step;
    }
    let n_beats = r_times.len();

    let mut injections = spec.anomaly.clone();
    if injections.is_empty() && spec.anomaly_rate > 0.0 && rng.random_bool(spec.anomaly_rate) {
        let kind = pick_kind(&spec.anomaly_weights, &mut rng);
        injections.push(random_anomaly(kind, n_beats, &mut rng));
    }
    for a in &injections {
        if a.beats[1] >= n_beats {
            return Err(CoreError::Validation(format!(
                "{} targets beat {} but the record has {n_beats} beats",
                a.kind, a.beats[1]
            )));
        }
    }
    let find = |beat: usize, kind: AnomalyKind| injections.iter().find(|a| a.kind == kind && a.covers(beat));

    let mut beats = Vec::with_capacity(n_beats);
    for (k, &r) in r_times.iter().enumerate() {
        let base_onset = r - qrs / 2.0;
        let widen = find(k, AnomalyKind::QrsWiden).map_or(1.0, AnomalySpec::magnitude);
        let w_qrs = qrs * widen;
        let extra_pr = find(k, AnomalyKind::PrProlong).map_or(0.0, |a| a.magnitude() / 1000.0);
        let p_onset = base_onset - pr - extra_pr;
        let t_end = base_onset + qt;
        let sigma_t = 0.04;
        let waves = vec![
            Wave { center: p_onset + 0.05, sigma: 0.02, amp: p_amp },
            Wave { center: r - 0.3 * w_qrs, sigma: w_qrs / 12.0, amp: -q_amp },
            Wave { center: r, sigma: w_qrs / 9.0, amp: r_amp },
            Wave { center: r + 0.3 * w_qrs, sigma: w_qrs / 12.0, amp: -s_amp },
            Wave { center: t_end - 2.5 * sigma_t, sigma: sigma_t, amp: t_amp },
        ];
        beats.push(Beat {
            r,
            p_onset,
            qrs_onset: r - w_qrs / 2.0,
            qrs_end: r + w_qrs / 2.0,
            t_end,
            waves,
            dropped: find(k, AnomalyKind::DroppedBeat).is_some(),
        });
    }
    for pair in beats.windows(2) {
        if pair[1].p_onset < pair[0].t_end {
            return Err(CoreError::Validation(format!(
                "beat at {:.3} s starts before the previous T wave ends",
                pair[1].r
            )));
        }
    }

    let mut x = vec![0.0; n];
    let mut mask = vec![0u8; n];
    let mut mark = |a: f64, b: f64| {
        for i in sample_range(fs, n, a, b) {
            mask[i] = 1;
        }
    };
    for (k, b) in beats.iter().enumerate() {
        if b.dropped {
            mark(b.p_onset, b.t_end);
            continue;
        }
        for w in &b.waves {
            add_gaussian(&mut x, fs, w);
        }
        if let Some(a) = find(k, AnomalyKind::StShift) {
            let (j, e, mag) = (b.qrs_end, b.t_end, a.magnitude());
            let ramp = (0.02f64).min((e - j) / 2.0);
            for i in sample_range(fs, n, j, e) {
                let t = i as f64 / fs;
                let edge = ((t - j).min(e - t) / ramp).min(1.0);
                x[i] += mag * 0.5 * (1.0 - (std::f64::consts::PI * edge).cos());
            }
            mark(j, e);
        }
        if find(k, AnomalyKind::QrsWiden).is_some() {
            let half = 0.55 * (b.qrs_end - b.qrs_onset);
            mark(b.r - half, b.r + half);
        }
        if find(k, AnomalyKind::PrProlong).is_some() {
            mark(b.p_onset, b.qrs_onset);
        }
    }
    for a in injections.iter().filter(|a| a.kind == AnomalyKind::NoiseBurst) {
        let (start, end) = (beats[a.beats[0]].p_onset, beats[a.beats[1]].t_end);
        let normal = Normal::new(0.0, a.magnitude().abs()).expect("finite std");
        let span = sample_range(fs, n, start, end);
        let raw: Vec<f64> = span.clone().map(|_| normal.sample(&mut rng)).collect();
        // short moving average gives muscle-like rather than white noise
        for (j, i) in span.enumerate() {
            let lo = j.saturating_sub(1);
            let hi = (j + 3).min(raw.len());
            let avg = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            x[i] += 2.0 * avg;
        }
        mark(start, end);
    }

    let white = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let resp_hz = rng.random_range(0.15..0.3);
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / fs;
        *v += white.sample(&mut rng) + wander * (std::f64::consts::TAU * resp_hz * t + phase).sin();
    }

    let present: Vec<&Beat> = beats.iter().filter(|b| !b.dropped).collect();
    let r_peaks: Vec<usize> = present
        .iter()
        .map(|b| (b.r * fs).round() as usize)
        .filter(|&i| i < n)
        .collect();
    let mut rrs: Vec<f64> = r_times.windows(2).map(|w| w[1] - w[0]).collect();
    let mut prs: Vec<f64> = present.iter().map(|b| b.qrs_onset - b.p_onset).collect();
    let mut qrss: Vec<f64> = present.iter().map(|b| b.qrs_end - b.qrs_onset).collect();
    let mut qts: Vec<f64> = present.iter().map(|b| b.t_end - b.qrs_onset).collect();
    let rr_med = median(&mut rrs).unwrap_or(rr);
    let qt_med = median(&mut qts);
    let attributes = AttributeVector {
        sex: Some(sex),
        age: Some(age),
        heart_rate: Some(60.0 / rr_med),
        pr_ms: median(&mut prs).map(|v| v * 1e3),
        qt_ms: qt_med.map(|v| v * 1e3),
        qtc_ms: qt_med.map(|v| v / rr_med.sqrt() * 1e3),
        qrs_ms: median(&mut qrss).map(|v| v * 1e3),
    };

    let mut labels: Vec<String> = injections.iter().map(|a| a.kind.name().to_string()).collect();
    labels.sort();
    labels.dedup();
    if labels.is_empty() {
        labels.push(NORMAL_CLASS.to_string());
    }

    let record = EcgRecord {
        record_id: format!("syn{seed:010}"),
        channels: vec![x],
        fs,
        attributes,
        labels: Some(labels),
        anomaly_mask: Some(mask),
    };
    record.validate()?;
    Ok(SyntheticEcg { record, r_peaks })
}
