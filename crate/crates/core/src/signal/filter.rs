use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::EcgRecord;
use crate::error::{CoreError, Result};

/// Zero-phase Butterworth band-pass plus optional notch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    /// Order of each of the high-pass and low-pass halves.
    pub order: usize,
    pub notch: bool,
    pub notch_hz: f64,
    pub notch_q: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            low_hz: 0.5,
            high_hz: 40.0,
            order: 4,
            notch: true,
            notch_hz: 50.0,
            notch_q: 30.0,
        }
    }
}

/// Second-order section in transposed direct form II, `a0` normalised to 1.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]],
            a: [a[1] / a[0], a[2] / a[0]],
        }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Filter in place, starting from the steady state of a constant input
    /// equal to the first sample.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let y0 = self.dc_gain() * x0;
        let mut s2 = b2 * x0 - a2 * y0;
        let mut s1 = b1 * x0 - a1 * y0 + s2;
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + s1;
            s1 = b1 * xi - a1 * y + s2;
            s2 = b2 * xi - a2 * y;
            *v = y;
        }
    }
}

#[derive(Clone, Copy)]
enum Pass {
    Low,
    High,
}

/// Butterworth sections via the bilinear transform (cutoff pre-warped).
fn butterworth(pass: Pass, order: usize, fc: f64, fs: f64) -> Vec<Biquad> {
    let mut out = Vec::new();
    let w0 = 2.0 * PI * fc / fs;
    let (sin, cos) = w0.sin_cos();
    for k in 0..order / 2 {
        let q = 1.0 / (2.0 * ((2 * k + 1) as f64 * PI / (2 * order) as f64).cos());
        let alpha = sin / (2.0 * q);
        let a = [1.0 + alpha, -2.0 * cos, 1.0 - alpha];
        let b = match pass {
            Pass::Low => [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0],
            Pass::High => [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0],
        };
        out.push(Biquad::normalized(b, a));
    }
    if order % 2 == 1 {
        let kk = (w0 / 2.0).tan();
        let a = [1.0 + kk, kk - 1.0, 0.0];
        let b = match pass {
            Pass::Low => [kk, kk, 0.0],
            Pass::High => [1.0, -1.0, 0.0],
        };
        out.push(Biquad::normalized(b, a));
    }
    out
}

fn notch(f0: f64, q: f64, fs: f64) -> Biquad {
    let w0 = 2.0 * PI * f0 / fs;
    let (sin, cos) = w0.sin_cos();
    let alpha = sin / (2.0 * q);
    Biquad::normalized([1.0, -2.0 * cos, 1.0], [1.0 + alpha, -2.0 * cos, 1.0 - alpha])
}

fn design(cfg: &FilterConfig, fs: f64) -> Result<Vec<Biquad>> {
    if !(cfg.low_hz > 0.0 && cfg.low_hz < cfg.high_hz) {
        return Err(CoreError::Config(format!(
            "band edges must satisfy 0 < low < high, got {} and {}",
            cfg.low_hz, cfg.high_hz
        )));
    }
    if fs <= 2.0 * cfg.high_hz {
        return Err(CoreError::Config(format!(
            "sampling rate {fs} Hz cannot carry a {} Hz band edge",
            cfg.high_hz
        )));
    }
    if cfg.order == 0 {
        return Err(CoreError::Config("filter order must be at least 1".into()));
    }
    let mut sections = butterworth(Pass::High, cfg.order, cfg.low_hz, fs);
    sections.extend(butterworth(Pass::Low, cfg.order, cfg.high_hz, fs));
    if cfg.notch {
        let f0 = cfg.notch_hz;
        if !(f0 > 0.0 && 2.0 * f0 < fs && cfg.notch_q > 0.0) {
            return Err(CoreError::Config(format!(
                "notch at {f0} Hz (Q {}) is invalid for fs {fs}",
                cfg.notch_q
            )));
        }
        sections.push(notch(f0, cfg.notch_q, fs));
    }
    Ok(sections)
}

/// Burg estimate of the AR polynomial `[1, a1, .., ap]` of `x`.
fn burg(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    let mut f = x.to_vec();
    let mut b = x.to_vec();
    let mut a = vec![1.0];
    for m in 1..=order {
        let (mut num, mut den) = (0.0, 0.0);
        for i in m..n {
            num += f[i] * b[i - 1];
            den += f[i] * f[i] + b[i - 1] * b[i - 1];
        }
        if den <= f64::MIN_POSITIVE {
            break;
        }
        let k = -2.0 * num / den;
        for i in (m..n).rev() {
            let (fi, bi) = (f[i], b[i - 1]);
            f[i] = fi + k * bi;
            b[i] = bi + k * fi;
        }
        let prev = a.clone();
        a.push(0.0);
        for j in 1..=m {
            a[j] = prev.get(j).copied().unwrap_or(0.0) + k * prev[m - j];
        }
    }
    a
}

/// `len` samples continuing `x` past its end, predicted by an AR model
/// fitted to the tail of the signal.
fn extrapolate(x: &[f64], len: usize, fit_len: usize) -> Vec<f64> {
    const ORDER: usize = 16;
    let tail = &x[x.len().saturating_sub(fit_len)..];
    if tail.len() < 4 * ORDER {
        let n = x.len();
        return (1..=len).map(|i| 2.0 * x[n - 1] - x[n - 1 - i.min(n - 1)]).collect();
    }
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let centred: Vec<f64> = tail.iter().map(|v| v - mean).collect();
    let a = burg(&centred, ORDER);
    let p = a.len() - 1;
    let mut hist = centred[centred.len() - p..].to_vec();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let next = -(1..=p).map(|k| a[k] * hist[hist.len() - k]).sum::<f64>();
        hist.push(next);
        out.push(next + mean);
    }
    out
}

/// Forward-backward filtering of one channel.
///
/// The signal is extended at both ends by one second (at most its own
/// length) of autoregressive prediction and every section starts from its
/// steady state, which keeps edge transients of the narrow notch small.
pub fn filter_signal(x: &[f64], fs: f64, cfg: &FilterConfig) -> Result<Vec<f64>> {
    let sections = design(cfg, fs)?;
    let n = x.len();
    if n < 2 {
        return Ok(vec![0.0; n]);
    }
    let pad = (fs.round() as usize).min(n - 1);
    let fit_len = (2.0 * fs).round() as usize;
    let reversed: Vec<f64> = x.iter().rev().copied().collect();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend(extrapolate(&reversed, pad, fit_len).into_iter().rev());
    ext.extend_from_slice(x);
    ext.extend(extrapolate(x, pad, fit_len));
    for s in &sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in &sections {
        s.run(&mut ext);
    }
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Filter every channel of a record; the input is left untouched.
pub fn bandpass_filter(record: &EcgRecord, cfg: &FilterConfig) -> Result<EcgRecord> {
    let channels = record
        .channels
        .iter()
        .map(|c| filter_signal(c, record.fs, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(EcgRecord {
        channels,
        ..record.clone()
    })
}
