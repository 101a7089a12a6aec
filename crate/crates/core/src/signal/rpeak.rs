use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::GlobalSignal;

/// Parameters of the energy-envelope R-peak detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RPeakConfig {
    /// Moving-average length applied to the squared derivative, seconds.
    pub envelope_s: f64,
    /// Width of the centred rolling maximum that sets the threshold, seconds.
    pub window_s: f64,
    /// Threshold as a fraction of the rolling maximum.
    pub threshold_frac: f64,
    /// Lower bound on the threshold as a fraction of the envelope maximum.
    pub floor_frac: f64,
    pub refractory_s: f64,
}

impl Default for RPeakConfig {
    fn default() -> Self {
        Self {
            envelope_s: 0.1,
            window_s: 2.0,
            threshold_frac: 0.5,
            floor_frac: 0.1,
            refractory_s: 0.2,
        }
    }
}

fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let half = w / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + w - half).min(n);
            (prefix[b] - prefix[a]) / (b - a) as f64
        })
        .collect()
}

/// Maximum over `[i - half, i + half]` for every `i`.
fn rolling_max(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    let mut dq: VecDeque<usize> = VecDeque::new();
    let mut next = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let hi = (i + half).min(n - 1);
        while next <= hi {
            while dq.back().is_some_and(|&j| x[j] <= x[next]) {
                dq.pop_back();
            }
            dq.push_back(next);
            next += 1;
        }
        while dq.front().is_some_and(|&j| j + half < i) {
            dq.pop_front();
        }
        *o = x[dq[0]];
    }
    out
}

/// Sample indices of R peaks, strictly increasing and at least one
/// refractory period apart. Returns an empty list when the signal carries no
/// QRS-like energy.
pub fn detect_r_peaks(signal: &GlobalSignal, cfg: &RPeakConfig) -> Vec<usize> {
    let x = &signal.values;
    let n = x.len();
    let fs = signal.fs;
    if n < 3 || !(fs > 0.0) {
        return Vec::new();
    }
    let mut energy = vec![0.0; n];
    for i in 1..n - 1 {
        let d = (x[i + 1] - x[i - 1]) * 0.5 * fs;
        energy[i] = d * d;
    }
    let env = moving_average(&energy, ((cfg.envelope_s * fs).round() as usize).max(1));
    let peak_env = env.iter().cloned().fold(0.0, f64::max);
    if !(peak_env > 1e-12) || !peak_env.is_finite() {
        return Vec::new();
    }
    let local = rolling_max(&env, ((cfg.window_s * fs / 2.0).round() as usize).max(1));
    let floor = cfg.floor_frac * peak_env;

    let mut candidates: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        if env[i] > (cfg.threshold_frac * local[i]).max(floor) {
            let start = i;
            while i < n && env[i] > (cfg.threshold_frac * local[i]).max(floor) {
                i += 1;
            }
            let best = (start..i)
                .max_by(|&a, &b| x[a].total_cmp(&x[b]))
                .unwrap_or(start);
            candidates.push(best);
        } else {
            i += 1;
        }
    }

    let refractory = (cfg.refractory_s * fs).ceil() as usize;
    let mut peaks: Vec<usize> = Vec::with_capacity(candidates.len());
    for c in candidates {
        match peaks.last_mut() {
            Some(last) if c < *last + refractory => {
                if x[c] > x[*last] {
                    *last = c;
                }
            }
            _ => peaks.push(c),
        }
    }
    peaks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_signal_has_no_peaks() {
        let s = GlobalSignal::new(vec![0.0; 5000], 500.0);
        assert!(detect_r_peaks(&s, &RPeakConfig::default()).is_empty());
    }

    #[test]
    fn rolling_max_matches_naive() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
        let fast = rolling_max(&x, 7);
        for i in 0..x.len() {
            let a = i.saturating_sub(7);
            let b = (i + 7).min(x.len() - 1);
            let naive = x[a..=b].iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(fast[i], naive);
        }
    }

    #[test]
    fn spikes_are_found() {
        let mut x = vec![0.0; 5000];
        let truth: Vec<usize> = (0..10).map(|k| 250 + 500 * k).collect();
        for &p in &truth {
            for o in 0..=10usize {
                let v = 1.0 - o as f64 / 10.0;
                x[p + o] = v;
                x[p - o] = v;
            }
        }
        let peaks = detect_r_peaks(&GlobalSignal::new(x, 500.0), &RPeakConfig::default());
        assert_eq!(peaks, truth);
    }
}
