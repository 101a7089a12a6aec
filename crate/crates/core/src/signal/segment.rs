use serde::{Deserialize, Serialize};

use super::{GlobalSignal, LocalBeat, TrendSignal};
use crate::error::{CoreError, Result};

/// Beat windows of `beat_len` samples centred on each peak. Samples falling
/// outside the record are zero.
pub fn segment_beats(signal: &GlobalSignal, r_peaks: &[usize], beat_len: usize) -> Vec<LocalBeat> {
    let n = signal.values.len() as isize;
    r_peaks
        .iter()
        .map(|&p| {
            let origin = p as isize - (beat_len / 2) as isize;
            let values = (0..beat_len as isize)
                .map(|k| {
                    let t = origin + k;
                    if (0..n).contains(&t) {
                        signal.values[t as usize]
                    } else {
                        0.0
                    }
                })
                .collect();
            LocalBeat { values, origin }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendConfig {
    pub avg_window: usize,
    pub diff_window: usize,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self {
            avg_window: 25,
            diff_window: 1,
        }
    }
}

/// Centred moving average with edge replication followed by a lagged
/// difference. The first `diff_window` outputs repeat the first defined
/// difference so the result keeps the input length.
pub fn extract_trend(signal: &GlobalSignal, cfg: &TrendConfig) -> Result<TrendSignal> {
    let x = &signal.values;
    let n = x.len();
    let (w, lag) = (cfg.avg_window, cfg.diff_window);
    if w == 0 || lag == 0 || w >= n || lag >= n {
        return Err(CoreError::Config(format!(
            "trend windows ({w}, {lag}) must be in [1, {n})"
        )));
    }
    let left = (w - 1) / 2;
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    let smooth: Vec<f64> = (0..n as isize)
        .map(|i| (0..w as isize).map(|k| at(i - left as isize + k)).sum::<f64>() / w as f64)
        .collect();
    let mut values = vec![0.0; n];
    for i in lag..n {
        values[i] = smooth[i] - smooth[i - lag];
    }
    let first = values[lag];
    values[..lag].fill(first);
    Ok(TrendSignal { values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(values: Vec<f64>) -> GlobalSignal {
        GlobalSignal::new(values, 500.0)
    }

    #[test]
    fn centred_window() {
        let s = sig((0..5000).map(|i| i as f64).collect());
        let beats = segment_beats(&s, &[2500], 500);
        assert_eq!(beats[0].origin, 2250);
        assert_eq!(beats[0].values[0], 2250.0);
        assert_eq!(beats[0].values[499], 2749.0);
    }

    #[test]
    fn boundary_beats_zero_padded() {
        let s = sig(vec![1.0; 5000]);
        let beats = segment_beats(&s, &[10, 4990], 500);
        assert_eq!(beats[0].origin, -240);
        assert!(beats[0].values[..240].iter().all(|v| *v == 0.0));
        assert!(beats[0].values[240..].iter().all(|v| *v == 1.0));
        assert!(beats[1].values[260..].iter().all(|v| *v == 0.0));
        assert_eq!(beats[1].len(), 500);
    }

    #[test]
    fn constant_and_ramp_trends() {
        let t = extract_trend(&sig(vec![3.0; 1000]), &TrendConfig::default()).unwrap();
        assert!(t.values.iter().all(|v| *v == 0.0));
        let t = extract_trend(&sig((0..1000).map(|i| 0.5 * i as f64).collect()), &TrendConfig::default()).unwrap();
        for v in &t.values[20..980] {
            assert!((v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn oversized_window_rejected() {
        let cfg = TrendConfig {
            avg_window: 100,
            diff_window: 1,
        };
        assert!(matches!(extract_trend(&sig(vec![0.0; 100]), &cfg), Err(CoreError::Config(_))));
    }
}
