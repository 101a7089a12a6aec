use std::f64::consts::PI;

use cardio_core::signal::synth::{synthesize_ecg, AnomalyKind, AnomalySpec, Param, SynthesisSpec};
use cardio_core::signal::{
    bandpass_filter, detect_r_peaks, extract_trend, filter_signal, segment_beats, EcgRecord, FilterConfig,
    GlobalSignal, RPeakConfig, TrendConfig,
};
use proptest::prelude::*;

const FS: f64 = 500.0;

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Amplitude of the `f` Hz component by direct projection.
fn dft_amplitude(x: &[f64], f: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let w = 2.0 * PI * f * i as f64 / FS;
        re += v * w.cos();
        im -= v * w.sin();
    }
    2.0 * (re * re + im * im).sqrt() / x.len() as f64
}

fn clean_spec(hr: f64) -> SynthesisSpec {
    SynthesisSpec {
        heart_rate: Param::Fixed(hr),
        hrv: 0.0,
        ..Default::default()
    }
}

#[test]
fn high_frequency_component_attenuated() {
    let x: Vec<f64> = (0..5000)
        .map(|i| {
            let t = i as f64 / FS;
            (2.0 * PI * t).sin() + (2.0 * PI * 120.0 * t).sin()
        })
        .collect();
    let y = filter_signal(&x, FS, &FilterConfig::default()).unwrap();
    let before = dft_amplitude(&x, 120.0);
    let after = dft_amplitude(&y, 120.0);
    assert!(20.0 * (before / after).log10() >= 20.0, "{before} -> {after}");
    // the 1 Hz component sits in the passband
    assert!((dft_amplitude(&y, 1.0) - 1.0).abs() < 0.05);
}

#[test]
fn baseline_drift_removed() {
    let spec = SynthesisSpec {
        baseline_wander: Param::Fixed(0.5),
        ..clean_spec(70.0)
    };
    let mut rec = synthesize_ecg(&spec, 11).unwrap().record;
    for (i, v) in rec.channels[0].iter_mut().enumerate() {
        *v += 0.8 + 0.05 * i as f64 / FS;
    }
    let out = bandpass_filter(&rec, &FilterConfig::default()).unwrap();
    let mean = out.channels[0].iter().sum::<f64>() / 5000.0;
    assert!(mean.abs() < 0.05, "{mean}");
}

#[test]
fn passband_signal_nearly_unchanged() {
    let x: Vec<f64> = (0..5000)
        .map(|i| {
            let t = i as f64 / FS;
            (2.0 * PI * 5.0 * t).sin() + 0.5 * (2.0 * PI * 12.0 * t + 1.0).sin() + 0.3 * (2.0 * PI * 20.0 * t).cos()
        })
        .collect();
    let y = filter_signal(&x, FS, &FilterConfig::default()).unwrap();
    assert!((rms(&y) / rms(&x) - 1.0).abs() < 0.01);
}

#[test]
fn peaks_match_generator_at_60_bpm() {
    let syn = synthesize_ecg(&clean_spec(60.0), 5).unwrap();
    let sig = syn.record.global_signal(5000);
    let peaks = detect_r_peaks(&sig, &RPeakConfig::default());
    assert_eq!(peaks.len(), 10);
    for (p, t) in peaks.iter().zip(&syn.r_peaks) {
        assert!(p.abs_diff(*t) <= 3, "{p} vs {t}");
    }
}

#[test]
fn dropped_beat_leaves_a_pause() {
    let spec = SynthesisSpec {
        anomaly: vec![AnomalySpec {
            kind: AnomalyKind::DroppedBeat,
            beats: [5, 5],
            magnitude: None,
        }],
        ..clean_spec(60.0)
    };
    let syn = synthesize_ecg(&spec, 2).unwrap();
    let peaks = detect_r_peaks(&syn.record.global_signal(5000), &RPeakConfig::default());
    assert_eq!(peaks.len(), 9);
    let mut rr: Vec<usize> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
    let max = *rr.iter().max().unwrap();
    rr.sort();
    let median = rr[rr.len() / 2] as f64;
    assert!(max as f64 > 1.5 * median);
}

#[test]
fn peak_recall_over_random_clean_records() {
    let spec = SynthesisSpec::default();
    let (mut found, mut total) = (0usize, 0usize);
    for seed in 0..200 {
        let syn = synthesize_ecg(&spec, 1000 + seed).unwrap();
        let peaks = detect_r_peaks(&syn.record.global_signal(5000), &RPeakConfig::default());
        for t in &syn.r_peaks {
            total += 1;
            if peaks.iter().any(|p| p.abs_diff(*t) <= 3) {
                found += 1;
            }
        }
        for w in peaks.windows(2) {
            assert!(w[1] - w[0] >= 100);
        }
    }
    assert!(found as f64 >= 0.95 * total as f64, "{found}/{total}");
}

#[test]
fn st_shift_mask_confined_to_st_segments() {
    let spec = SynthesisSpec {
        anomaly: vec![AnomalySpec {
            kind: AnomalyKind::StShift,
            beats: [4, 6],
            magnitude: Some(0.3),
        }],
        ..clean_spec(60.0)
    };
    let clean = synthesize_ecg(&clean_spec(60.0), 9).unwrap();
    let syn = synthesize_ecg(&spec, 9).unwrap();
    let mask = syn.record.anomaly_mask.as_ref().unwrap();
    // oracle: the injection is exactly the difference from the clean record
    let diff: Vec<bool> = syn.record.channels[0]
        .iter()
        .zip(&clean.record.channels[0])
        .map(|(a, b)| (a - b).abs() > 1e-12)
        .collect();
    for i in 0..5000 {
        if diff[i] {
            assert_eq!(mask[i], 1, "sample {i} altered outside mask");
        }
    }
    // three separate spans, each after its beat's R peak and before the next
    let mut spans = Vec::new();
    let mut i = 0;
    while i < 5000 {
        if mask[i] == 1 {
            let s = i;
            while i < 5000 && mask[i] == 1 {
                i += 1;
            }
            spans.push((s, i));
        }
        i += 1;
    }
    assert_eq!(spans.len(), 3);
    for ((s, e), k) in spans.iter().zip(4..=6) {
        let r = syn.r_peaks[k];
        assert!(*s > r && *e < syn.r_peaks[k + 1], "{s}..{e} around {r}");
    }
    assert_eq!(syn.record.labels.as_deref(), Some(&["st_shift".to_string()][..]));
}

/// Direct smoothing-then-difference with explicit edge replication.
fn trend_oracle(x: &[f64], w: usize, lag: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let left = ((w - 1) / 2) as isize;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for j in i - left..i - left + w as isize {
                acc += x[j.clamp(0, n - 1) as usize];
            }
            acc / w as f64
        })
        .collect();
    let mut out: Vec<f64> = (0..x.len())
        .map(|i| if i >= lag { smooth[i] - smooth[i - lag] } else { 0.0 })
        .collect();
    let head = out[lag];
    for v in out.iter_mut().take(lag) {
        *v = head;
    }
    out
}

#[test]
fn trend_matches_direct_oracle() {
    let syn = synthesize_ecg(&SynthesisSpec::default(), 21).unwrap();
    let sig = syn.record.global_signal(5000);
    for (w, lag) in [(25, 1), (10, 3), (1, 1)] {
        let t = extract_trend(&sig, &TrendConfig { avg_window: w, diff_window: lag }).unwrap();
        assert_eq!(t.values, trend_oracle(&sig.values, w, lag));
    }
}

#[test]
fn beats_cover_their_peaks_in_order() {
    let syn = synthesize_ecg(&SynthesisSpec::default(), 4).unwrap();
    let sig = syn.record.global_signal(5000);
    let peaks = detect_r_peaks(&sig, &RPeakConfig::default());
    let beats = segment_beats(&sig, &peaks, 500);
    assert_eq!(beats.len(), peaks.len());
    for (b, p) in beats.iter().zip(&peaks) {
        assert!(b.frame_range(5000).contains(p));
        assert_eq!(b.values[(*p as isize - b.origin) as usize], sig.values[*p]);
    }
    assert!(beats.windows(2).all(|w| w[0].origin <= w[1].origin));
}

#[test]
fn record_filter_keeps_metadata() {
    let syn = synthesize_ecg(&SynthesisSpec::default(), 3).unwrap();
    let out = bandpass_filter(&syn.record, &FilterConfig::default()).unwrap();
    let EcgRecord { record_id, attributes, labels, anomaly_mask, .. } = out;
    assert_eq!(record_id, syn.record.record_id);
    assert_eq!(attributes, syn.record.attributes);
    assert_eq!(labels, syn.record.labels);
    assert_eq!(anomaly_mask, syn.record.anomaly_mask);
}

proptest! {
    #[test]
    fn trend_is_linear(
        xs in prop::collection::vec(-5.0f64..5.0, 300),
        ys in prop::collection::vec(-5.0f64..5.0, 300),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let cfg = TrendConfig::default();
        let tr = |v: Vec<f64>| extract_trend(&GlobalSignal::new(v, FS), &cfg).unwrap().values;
        let combo: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
        let lhs = tr(combo);
        let (tx, ty) = (tr(xs), tr(ys));
        for i in 0..300 {
            prop_assert!((lhs[i] - (a * tx[i] + b * ty[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn synthesis_is_deterministic(seed in 0u64..1000) {
        let spec = SynthesisSpec { anomaly_rate: 0.5, ..Default::default() };
        prop_assert_eq!(synthesize_ecg(&spec, seed).unwrap(), synthesize_ecg(&spec, seed).unwrap());
    }
}
