use cardio_core::masking::{make_pair, mask_global, mask_local, select_training_beat, MaskConfig, MaskKind};
use cardio_core::signal::{GlobalSignal, LocalBeat};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn signal(n: usize) -> GlobalSignal {
    GlobalSignal::new((0..n).map(|i| (i as f64 * 0.01).sin() + 2.0).collect(), 500.0)
}

#[test]
fn local_span_stays_inside_beat() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let beat = LocalBeat {
        values: vec![1.0; 500],
        origin: 100,
    };
    for _ in 0..10_000 {
        let (m, d) = mask_local(&beat, 0.5, &mut rng).unwrap();
        assert_eq!(d.kind, MaskKind::ContiguousLocal);
        assert_eq!(d.masked_indices.len(), 250);
        assert!(*d.masked_indices.last().unwrap() < 500);
        let masked = d.indicator(500);
        for (v, w) in m.values.iter().zip(&masked) {
            // each sample is either masked (fill) or untouched, never both
            assert_eq!(*w == 1.0, *v == 0.0);
        }
    }
}

#[test]
fn beat_selection_is_uniform() {
    let beats: Vec<LocalBeat> = (0..10)
        .map(|k| LocalBeat {
            values: vec![k as f64; 4],
            origin: k * 10,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 10];
    for _ in 0..10_000 {
        let b = select_training_beat(&beats, &mut rng).unwrap();
        counts[b.values[0] as usize] += 1;
    }
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - 1000.0).powi(2) / 1000.0).sum();
    // 99.9th percentile of chi-square with 9 degrees of freedom
    assert!(chi2 < 27.88, "{chi2}");
    assert!(counts.iter().all(|c| c.abs_diff(1000) <= 150), "{counts:?}");
}

#[test]
fn single_beat_is_selected() {
    let beats = vec![LocalBeat {
        values: vec![1.0],
        origin: 0,
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(select_training_beat(&beats, &mut rng), Some(&beats[0]));
    assert!(select_training_beat(&[], &mut rng).is_none());
}

#[test]
fn same_seed_same_masks() {
    let s = signal(5000);
    let a = mask_global(&s, 0.3, 50, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = mask_global(&s, 0.3, 50, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn patches_disjoint_and_restorable(seed in 0u64..10_000, ratio in 0.02f64..0.6, patch in 5usize..80) {
        let s = signal(2000);
        prop_assume!(ratio * 2000.0 >= patch as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut masked, d) = mask_global(&s, ratio, patch, &mut rng).unwrap();
        let k = (ratio * 2000.0 / patch as f64).ceil() as usize;
        prop_assert_eq!(d.masked_indices.len(), k * patch);
        prop_assert!(d.masked_indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!((d.mask_ratio * 2000.0 - d.masked_indices.len() as f64).abs() <= 1.0);
        for &i in &d.masked_indices {
            prop_assert_eq!(masked.values[i], 0.0);
        }
        d.restore(&mut masked.values, &s.values);
        prop_assert_eq!(masked.values, s.values);
    }

    #[test]
    fn pair_keeps_clean_copies(seed in 0u64..1000) {
        let s = signal(5000);
        let beats = vec![LocalBeat { values: s.values[100..600].to_vec(), origin: 100 }];
        let p = make_pair(&s, &beats, &MaskConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&p.global_clean, &s);
        let local = p.local.unwrap();
        prop_assert_eq!(&local.clean, &beats[0]);
        prop_assert_eq!(local.masked.origin, 100);
    }
}
