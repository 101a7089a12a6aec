use cardio_core::scoring::{binarize, score_global, score_local, BeatScore, ScoreMap};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn perfect_reconstruction_scores_zero() {
    let x = vec![0.3, -1.2, 4.0];
    assert_eq!(score_global(&x, &x, &[0.5; 3], Some(&x)).unwrap(), vec![0.0; 3]);
}

#[test]
fn sigma_scaling_divides_first_term() {
    let x = [1.0, -2.0, 0.5];
    let xh = [0.0, 0.0, 0.0];
    let a = score_global(&x, &xh, &[1.0; 3], None).unwrap();
    let b = score_global(&x, &xh, &[4.0; 3], None).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert_eq!(*v, u / 4.0);
    }
}

#[test]
fn overlapping_beats_add() {
    let ones = vec![1.0; 6];
    let zeros = vec![0.0; 6];
    let twos = vec![2.0; 6];
    let sig = vec![1.0; 6];
    let a = BeatScore { x: &ones, x_hat: &zeros, sigma: &sig, origin: 0 };
    let b = BeatScore { x: &twos, x_hat: &zeros, sigma: &sig, origin: 3 };
    let s = score_local(10, &[a, b]).unwrap();
    assert_eq!(s, vec![1.0, 1.0, 1.0, 5.0, 5.0, 5.0, 4.0, 4.0, 4.0, 0.0]);
}

#[test]
fn clipped_beats_only_touch_the_frame() {
    let ones = vec![1.0; 4];
    let zeros = vec![0.0; 4];
    let sig = vec![0.5; 4];
    let s = score_local(5, &[BeatScore { x: &ones, x_hat: &zeros, sigma: &sig, origin: -2 }]).unwrap();
    assert_eq!(s, vec![2.0, 2.0, 0.0, 0.0, 0.0]);
    let s = score_local(5, &[BeatScore { x: &ones, x_hat: &zeros, sigma: &sig, origin: 3 }]).unwrap();
    assert_eq!(s, vec![0.0, 0.0, 0.0, 2.0, 2.0]);
    assert!(score_local(5, &[BeatScore { x: &ones, x_hat: &zeros, sigma: &sig, origin: -4 }]).is_err());
}

#[test]
fn binarize_is_monotone_in_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..3.0)).collect();
    let m = ScoreMap::new(v, vec![0.0; 200], 1).unwrap();
    let max = m.values.iter().cloned().fold(0.0, f64::max);
    assert!(binarize(&m, max + 1.0).iter().all(|b| *b == 0));
    let lo = binarize(&m, 1.0);
    let hi = binarize(&m, 2.0);
    assert!(lo.iter().zip(&hi).all(|(l, h)| l >= h));
}

fn random_beats(rng: &mut ChaCha8Rng, n: usize, d: usize, frame: usize) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>, isize)> {
    (0..n)
        .map(|_| {
            let x = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xh = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = (0..d).map(|_| rng.random_range(0.1..2.0)).collect();
            let o = rng.random_range(-(d as i64) + 1..frame as i64) as isize;
            (x, xh, s, o)
        })
        .collect()
}

proptest! {
    #[test]
    fn map_is_sum_of_parts_and_nonnegative(seed in any::<u64>(), n in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = 120;
        let x: Vec<f64> = (0..frame).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xh: Vec<f64> = (0..frame).map(|_| rng.random_range(-2.0..2.0)).collect();
        let xt: Vec<f64> = (0..frame).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s: Vec<f64> = (0..frame).map(|_| rng.random_range(0.05..3.0)).collect();
        let beats = random_beats(&mut rng, n, 30, frame);
        let views: Vec<BeatScore> = beats.iter().map(|(a, b, c, o)| BeatScore { x: a, x_hat: b, sigma: c, origin: *o }).collect();
        let g = score_global(&x, &xh, &s, Some(&xt)).unwrap();
        let l = score_local(frame, &views).unwrap();
        let map = ScoreMap::new(g.clone(), l.clone(), n).unwrap();
        for i in 0..frame {
            prop_assert_eq!(map.values[i], g[i] + l[i]);
            prop_assert!(map.values[i] >= 0.0);
        }
        let mean = map.values.iter().sum::<f64>() / frame as f64;
        prop_assert_eq!(map.anomaly_score, mean);
    }

    #[test]
    fn beat_order_does_not_matter(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beats = random_beats(&mut rng, n, 25, 100);
        let views: Vec<BeatScore> = beats.iter().map(|(a, b, c, o)| BeatScore { x: a, x_hat: b, sigma: c, origin: *o }).collect();
        let mut shuffled = views.clone();
        shuffled.shuffle(&mut rng);
        let a = score_local(100, &views).unwrap();
        let b = score_local(100, &shuffled).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }
}
