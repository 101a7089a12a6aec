use cardio_autodiff::gradcheck::check_inputs;
use cardio_autodiff::{Graph, Tensor};
use cardio_core::losses::{graph, loss_ad, loss_cls, loss_pred, loss_res, loss_trend, AsymmetricLossConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bce_oracle(y: &[f64], p: &[f64]) -> f64 {
    y.iter()
        .zip(p)
        .map(|(t, q)| -(t * q.ln() + (1.0 - t) * (1.0 - q).ln()))
        .sum()
}

#[test]
fn cls_reduces_to_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let got = loss_cls(&y, &p, &AsymmetricLossConfig::bce()).unwrap();
        assert!((got - bce_oracle(&y, &p)).abs() <= 1e-10);
    }
}

#[test]
fn trend_and_pred_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<f64> = (0..500).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..500).map(|_| rng.random_range(-2.0..2.0)).collect();
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let dot: f64 = d.iter().map(|v| v * v).sum();
    assert!((loss_trend(&a, &b).unwrap() - dot).abs() < 1e-10);
    let t = &a[..7];
    let th = &b[..7];
    let mse = t.iter().zip(th).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 7.0;
    assert!((loss_pred(t, th).unwrap() - mse).abs() < 1e-14);
}

#[test]
fn composite_is_additive() {
    let (r, t, p) = (-3.25, 1.5, 0.125);
    assert_eq!(loss_ad(r, t, p, 0.0, 0.0), r);
    assert_eq!(loss_ad(r, t, p, 1.0, 1.0), r + t + p);
    let l1 = loss_ad(r, t, p, 1.0, 1.0);
    let l2 = loss_ad(r, t, p, 2.0, 1.0);
    let l3 = loss_ad(r, t, p, 3.0, 1.0);
    assert_eq!(l2 - l1, l3 - l2);
}

#[test]
fn sigma_derivative_changes_sign_at_squared_error() {
    let e = 0.8f64;
    let star = e * e;
    let f = |s: f64| loss_res(&[e], &[0.0], &[s], &[], &[], &[]).unwrap();
    let h = 1e-6;
    let slope = |s: f64| (f(s + h) - f(s - h)) / (2.0 * h);
    assert!(slope(star * 0.9) < 0.0);
    assert!(slope(star * 1.1) > 0.0);
    assert!(slope(star).abs() < 1e-6);
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vec = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let x = vec(12, -1.0, 1.0);
        let xh = vec(12, -1.0, 1.0);
        let s = vec(12, 0.2, 2.0);
        let t = vec(7, -1.0, 1.0);
        let th = vec(7, -1.0, 1.0);
        let probs = vec(6, 0.08, 0.95);
        let y: Vec<f64> = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0].to_vec();

        let xc = x.clone();
        let rep = check_inputs(
            &[Tensor::vector(xh.clone()), Tensor::vector(s.clone())],
            |g, v| Ok(graph::restoration(g, &xc, v[0], Some(v[1])).unwrap()),
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "res seed {seed}: {:?}", rep.worst());

        let tc = t.clone();
        let rep = check_inputs(&[Tensor::vector(th)], |g, v| Ok(graph::pred(g, &tc, v[0]).unwrap()), 1e-5).unwrap();
        assert!(rep.passes(1e-4), "pred seed {seed}");

        let rep = check_inputs(
            &[Tensor::vector(x.clone())],
            |g, v| Ok(graph::trend(g, &xh, v[0]).unwrap()),
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "trend seed {seed}");

        for cfg in [AsymmetricLossConfig::default(), AsymmetricLossConfig { gamma_pos: 1.0, gamma_neg: 2.0, tau: 0.0 }] {
            let yc = y.clone();
            let rep = check_inputs(
                &[Tensor::vector(probs.clone())],
                |g, v| Ok(graph::cls(g, &yc, v[0], &cfg).unwrap()),
                1e-5,
            )
            .unwrap();
            assert!(rep.passes(1e-4), "cls seed {seed}: {:?}", rep.worst());
        }

        let rep = check_inputs(
            &[Tensor::scalar(0.3), Tensor::scalar(-1.2), Tensor::scalar(2.0)],
            |g, v| Ok(graph::ad(g, v[0], v[1], v[2], 0.7, 1.3).unwrap()),
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-4));
    }
}

#[test]
fn graph_cls_handles_sub_margin_negatives() {
    let mut g = Graph::new();
    let p = g.input(Tensor::vector(vec![0.03]));
    let l = graph::cls(&mut g, &[0.0], p, &AsymmetricLossConfig::default()).unwrap();
    assert_eq!(g.item(l).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn cls_monotone(p in 0.1f64..0.85, dp in 0.01f64..0.1) {
        let cfg = AsymmetricLossConfig::default();
        let pos_lo = loss_cls(&[1.0], &[p], &cfg).unwrap();
        let pos_hi = loss_cls(&[1.0], &[p + dp], &cfg).unwrap();
        prop_assert!(pos_hi < pos_lo);
        let neg_lo = loss_cls(&[0.0], &[p], &cfg).unwrap();
        let neg_hi = loss_cls(&[0.0], &[p + dp], &cfg).unwrap();
        prop_assert!(neg_hi > neg_lo);
    }

    #[test]
    fn non_residual_losses_nonnegative(a in prop::collection::vec(-3.0f64..3.0, 5), b in prop::collection::vec(-3.0f64..3.0, 5)) {
        prop_assert!(loss_trend(&a, &b).unwrap() >= 0.0);
        prop_assert!(loss_pred(&a, &b).unwrap() >= 0.0);
    }
}
