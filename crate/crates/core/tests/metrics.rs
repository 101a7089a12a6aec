use cardio_core::metrics::{
    auroc, bootstrap_ci, dice, mcnemar, operating_point, pre_at_recall, stratify, MetricReport, StratumKey,
};
use cardio_core::signal::AttributeVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pairwise_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(12..120);
    let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    l[0] = true;
    l[1] = false;
    // coarse grid to force ties
    let s = l
        .iter()
        .map(|&y| (rng.random_range(0..20) as f64 + if y { 4.0 } else { 0.0 }) / 8.0)
        .collect();
    (s, l)
}

#[test]
fn auroc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (s, l) = random_instance(&mut rng);
        assert!((auroc(&s, &l).unwrap() - pairwise_auroc(&s, &l)).abs() <= 1e-12);
    }
}

#[test]
fn youden_matches_exhaustive_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let (s, l) = random_instance(&mut rng);
        let p = l.iter().filter(|v| **v).count() as f64;
        let n = l.len() as f64 - p;
        let mut best_j = f64::MIN;
        let mut best_spec = 0.0;
        let mut cands = s.clone();
        cands.push(f64::INFINITY);
        for t in cands {
            let tp = s.iter().zip(&l).filter(|(v, y)| **v >= t && **y).count() as f64;
            let tn = s.iter().zip(&l).filter(|(v, y)| **v < t && !**y).count() as f64;
            let (se, sp) = (tp / p, tn / n);
            if se + sp > best_j + 1e-12 || ((se + sp - best_j).abs() <= 1e-12 && sp > best_spec) {
                best_j = se + sp;
                best_spec = sp;
            }
        }
        let op = operating_point(&s, &l).unwrap();
        assert!((op.sensitivity + op.specificity - best_j).abs() < 1e-12);
        assert_eq!(op.specificity, best_spec);
    }
}

#[test]
fn pre_at_recall_matches_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    for _ in 0..200 {
        let (s, l) = random_instance(&mut rng);
        let p = l.iter().filter(|v| **v).count();
        if p < 10 {
            assert!(pre_at_recall(&s, &l, 0.9).is_err());
            continue;
        }
        let mut ts = s.clone();
        ts.sort_by(|a, b| b.total_cmp(a));
        let t = ts
            .into_iter()
            .find(|t| s.iter().zip(&l).filter(|(v, y)| **v >= *t && **y).count() as f64 / p as f64 >= 0.9)
            .unwrap();
        let tp = s.iter().zip(&l).filter(|(v, y)| **v >= t && **y).count() as f64;
        let pp = s.iter().filter(|v| **v >= t).count() as f64;
        let got = pre_at_recall(&s, &l, 0.9).unwrap();
        assert_eq!(got.threshold, t);
        assert!((got.precision - tp / pp).abs() < 1e-12);
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn dice_matches_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let n = rng.random_range(1..300);
        let a: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let b: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.3))).collect();
        let sa: std::collections::HashSet<usize> = (0..n).filter(|i| a[*i] == 1).collect();
        let sb: std::collections::HashSet<usize> = (0..n).filter(|i| b[*i] == 1).collect();
        let expect = if sa.is_empty() && sb.is_empty() {
            1.0
        } else {
            2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
        };
        assert!((dice(&a, &b).unwrap() - expect).abs() < 1e-15);
    }
}

#[test]
fn mcnemar_exact_and_asymptotic_branches() {
    // b = 3, c = 9: exact two-sided binomial
    let mut a = vec![true; 3];
    a.extend(vec![false; 9]);
    let mut b = vec![false; 3];
    b.extend(vec![true; 9]);
    let exact: f64 = (0..=3u64)
        .map(|k| {
            let c: f64 = (0..k).map(|i| (12 - i) as f64 / (i + 1) as f64).product();
            c * 0.5f64.powi(12)
        })
        .sum::<f64>()
        * 2.0;
    assert!((mcnemar(&a, &b).unwrap() - exact).abs() < 1e-12);

    // b = 30, c = 10: chi-square with continuity correction, stat = 361/40
    let mut a = vec![true; 30];
    a.extend(vec![false; 10]);
    let mut b = vec![false; 30];
    b.extend(vec![true; 10]);
    let stat: f64 = 19.0 * 19.0 / 40.0;
    let expect = statrs::function::erf::erfc((stat / 2.0).sqrt());
    assert!((mcnemar(&a, &b).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn single_class_strata_are_flagged_not_dropped() {
    let attrs: Vec<AttributeVector> = (0..40)
        .map(|i| AttributeVector {
            sex: Some(u8::from(i % 2 == 0)),
            age: if i < 38 { Some(30.0 + i as f64) } else { None },
            ..Default::default()
        })
        .collect();
    let refs: Vec<&AttributeVector> = attrs.iter().collect();
    let labels: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
    let scores: Vec<f64> = (0..40).map(|i| f64::from(i % 4 == 0) + i as f64 * 0.01).collect();
    let by_sex = stratify(StratumKey::Sex, &refs, &scores, &labels);
    let female = by_sex.iter().find(|r| r.stratum.as_deref() == Some("female")).unwrap();
    assert!(female.auroc.is_none() && female.note.is_some());
    let male = by_sex.iter().find(|r| r.stratum.as_deref() == Some("male")).unwrap();
    assert_eq!(male.auroc, Some(1.0));
    let by_age = stratify(StratumKey::AgeDecade, &refs, &scores, &labels);
    assert!(by_age.iter().any(|r| r.stratum.as_deref() == Some("unknown")));
}

#[test]
fn bootstrap_interval_brackets_estimate() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let labels: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
    let scores: Vec<f64> = labels.iter().map(|&y| rng.random_range(0.0..1.0) + f64::from(y) * 0.5).collect();
    let point = auroc(&scores, &labels).unwrap();
    let r = MetricReport::binary("x", &scores, &labels, None).with_ci(&scores, &labels, 1000, 3);
    let (lo, hi) = r.auroc_ci.unwrap();
    assert!(lo < point && point < hi && hi - lo < 0.3);
    let again = bootstrap_ci(200, 1000, 3, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        auroc(&s, &l).ok()
    });
    assert_eq!(again, Some((lo, hi)));
}

proptest! {
    #[test]
    fn auroc_invariant_under_monotone_transform(
        raw in prop::collection::vec((0.0f64..10.0, any::<bool>()), 4..60)
    ) {
        let mut l: Vec<bool> = raw.iter().map(|r| r.1).collect();
        l[0] = true;
        l[1] = false;
        let s: Vec<f64> = raw.iter().map(|r| r.0).collect();
        let t: Vec<f64> = s.iter().map(|v| (v * 0.5).exp() + 3.0).collect();
        let flipped: Vec<f64> = s.iter().map(|v| -v).collect();
        let a = auroc(&s, &l).unwrap();
        prop_assert!((a - auroc(&t, &l).unwrap()).abs() < 1e-12);
        prop_assert!((a + auroc(&flipped, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dice_symmetric_and_bounded(a in prop::collection::vec(0u8..2, 1..80), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<u8> = a.iter().map(|_| u8::from(rng.random_bool(0.5))).collect();
        let d = dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }
}
