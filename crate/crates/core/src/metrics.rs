//! Detection, localisation and fairness metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{CoreError, Result};
use crate::signal::AttributeVector;

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|l| **l).count();
    (pos, labels.len() - pos)
}

fn check_pair(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(CoreError::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CoreError::Numeric("NaN score".into()));
    }
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(CoreError::UndefinedMetric(format!(
            "need both classes, got {p} positive and {n} negative"
        )));
    }
    Ok((p, n))
}

/// Mann-Whitney estimate of P(score_pos > score_neg) + P(tie) / 2.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (p, n) = check_pair(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of positives, in doubled units to stay exact
    let mut rank_sum2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum2 += midrank2;
            }
        }
        i = j + 1;
    }
    let u2 = rank_sum2 - (p as u128) * (p as u128 + 1);
    Ok(u2 as f64 / (2.0 * p as f64 * n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Confusion counts when predicting positive for `score >= threshold`.
fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, *l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    (tp, fp, tn, fneg)
}

fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t.insert(0, f64::INFINITY);
    t
}

/// Threshold maximising sensitivity + specificity; ties go to the higher
/// specificity.
pub fn operating_point(scores: &[f64], labels: &[bool]) -> Result<OperatingPoint> {
    let (p, n) = check_pair(scores, labels)?;
    let mut best: Option<OperatingPoint> = None;
    for t in candidate_thresholds(scores) {
        let (tp, _, tn, _) = confusion(scores, labels, t);
        let op = OperatingPoint {
            threshold: t,
            sensitivity: tp as f64 / p as f64,
            specificity: tn as f64 / n as f64,
        };
        let j = op.sensitivity + op.specificity;
        let better = match &best {
            None => true,
            Some(b) => {
                let bj = b.sensitivity + b.specificity;
                j > bj + 1e-12 || ((j - bj).abs() <= 1e-12 && op.specificity > b.specificity)
            }
        };
        if better {
            best = Some(op);
        }
    }
    Ok(best.expect("at least one threshold"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtRecall {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision and F1 at the largest threshold whose recall reaches `target`.
pub fn pre_at_recall(scores: &[f64], labels: &[bool], target: f64) -> Result<PrecisionAtRecall> {
    let (p, _) = check_pair(scores, labels)?;
    if p < 10 {
        return Err(CoreError::UndefinedMetric(format!(
            "precision at recall needs at least 10 positives, got {p}"
        )));
    }
    for t in candidate_thresholds(scores) {
        let (tp, fp, _, _) = confusion(scores, labels, t);
        let recall = tp as f64 / p as f64;
        if recall >= target {
            let precision = tp as f64 / (tp + fp) as f64;
            return Ok(PrecisionAtRecall {
                threshold: t,
                precision,
                recall,
                f1: 2.0 * precision * recall / (precision + recall),
            });
        }
    }
    unreachable!("the lowest threshold has recall 1")
}

/// `2|A and B| / (|A| + |B|)`, 1 when both masks are empty.
pub fn dice(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(CoreError::Contract(format!(
            "dice of masks with {} and {} samples",
            pred.len(),
            truth.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        let (p, t) = (*p != 0, *t != 0);
        inter += usize::from(p && t);
        a += usize::from(p);
        b += usize::from(t);
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    })
}

/// Two-sided McNemar p-value for paired correctness vectors: exact binomial
/// below 25 discordant pairs, continuity-corrected chi-square otherwise.
pub fn mcnemar(correct_a: &[bool], correct_b: &[bool]) -> Result<f64> {
    if correct_a.len() != correct_b.len() {
        return Err(CoreError::Contract("McNemar inputs differ in length".into()));
    }
    let b = correct_a.iter().zip(correct_b).filter(|(a, b)| **a && !**b).count() as u64;
    let c = correct_a.iter().zip(correct_b).filter(|(a, b)| !**a && **b).count() as u64;
    let n = b + c;
    if n == 0 {
        return Ok(1.0);
    }
    if n < 25 {
        let dist = Binomial::new(0.5, n).expect("valid binomial");
        Ok((2.0 * dist.cdf(b.min(c))).min(1.0))
    } else {
        let stat = ((b as f64 - c as f64).abs() - 1.0).powi(2) / n as f64;
        let dist = ChiSquared::new(1.0).expect("valid chi-square");
        Ok(1.0 - dist.cdf(stat))
    }
}

/// 95% percentile interval of a statistic over bootstrap resamples of
/// `n` items. Resamples where the statistic is undefined are skipped.
pub fn bootstrap_ci<F>(n: usize, replicates: usize, seed: u64, statistic: F) -> Option<(f64, f64)>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut values = Vec::with_capacity(replicates);
    for _ in 0..replicates {
        for v in idx.iter_mut() {
            *v = rng.random_range(0..n);
        }
        if let Some(s) = statistic(&idx) {
            values.push(s);
        }
    }
    if values.len() < 2 {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let q = |p: f64| values[((values.len() - 1) as f64 * p).round() as usize];
    Some((q(0.025), q(0.975)))
}

/// Bootstrap interval of the AUROC over records.
pub fn auroc_ci(scores: &[f64], labels: &[bool], replicates: usize, seed: u64) -> Option<(f64, f64)> {
    bootstrap_ci(scores.len(), replicates, seed, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        auroc(&s, &l).ok()
    })
}

/// Binary detection summary. Metrics that are undefined for the given data
/// are `None` and the reason is kept in `note`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub stratum: Option<String>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auroc: Option<f64>,
    pub auroc_ci: Option<(f64, f64)>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub operating_threshold: Option<f64>,
    pub f1: Option<f64>,
    pub pre_at_90: Option<f64>,
    pub dice: Option<f64>,
    pub note: Option<String>,
}

impl MetricReport {
    /// Evaluate scores against binary labels. `threshold` fixes the operating
    /// point (e.g. one chosen on validation data); otherwise the Youden point
    /// on these data is used.
    pub fn binary(name: &str, scores: &[f64], labels: &[bool], threshold: Option<f64>) -> Self {
        let (n_pos, n_neg) = class_counts(labels);
        let mut r = Self {
            name: name.to_string(),
            stratum: None,
            n_pos,
            n_neg,
            auroc: None,
            auroc_ci: None,
            sensitivity: None,
            specificity: None,
            operating_threshold: None,
            f1: None,
            pre_at_90: None,
            dice: None,
            note: None,
        };
        match auroc(scores, labels) {
            Ok(a) => r.auroc = Some(a),
            Err(e) => {
                r.note = Some(e.to_string());
                return r;
            }
        }
        let op = match threshold {
            Some(t) => {
                let (tp, _, tn, _) = confusion(scores, labels, t);
                OperatingPoint {
                    threshold: t,
                    sensitivity: tp as f64 / n_pos as f64,
                    specificity: tn as f64 / n_neg as f64,
                }
            }
            None => operating_point(scores, labels).expect("both classes present"),
        };
        r.sensitivity = Some(op.sensitivity);
        r.specificity = Some(op.specificity);
        r.operating_threshold = Some(op.threshold);
        match pre_at_recall(scores, labels, 0.9) {
            Ok(p) => {
                r.pre_at_90 = Some(p.precision);
                r.f1 = Some(p.f1);
            }
            Err(e) => r.note = Some(e.to_string()),
        }
        r
    }

    pub fn with_ci(mut self, scores: &[f64], labels: &[bool], replicates: usize, seed: u64) -> Self {
        if self.auroc.is_some() {
            self.auroc_ci = auroc_ci(scores, labels, replicates, seed);
        }
        self
    }
}

/// Per-class AUROC over multi-label targets, and their macro mean over the
/// classes in `subset` whose AUROC is defined.
pub fn macro_auroc(probs: &[Vec<f64>], targets: &[Vec<f64>], subset: &[usize]) -> (Option<f64>, Vec<Option<f64>>) {
    let n_classes = probs.first().map_or(0, Vec::len);
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|k| {
            let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let l: Vec<bool> = targets.iter().map(|t| t[k] > 0.5).collect();
            auroc(&s, &l).ok()
        })
        .collect();
    let vals: Vec<f64> = subset.iter().filter_map(|&k| per_class.get(k).copied().flatten()).collect();
    let mean = if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    (mean, per_class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratumKey {
    Sex,
    AgeDecade,
}

impl StratumKey {
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "sex" => Ok(Self::Sex),
                "age" | "age_decade" => Ok(Self::AgeDecade),
                other => Err(CoreError::Config(format!("unknown stratum key {other:?}"))),
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sex => "sex",
            Self::AgeDecade => "age_decade",
        }
    }

    /// Stratum label of one record; `unknown` when the attribute is missing.
    pub fn stratum(self, attrs: &AttributeVector) -> String {
        match self {
            Self::Sex => match attrs.sex {
                Some(0) => "female".into(),
                Some(_) => "male".into(),
                None => "unknown".into(),
            },
            Self::AgeDecade => attrs
                .age_decade()
                .map_or_else(|| "unknown".into(), |d| format!("{d}-{}", d + 9)),
        }
    }
}

/// One report per stratum, in sorted stratum order. Single-class strata are
/// kept with undefined metrics.
pub fn stratify(key: StratumKey, attrs: &[&AttributeVector], scores: &[f64], labels: &[bool]) -> Vec<MetricReport> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, a) in attrs.iter().enumerate() {
        groups.entry(key.stratum(a)).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(name, idx)| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let mut r = MetricReport::binary(key.name(), &s, &l, None);
            r.stratum = Some(name);
            r
        })
        .collect()
}

/// Largest minus smallest defined AUROC across reports.
pub fn auroc_gap(reports: &[MetricReport]) -> Option<f64> {
    let vals: Vec<f64> = reports.iter().filter_map(|r| r.auroc).collect();
    if vals.len() < 2 {
        return None;
    }
    let max = vals.iter().cloned().fold(f64::MIN, f64::max);
    let min = vals.iter().cloned().fold(f64::MAX, f64::min);
    Some(max - min)
}

pub const REPORT_CSV_HEADER: &str = "name,stratum,n_pos,n_neg,auroc,auroc_ci_low,auroc_ci_high,sensitivity,specificity,threshold,f1,pre_at_90,dice,note";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

/// Reports as CSV with the fixed [`REPORT_CSV_HEADER`] columns.
pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut s = String::new();
    s.push_str(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.stratum.as_deref().unwrap_or(""),
            r.n_pos,
            r.n_neg,
            opt(r.auroc),
            opt(r.auroc_ci.map(|c| c.0)),
            opt(r.auroc_ci.map(|c| c.1)),
            opt(r.sensitivity),
            opt(r.specificity),
            opt(r.operating_threshold),
            opt(r.f1),
            opt(r.pre_at_90),
            opt(r.dice),
            r.note.as_deref().unwrap_or("").replace(',', ";"),
        );
    }
    s
}

/// Fixed-width text table of the main columns.
pub fn reports_table(reports: &[MetricReport]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "   -  ".to_string(), |x| format!("{x:.4}"));
    let mut s = format!(
        "{:<24} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
        "report", "pos", "neg", "AUROC", "sens", "spec", "F1", "Pre@90", "Dice"
    );
    for r in reports {
        let name = match &r.stratum {
            Some(st) => format!("{}:{}", r.name, st),
            None => r.name.clone(),
        };
        let _ = writeln!(
            s,
            "{:<24} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            name,
            r.n_pos,
            r.n_neg,
            f(r.auroc),
            f(r.sensitivity),
            f(r.specificity),
            f(r.f1),
            f(r.pre_at_90),
            f(r.dice)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_extremes() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(CoreError::UndefinedMetric(_))));
    }

    #[test]
    fn youden_on_separable_and_constant() {
        let op = operating_point(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!((op.sensitivity, op.specificity), (1.0, 1.0));
        let op = operating_point(&[0.3; 4], &[false, true, false, true]).unwrap();
        assert_eq!(op.sensitivity + op.specificity - 1.0, 0.0);
        assert_eq!(op.specificity, 1.0);
    }

    #[test]
    fn dice_hand_cases() {
        assert_eq!(dice(&[1, 1, 0], &[0, 1, 1]).unwrap(), 0.5);
        assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(dice(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn mcnemar_hand_cases() {
        let a = vec![true; 10];
        let b = vec![false; 10];
        assert!((mcnemar(&a, &b).unwrap() - 2.0 * 0.5f64.powi(10)).abs() < 1e-12);
        assert_eq!(mcnemar(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn strata_names() {
        let a = AttributeVector {
            age: Some(59.0),
            ..Default::default()
        };
        assert_eq!(StratumKey::AgeDecade.stratum(&a), "50-59");
        assert_eq!(StratumKey::Sex.stratum(&a), "unknown");
    }

    #[test]
    fn pre_at_90_perfect() {
        let scores: Vec<f64> = (0..20).map(f64::from).collect();
        let labels: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let p = pre_at_recall(&scores, &labels, 0.9).unwrap();
        assert_eq!(p.precision, 1.0);
        assert!((p.f1 - 2.0 * 0.9 / 1.9).abs() < 1e-12);
    }
}
