//! Test-time score maps: a global term over the whole strip plus local terms
//! placed at each beat window.

use std::fmt::Write as _;

use cardio_autodiff::ParamStore;

use crate::error::{CoreError, Result};
use crate::model::{ModelInput, RestorationModel, RestorationOutput};
use crate::prepare::PreparedRecord;

/// Per-sample anomaly scores for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// `global_part + local_part`.
    pub values: Vec<f64>,
    pub global_part: Vec<f64>,
    pub local_part: Vec<f64>,
    /// Mean of `values`.
    pub anomaly_score: f64,
    pub beat_count: usize,
    /// Set when no beats were found and only the global term is present.
    pub unsegmentable: bool,
}

impl ScoreMap {
    pub fn new(global_part: Vec<f64>, local_part: Vec<f64>, beat_count: usize) -> Result<Self> {
        if global_part.len() != local_part.len() {
            return Err(CoreError::Contract(format!(
                "score parts differ in length: {} vs {}",
                global_part.len(),
                local_part.len()
            )));
        }
        let values: Vec<f64> = global_part.iter().zip(&local_part).map(|(g, l)| g + l).collect();
        let anomaly_score = values.iter().sum::<f64>() / values.len().max(1) as f64;
        Ok(Self {
            values,
            global_part,
            local_part,
            anomaly_score,
            beat_count,
            unsegmentable: beat_count == 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    match sigma.iter().find(|s| !(**s > 0.0)) {
        Some(s) => Err(CoreError::Contract(format!("uncertainty must be positive, got {s}"))),
        None => Ok(()),
    }
}

/// `(x - x_hat)^2 / sigma + (x - x_hat_t)^2`; the trend term is dropped when
/// there is no trend reconstruction.
pub fn score_global(x: &[f64], x_hat: &[f64], sigma: &[f64], x_hat_t: Option<&[f64]>) -> Result<Vec<f64>> {
    let n = x.len();
    if x_hat.len() != n || sigma.len() != n || x_hat_t.is_some_and(|t| t.len() != n) {
        return Err(CoreError::Contract("global score inputs differ in length".into()));
    }
    check_sigma(sigma)?;
    Ok((0..n)
        .map(|i| {
            let e = x[i] - x_hat[i];
            let t = x_hat_t.map_or(0.0, |t| (x[i] - t[i]).powi(2));
            e * e / sigma[i] + t
        })
        .collect())
}

/// One beat's contribution to the local score map.
#[derive(Debug, Clone, Copy)]
pub struct BeatScore<'a> {
    pub x: &'a [f64],
    pub x_hat: &'a [f64],
    pub sigma: &'a [f64],
    /// Frame position of `x[0]`; may be negative for clipped beats.
    pub origin: isize,
}

/// Sum of each beat's weighted squared error placed at its window in a
/// frame of `frame_len` samples. Overlapping windows add.
pub fn score_local(frame_len: usize, beats: &[BeatScore<'_>]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; frame_len];
    for b in beats {
        let d = b.x.len();
        if b.x_hat.len() != d || b.sigma.len() != d {
            return Err(CoreError::Contract("beat score inputs differ in length".into()));
        }
        if b.origin <= -(d as isize) || b.origin >= frame_len as isize {
            return Err(CoreError::Contract(format!(
                "beat origin {} leaves no overlap with a {frame_len}-sample frame",
                b.origin
            )));
        }
        check_sigma(b.sigma)?;
        for k in 0..d {
            let t = b.origin + k as isize;
            if t >= 0 && (t as usize) < frame_len {
                let e = b.x[k] - b.x_hat[k];
                out[t as usize] += e * e / b.sigma[k];
            }
        }
    }
    Ok(out)
}

/// Score one prepared record with unmasked inputs. The global pass pairs
/// the strip with its first beat; every beat then gets its own local pass.
pub fn assemble_with_output(
    model: &RestorationModel,
    store: &ParamStore,
    rec: &PreparedRecord,
) -> Result<(ScoreMap, RestorationOutput)> {
    let c = model.config.components;
    let x = &rec.global.values;
    let first = rec.beats.first().map(|b| b.values.as_slice());
    let out = model.infer(
        store,
        ModelInput {
            global: x,
            local: if c.multiscale { first } else { None },
            trend: if c.trend { Some(&rec.trend) } else { None },
        },
    )?;
    let s_g = score_global(x, &out.global_recon, &out.sigma_g, out.trend_recon.as_deref())?;
    let (s_l, beat_count) = if c.multiscale {
        let views: Vec<&[f64]> = rec.beats.iter().map(|b| b.values.as_slice()).collect();
        let recon = model.infer_beats(store, x, &views)?;
        let inputs: Vec<BeatScore<'_>> = rec
            .beats
            .iter()
            .zip(&recon)
            .map(|(b, (xh, s))| BeatScore {
                x: &b.values,
                x_hat: xh,
                sigma: s,
                origin: b.origin,
            })
            .collect();
        (score_local(x.len(), &inputs)?, rec.beats.len())
    } else {
        (vec![0.0; x.len()], rec.beats.len())
    };
    let mut map = ScoreMap::new(s_g, s_l, beat_count)?;
    map.unsegmentable = rec.beats.is_empty();
    Ok((map, out))
}

pub fn assemble(model: &RestorationModel, store: &ParamStore, rec: &PreparedRecord) -> Result<ScoreMap> {
    assemble_with_output(model, store, rec).map(|(m, _)| m)
}

/// 1 where the score reaches `threshold`.
pub fn binarize(map: &ScoreMap, threshold: f64) -> Vec<u8> {
    map.values.iter().map(|v| u8::from(*v >= threshold)).collect()
}

/// Mean plus two standard deviations of all score values pooled over
/// normal records.
pub fn localization_threshold(normal_maps: &[&ScoreMap]) -> Result<f64> {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for m in normal_maps {
        for v in &m.values {
            n += 1;
            sum += v;
            sq += v * v;
        }
    }
    if n < 2 {
        return Err(CoreError::UndefinedMetric("no normal score values for a threshold".into()));
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    Ok(mean + 2.0 * var.sqrt())
}

/// Fraction of the top-decile score positions that fall inside `mask`,
/// divided by the mask's share of the record.
pub fn top_decile_enrichment(map: &ScoreMap, mask: &[u8]) -> Option<f64> {
    let n = map.len();
    let positives = mask.iter().filter(|m| **m != 0).count();
    if n == 0 || positives == 0 || mask.len() != n {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map.values[b].total_cmp(&map.values[a]).then(a.cmp(&b)));
    let k = n.div_ceil(10);
    let hits = order[..k].iter().filter(|&&i| mask[i] != 0).count();
    Some((hits as f64 / k as f64) / (positives as f64 / n as f64))
}

/// CSV with columns `index,S,S_g,S_l,mask` (mask empty when unknown).
pub fn score_map_csv(map: &ScoreMap, mask: Option<&[u8]>) -> String {
    let mut s = String::with_capacity(map.len() * 48);
    s.push_str("index,S,S_g,S_l,mask\n");
    for i in 0..map.len() {
        let m = mask.and_then(|m| m.get(i)).map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{i},{:e},{:e},{:e},{m}",
            map.values[i], map.global_part[i], map.local_part[i]
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_hand_case() {
        let s = score_global(&[1.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], Some(&[1.0, 0.0])).unwrap();
        assert_eq!(s, vec![1.0, 0.0]);
        assert!(score_global(&[1.0], &[0.0], &[0.0], None).is_err());
    }

    #[test]
    fn local_unit_beat_at_origin() {
        let x = vec![1.0; 5];
        let z = vec![0.0; 5];
        let s1 = vec![1.0; 5];
        let s = score_local(
            12,
            &[BeatScore {
                x: &x,
                x_hat: &z,
                sigma: &s1,
                origin: 0,
            }],
        )
        .unwrap();
        assert_eq!(s, [vec![1.0; 5], vec![0.0; 7]].concat());
        assert_eq!(score_local(12, &[]).unwrap(), vec![0.0; 12]);
        let far = BeatScore {
            x: &x,
            x_hat: &z,
            sigma: &s1,
            origin: 12,
        };
        assert!(score_local(12, &[far]).is_err());
    }

    #[test]
    fn binarize_extremes() {
        let m = ScoreMap::new(vec![0.5, 2.0, 1.0], vec![0.0; 3], 0).unwrap();
        assert_eq!(binarize(&m, 3.0), vec![0, 0, 0]);
        assert_eq!(binarize(&m, 0.0), vec![1, 1, 1]);
        assert!(m.unsegmentable);
        assert!((m.anomaly_score - 3.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let m = ScoreMap::new(vec![1.0, 2.0], vec![0.5, 0.0], 1).unwrap();
        let csv = score_map_csv(&m, Some(&[0, 1]));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "index,S,S_g,S_l,mask");
        assert_eq!(lines[1], "0,1.5e0,1e0,5e-1,0");
    }

    #[test]
    fn enrichment_of_perfect_map() {
        let mut v = vec![0.0; 100];
        let mut mask = vec![0u8; 100];
        for i in 40..60 {
            v[i] = 1.0;
            mask[i] = 1;
        }
        let m = ScoreMap::new(v, vec![0.0; 100], 1).unwrap();
        assert!((top_decile_enrichment(&m, &mask).unwrap() - 5.0).abs() < 1e-12);
    }
}
