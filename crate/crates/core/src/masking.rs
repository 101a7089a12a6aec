//! Masked global/local training pairs: scattered patches over the whole
//! strip and one contiguous span inside a beat.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::signal::{GlobalSignal, LocalBeat};

pub const FILL_VALUE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub global_ratio: f64,
    pub local_ratio: f64,
    pub patch_len: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            global_ratio: 0.3,
            local_ratio: 0.5,
            patch_len: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    ScatteredGlobal,
    ContiguousLocal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskDescriptor {
    pub kind: MaskKind,
    /// Sorted, unique.
    pub masked_indices: Vec<usize>,
    /// Achieved fraction of masked samples.
    pub mask_ratio: f64,
}

impl MaskDescriptor {
    /// Copy `clean` values back into the masked positions of `masked`.
    pub fn restore(&self, masked: &mut [f64], clean: &[f64]) {
        for &i in &self.masked_indices {
            masked[i] = clean[i];
        }
    }

    /// Dense 0/1 indicator of length `len`.
    pub fn indicator(&self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        for &i in &self.masked_indices {
            v[i] = 1.0;
        }
        v
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(CoreError::Config(format!("mask ratio {ratio} outside (0, 1)")))
    }
}

/// Mask `ceil(ratio * D / patch_len)` disjoint patches placed uniformly at
/// random among all non-overlapping arrangements.
pub fn mask_global<R: Rng + ?Sized>(
    signal: &GlobalSignal,
    ratio: f64,
    patch_len: usize,
    rng: &mut R,
) -> Result<(GlobalSignal, MaskDescriptor)> {
    check_ratio(ratio)?;
    let n = signal.len();
    if patch_len == 0 || ratio * (n as f64) < patch_len as f64 {
        return Err(CoreError::Config(format!(
            "ratio {ratio} of {n} samples is shorter than one patch of {patch_len}"
        )));
    }
    let count = (ratio * n as f64 / patch_len as f64).ceil() as usize;
    let slack = n.checked_sub(count * patch_len).ok_or_else(|| {
        CoreError::Config(format!("{count} patches of {patch_len} do not fit in {n} samples"))
    })?;
    // stars and bars: sorted gaps give a uniform non-overlapping placement
    let mut gaps: Vec<usize> = (0..count).map(|_| rng.random_range(0..=slack)).collect();
    gaps.sort_unstable();
    let mut values = signal.values.clone();
    let mut masked_indices = Vec::with_capacity(count * patch_len);
    for (i, g) in gaps.into_iter().enumerate() {
        let start = g + i * patch_len;
        for j in start..start + patch_len {
            values[j] = FILL_VALUE;
            masked_indices.push(j);
        }
    }
    let desc = MaskDescriptor {
        kind: MaskKind::ScatteredGlobal,
        mask_ratio: masked_indices.len() as f64 / n as f64,
        masked_indices,
    };
    Ok((GlobalSignal::new(values, signal.fs), desc))
}

/// Mask one contiguous span of `ceil(ratio * d)` samples.
pub fn mask_local<R: Rng + ?Sized>(beat: &LocalBeat, ratio: f64, rng: &mut R) -> Result<(LocalBeat, MaskDescriptor)> {
    check_ratio(ratio)?;
    let n = beat.len();
    let span = ((ratio * n as f64).ceil() as usize).min(n);
    let start = rng.random_range(0..=n - span);
    let mut values = beat.values.clone();
    values[start..start + span].fill(FILL_VALUE);
    let desc = MaskDescriptor {
        kind: MaskKind::ContiguousLocal,
        masked_indices: (start..start + span).collect(),
        mask_ratio: span as f64 / n.max(1) as f64,
    };
    Ok((
        LocalBeat {
            values,
            origin: beat.origin,
        },
        desc,
    ))
}

/// Uniformly chosen beat, `None` for an unsegmentable record.
pub fn select_training_beat<'a, R: Rng + ?Sized>(beats: &'a [LocalBeat], rng: &mut R) -> Option<&'a LocalBeat> {
    if beats.is_empty() {
        None
    } else {
        Some(&beats[rng.random_range(0..beats.len())])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalPart {
    pub masked: LocalBeat,
    pub clean: LocalBeat,
    pub mask: MaskDescriptor,
}

/// Masked inputs and clean targets for one training step. `local` is absent
/// when the record has no detectable beats.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLocalPair {
    pub global: GlobalSignal,
    pub global_clean: GlobalSignal,
    pub global_mask: MaskDescriptor,
    pub local: Option<LocalPart>,
}

pub fn make_pair<R: Rng + ?Sized>(
    global: &GlobalSignal,
    beats: &[LocalBeat],
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<GlobalLocalPair> {
    let (masked, global_mask) = mask_global(global, cfg.global_ratio, cfg.patch_len, rng)?;
    let local = match select_training_beat(beats, rng) {
        Some(beat) => {
            let (m, mask) = mask_local(beat, cfg.local_ratio, rng)?;
            Some(LocalPart {
                masked: m,
                clean: beat.clone(),
                mask,
            })
        }
        None => None,
    };
    Ok(GlobalLocalPair {
        global: masked,
        global_clean: global.clone(),
        global_mask,
        local,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(n: usize) -> GlobalSignal {
        GlobalSignal::new((0..n).map(|i| i as f64 + 1.0).collect(), 500.0)
    }

    #[test]
    fn thirty_patches_at_defaults() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m, d) = mask_global(&ramp(5000), 0.3, 50, &mut rng).unwrap();
        assert_eq!(d.masked_indices.len(), 1500);
        assert_eq!(m.values.iter().filter(|v| **v == 0.0).count(), 1500);
        assert!(d.masked_indices.windows(2).all(|w| w[0] < w[1]));
        assert!((d.mask_ratio - 0.3).abs() < 1e-12);
    }

    #[test]
    fn smallest_ratio_masks_one_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, d) = mask_global(&ramp(5000), 0.01, 50, &mut rng).unwrap();
        assert_eq!(d.masked_indices.len(), 50);
        assert!(matches!(
            mask_global(&ramp(5000), 0.005, 50, &mut rng),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn local_span_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let beat = LocalBeat {
            values: vec![1.0; 500],
            origin: 0,
        };
        let (m, d) = mask_local(&beat, 0.5, &mut rng).unwrap();
        assert_eq!(d.masked_indices.len(), 250);
        let first = d.masked_indices[0];
        assert_eq!(*d.masked_indices.last().unwrap(), first + 249);
        assert_eq!(m.values.iter().filter(|v| **v == 0.0).count(), 250);
    }

    #[test]
    fn global_only_without_beats() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = make_pair(&ramp(5000), &[], &MaskConfig::default(), &mut rng).unwrap();
        assert!(p.local.is_none());
    }
}
