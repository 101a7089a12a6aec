//! Attribute normalisation fitted on the training split.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::signal::AttributeVector;

const N: usize = AttributeVector::NAMES.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    #[default]
    ZScore,
    /// Min-max against adult reference ranges.
    ReferenceRange,
}

/// Adult reference ranges used by [`NormMethod::ReferenceRange`], in
/// [`AttributeVector::NAMES`] order (sex is unused).
pub const REFERENCE_RANGES: [(f64, f64); N] = [
    (0.0, 1.0),
    (18.0, 90.0),
    (60.0, 100.0),
    (120.0, 200.0),
    (350.0, 450.0),
    (350.0, 450.0),
    (80.0, 120.0),
];

/// Per-attribute centre and scale. Sex (index 0) passes through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub method: NormMethod,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// Train-split mean, used to impute missing values.
    pub impute: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl NormalizationStats {
    /// Fit on training attributes. Missing values are ignored when fitting.
    pub fn fit(train: &[&AttributeVector], method: NormMethod) -> Result<Self> {
        if train.len() < 2 {
            return Err(CoreError::Data(format!(
                "normalisation needs at least 2 training records, got {}",
                train.len()
            )));
        }
        let mut center = vec![0.0; N];
        let mut scale = vec![1.0; N];
        let mut impute = vec![0.0; N];
        for k in 0..N {
            let vals: Vec<f64> = train.iter().filter_map(|a| a.as_array()[k]).collect();
            let name = AttributeVector::NAMES[k];
            if vals.len() < 2 {
                return Err(CoreError::Data(format!("attribute {name} has fewer than 2 training values")));
            }
            let (m, s) = mean_std(&vals);
            impute[k] = m;
            if k == 0 {
                continue;
            }
            match method {
                NormMethod::ZScore => {
                    if !(s > 1e-12) {
                        return Err(CoreError::Data(format!("attribute {name} has zero variance in training data")));
                    }
                    center[k] = m;
                    scale[k] = s;
                }
                NormMethod::ReferenceRange => {
                    let (lo, hi) = REFERENCE_RANGES[k];
                    center[k] = lo;
                    scale[k] = hi - lo;
                }
            }
        }
        Ok(Self {
            method,
            center,
            scale,
            impute,
        })
    }

    /// Normalised vector plus a per-attribute flag marking imputed values.
    pub fn apply(&self, attrs: &AttributeVector) -> (Vec<f64>, Vec<bool>) {
        let raw = attrs.as_array();
        let mut out = Vec::with_capacity(N);
        let mut imputed = Vec::with_capacity(N);
        for k in 0..N {
            let v = raw[k].unwrap_or(self.impute[k]);
            imputed.push(raw[k].is_none());
            out.push((v - self.center[k]) / self.scale[k]);
        }
        (out, imputed)
    }

    pub fn invert(&self, t: &[f64]) -> AttributeVector {
        let mut v = [None; N];
        for k in 0..N {
            v[k] = Some(t[k] * self.scale[k] + self.center[k]);
        }
        AttributeVector::from_array(v)
    }
}
