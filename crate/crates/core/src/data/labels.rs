//! Label schema, dataset splits and rarity tiers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::sha256_hex;
use crate::error::{CoreError, Result};
use crate::signal::EcgRecord;

/// Ordered class names with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSchema {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(CoreError::Schema(format!("invalid class name {n:?}")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(CoreError::Schema(format!("duplicate class {n:?}")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Schema(format!("class {name:?} is not in the schema")))
    }

    /// Multi-hot vector with ones at the listed classes.
    pub fn encode<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.len()];
        for l in labels {
            y[self.index_of(l.as_ref())?] = 1.0;
        }
        Ok(y)
    }

    pub fn decode(&self, y: &[f64]) -> Vec<String> {
        y.iter()
            .zip(&self.names)
            .filter(|(v, _)| **v > 0.5)
            .map(|(_, n)| n.clone())
            .collect()
    }

    /// One class name per line.
    pub fn to_text(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let names: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
        Self::new(&names)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
    }

    pub fn checksum(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Common,
    Uncommon,
    Rare,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Common, Tier::Uncommon, Tier::Rare];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Common => "common",
            Tier::Uncommon => "uncommon",
            Tier::Rare => "rare",
        }
    }
}

/// Count thresholds: fewer than `rare_below` training occurrences is rare,
/// more than `common_above` is common, anything between is uncommon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierThresholds {
    pub rare_below: usize,
    pub common_above: usize,
}

impl Default for TierThresholds {
    fn default() -> Self {
        Self {
            rare_below: 10,
            common_above: 50,
        }
    }
}

/// Per-class training counts.
pub fn class_counts(schema: &LabelSchema, records: &[&EcgRecord]) -> Result<Vec<usize>> {
    let mut counts = vec![0; schema.len()];
    for r in records {
        for l in r.labels.iter().flatten() {
            counts[schema.index_of(l)?] += 1;
        }
    }
    Ok(counts)
}

pub fn tier_classes(schema: &LabelSchema, counts: &[usize], th: TierThresholds) -> BTreeMap<String, Tier> {
    schema
        .names()
        .iter()
        .zip(counts)
        .map(|(n, &c)| {
            let tier = if c < th.rare_below {
                Tier::Rare
            } else if c > th.common_above {
                Tier::Common
            } else {
                Tier::Uncommon
            };
            (n.clone(), tier)
        })
        .collect()
}

/// Record-id lists per partition plus the class tiers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    /// Normal-only records for self-supervised pretraining.
    #[serde(default)]
    pub pretrain: Vec<String>,
    /// Labelled records for the downstream classifier.
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
    #[serde(default)]
    pub tiers: BTreeMap<String, Tier>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (part, ids) in [
            ("pretrain", &self.pretrain),
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(CoreError::Data(format!("record {id} appears twice (again in {part})")));
                }
            }
        }
        Ok(())
    }

    pub fn classes_in(&self, tier: Tier) -> Vec<&str> {
        self.tiers
            .iter()
            .filter(|(_, t)| **t == tier)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("split serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| CoreError::Data(format!("split manifest: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?)
    }

    pub fn checksum(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}
