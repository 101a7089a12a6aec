use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cardio_core::data::store::sha256_hex;
use cardio_core::data::wfdb::parse_header;
use cardio_core::data::{benchmark_schema, checksum_records, load_dir, read_wfdb16, DatasetSplit, LabelSchema, Tier};
use cardio_core::signal::synth::NORMAL_CLASS;
use cardio_core::signal::{to_report_layout, EcgRecord};
use cardio_core::training::select;
use cardio_core::{CoreError, Result};

/// Records loaded from a benchmark directory (`records/`, `split.toml`,
/// `schema.txt`) or from a plain directory of native or WFDB records.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub root: PathBuf,
    pub records: Vec<EcgRecord>,
    pub split: Option<DatasetSplit>,
    pub schema: LabelSchema,
    /// True when the schema came from `schema.txt` rather than the default.
    pub explicit_schema: bool,
}

impl DataDir {
    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(CoreError::Data(format!("{} is not a directory", root.display())));
        }
        let rec_dir = if root.join("records").is_dir() {
            root.join("records")
        } else {
            root.to_path_buf()
        };
        let mut records = load_dir(&rec_dir)?;
        records.extend(load_wfdb_dir(&rec_dir)?);
        records.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        if records.windows(2).any(|w| w[0].record_id == w[1].record_id) {
            return Err(CoreError::Data(format!("{}: duplicate record ids", rec_dir.display())));
        }
        let split_path = root.join("split.toml");
        let split = split_path.is_file().then(|| DatasetSplit::load(&split_path)).transpose()?;
        let schema_path = root.join("schema.txt");
        let explicit_schema = schema_path.is_file();
        let schema = if explicit_schema {
            LabelSchema::load(&schema_path)?
        } else {
            benchmark_schema()
        };
        Ok(Self {
            root: root.to_path_buf(),
            records,
            split,
            schema,
            explicit_schema,
        })
    }

    pub fn checksum(&self) -> String {
        let mut s = checksum_records(&self.records);
        if let Some(split) = &self.split {
            s = sha256_hex(format!("{s}{}", split.checksum()).as_bytes());
        }
        s
    }

    pub fn all(&self) -> Vec<&EcgRecord> {
        self.records.iter().collect()
    }

    fn part(&self, pick: impl Fn(&DatasetSplit) -> &Vec<String>) -> Result<Option<Vec<&EcgRecord>>> {
        self.split.as_ref().map(|s| select(&self.records, pick(s))).transpose()
    }

    /// Pretraining records: the pretrain split, or every record.
    pub fn pretrain(&self) -> Result<Vec<&EcgRecord>> {
        Ok(self.part(|s| &s.pretrain)?.unwrap_or_else(|| self.all()))
    }

    /// Labelled training records: the train split, or every labelled record.
    pub fn labeled(&self) -> Result<Vec<&EcgRecord>> {
        Ok(self
            .part(|s| &s.train)?
            .unwrap_or_else(|| self.records.iter().filter(|r| r.labels.is_some()).collect()))
    }

    pub fn val(&self) -> Result<Vec<&EcgRecord>> {
        Ok(self.part(|s| &s.val)?.unwrap_or_default())
    }

    /// Evaluation records: the test split, or every record.
    pub fn test(&self) -> Result<Vec<&EcgRecord>> {
        Ok(self.part(|s| &s.test)?.unwrap_or_else(|| self.all()))
    }

    pub fn tiers(&self) -> BTreeMap<String, Tier> {
        self.split.as_ref().map(|s| s.tiers.clone()).unwrap_or_default()
    }

    /// Fail when the directory names a label schema other than `classes`.
    pub fn check_schema(&self, classes: &[String]) -> Result<()> {
        if self.explicit_schema && self.schema.names() != classes {
            return Err(CoreError::Schema(format!(
                "{} uses classes [{}] but the model was trained on [{}]",
                self.root.display(),
                self.schema.names().join(", "),
                classes.join(", ")
            )));
        }
        for r in &self.records {
            for l in r.labels.iter().flatten() {
                if !classes.contains(l) {
                    return Err(CoreError::Schema(format!(
                        "{}: label {l} is not a model class",
                        r.record_id
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn is_normal(r: &EcgRecord) -> bool {
    r.is_abnormal(NORMAL_CLASS) != Some(true)
}

/// WFDB format-16 records (`*.hea`) in `dir`. Twelve-lead records are
/// rearranged into the four-channel report layout.
fn load_wfdb_dir(dir: &Path) -> Result<Vec<EcgRecord>> {
    let mut headers: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hea"))
        .collect();
    headers.sort();
    headers
        .iter()
        .map(|h| {
            let rec = read_wfdb16(h)?;
            let text = std::fs::read_to_string(h).map_err(|e| CoreError::io(h, e))?;
            let header = parse_header(&text, h)?;
            if header.signals.len() == 12 {
                let names: Vec<String> = header.signals.iter().map(|s| s.description.clone()).collect();
                to_report_layout(&rec, &names)
            } else {
                Ok(rec)
            }
        })
        .collect()
}
