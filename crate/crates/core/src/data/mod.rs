//! Record persistence, WFDB ingestion, labels, splits and normalisation.

pub mod benchmark;
mod labels;
mod norm;
pub mod store;
pub mod wfdb;

pub use benchmark::{benchmark_schema, generate_benchmark, Benchmark, BenchmarkConfig};
pub use labels::{class_counts, tier_classes, DatasetSplit, LabelSchema, Tier, TierThresholds};
pub use norm::{NormMethod, NormalizationStats, REFERENCE_RANGES};
pub use store::{checksum_dir, checksum_records, list_records, load_dir, read_record, write_record};
pub use wfdb::{read_wfdb16, write_wfdb16};
