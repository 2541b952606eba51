//! Evaluation metrics, file formats, configuration, benchmarking and
//! self-tests.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod report;
pub mod selftest;

pub use bench::{run_bench, BenchOptions, Method};
pub use checkpoint::{pack, unpack, Checkpoint, SavedRun, TrainState};
pub use config::RunConfig;
pub use dataset::DatasetRecord;
pub use metrics::{bleu, sequence_accuracy};
pub use report::{ReportRow, RunReport};
