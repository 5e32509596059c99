//! The experiment harness: configuration, dataset and checkpoint I/O,
//! training loops, the certification driver, and reporting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod driver;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{CertifyConfig, Mode, ObjectiveConfig, OptimizerConfig, ReportConfig, RunConfig};
pub use data::{load_dataset, make_synthetic, save_dataset, Dataset};
pub use driver::{
    certified_accuracy, read_results_tsv, run_certify, run_report, CertTable, ModelBaseClassifier,
};
pub use train::{layer_lr_multipliers, lr_at_step, run_finetune, run_pretrain, run_probe, AdamW};
