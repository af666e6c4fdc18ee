//! Persistence, orchestration and reporting.

pub mod binio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod report;

pub use dataset::{write_dataset, DatasetFile, DatasetManifest, PacketSource, RecordMeta, SyntheticSource};
pub use pipeline::{
    collect, evaluate, train_checkpoint, Checkpoint, ClassifierKind, EvalOptions, FrontEnd, Selection,
};
pub use config::Config;
pub use report::{cfo_report, CfoReport, CfoStats, EvalReport};
