//! Dataset ingestion, training runs and the insertion chain.

pub mod config;
pub mod dataset;
pub mod insert;
pub mod train;

pub use config::{Network, Preset, RunConfig};
pub use dataset::{ingest, write_dataset, DatasetIndex, LoadedSample, PersonRef};
pub use insert::{
    insert_person, refine_composite, render_into, sample_inference_bbox, InsertionRequest, InsertionResult, Models,
};
pub use train::{train, LogRecord, TrainOutcome};
