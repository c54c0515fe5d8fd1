//! File formats: feature matrices, weight checkpoints, run reports,
//! attention traces, and the run configuration schema.

pub mod checkpoint;
pub mod config;
pub mod features;
pub mod report;
pub mod trace_file;
