//! IO companion to `tsvos-core`: dataset files, checkpoints, reports,
//! qualitative plots, pipeline orchestration, and the `tsvos` binary.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod pipeline;
pub mod plot;
pub mod report;
