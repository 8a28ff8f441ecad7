//! Standard-library companion to `tcip-core`: volume files, dataset
//! directories, checkpoints, run configuration, reports, and the drivers
//! behind the `tcip` command.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod io;
pub mod report;
pub mod run;
