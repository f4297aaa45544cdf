//! Experiment orchestration around the core library: config files, site
//! data plumbing, run directories, and report rendering.

pub mod config;
pub mod pipeline;
pub mod report;
