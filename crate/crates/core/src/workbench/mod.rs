//! Experiment plumbing: synthetic data, file formats, checkpoints, configs
//! and the end-to-end runner.

pub mod checkpoint;
pub mod container;
pub mod nbest;
pub mod synthetic;
pub mod config;
pub mod experiment;
