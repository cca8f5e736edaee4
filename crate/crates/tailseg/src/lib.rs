//! Experiment runner for `tailseg-core`: configuration files, scene and
//! checkpoint formats, CSV artifacts, ablation matrices and the `tailseg`
//! command line.

pub mod ablate;
pub mod artifacts;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod experiment;
pub mod scene_io;

pub use tailseg_core as core;
