//! Configuration, training, inference, evaluation and diagnostics around the
//! `vidseg-core` model.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod diagnose;
pub mod experiments;
pub mod infer;
pub mod train;
