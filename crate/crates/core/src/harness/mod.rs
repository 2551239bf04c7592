//! Configuration, persistence, evaluation proxies and experiment plumbing.

pub mod config;
pub mod container;
pub mod fid;
pub mod pipeline;
pub mod run_dir;
pub mod sweep;
pub mod train;
