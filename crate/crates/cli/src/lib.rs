//! IO, file formats and pipeline orchestration around `recon-core`.

pub mod config;
pub mod formats;
pub mod pipeline;
pub mod selftest;
pub mod svg;
pub mod weights_io;
