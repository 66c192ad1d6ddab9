//! File formats and the command-line pipeline around `recon3d-core`.

pub mod cli;
pub mod config;
pub mod io;
