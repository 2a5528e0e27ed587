//! File formats, task directories, serving and the command-line surface
//! for `warp-core`.

pub mod checkpoint;
pub mod cli;
pub mod ensemble;
pub mod error;
pub mod runner;
pub mod serve;
pub mod task;

pub use error::{Error, Result};
