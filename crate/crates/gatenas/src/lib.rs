//! Files, datasets, the experiment pipeline and the command-line front end
//! for [`gatenas_core`].
//!
//! Formats:
//!
//! - configuration: TOML, see [`config`];
//! - datasets: IDX (MNIST) or generated blobs, see [`idx`] and [`dataset`];
//! - checkpoints and compiled weights: a little-endian container of named
//!   arrays, see [`checkpoint`];
//! - architectures: JSON, see [`archfile`];
//! - latency profiles: whitespace-separated text, see [`profile`].

pub mod archfile;
pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod fsutil;
pub mod idx;
pub mod pipeline;
pub mod profile;

pub use error::{Error, Result};
