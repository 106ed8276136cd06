//! HCFlow: a hierarchical conditional normalizing flow that maps
//! high-resolution images to (low-resolution image, latent) pairs — one
//! invertible model usable both for stochastic super-resolution and for
//! round-trip image rescaling.

pub mod cli;
pub mod conditioner;
pub mod error;
pub mod flow;
pub mod dataio;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod oracle;
pub mod runner;
pub mod selftest;

pub use error::{Error, Result};

/// Command-line entry point; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::run(std::env::args_os())
}
