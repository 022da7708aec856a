//! Command-line driver for fedseg experiments.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod tables;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use commands::{cmd_compare, cmd_detect, cmd_eval};
pub use config::{load_config, parse_config};
pub use error::{CheckpointError, CliError, Result};
pub use run::{cmd_run, RunManifest};

/// Sizes the global rayon pool from `FSEG_THREADS`, defaulting to all cores.
pub fn init_threads() {
    let threads = std::env::var("FSEG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0);
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool already initialised: {e}");
        }
    }
}
