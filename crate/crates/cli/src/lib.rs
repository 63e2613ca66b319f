pub mod args;
pub mod bench;
pub mod commands;
pub mod output;

use anyhow::{Context, Result};

use crate::args::{Cli, Command};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "GSFM_WORKERS";

fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{WORKERS_ENV}={v:?} is not a thread count"))?;
            anyhow::ensure!(n > 0, "{WORKERS_ENV} must be positive");
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs one command on a dedicated thread pool and returns its exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers()?)
        .build()
        .context("starting worker pool")?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => commands::cmd_synth(a),
        Command::Gp(a) => commands::cmd_gp(a),
        Command::Ba(a) => commands::cmd_ba(a),
        Command::Pipeline(a) => commands::cmd_pipeline(a),
        Command::Bench(a) => bench::cmd_bench(a),
    })
}
