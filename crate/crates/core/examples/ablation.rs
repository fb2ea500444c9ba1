//! Runs the default four-arm ablation and prints the summary table.
//!
//!     cargo run --release --example ablation -- [threads]

use std::time::Instant;

use fedcl::evaluation::run_ablation;
use fedcl::federation::{ExperimentConfig, Mode};
use fedcl::parallel::Parallelism;

fn main() -> fedcl::Result<()> {
    env_logger::init();
    let threads = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let report = run_ablation(
        &cfg,
        &Mode::ALL,
        &[0, 1, 2],
        &Parallelism::with_threads(threads)?,
    )?;
    println!("{}", report.render_table());
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
