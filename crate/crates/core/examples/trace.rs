//! Prints per-round losses and alignment for one arm, then the N=1 fold
//! accuracies.
//!
//!     cargo run --release --example trace -- fe_gsm [rounds] [lr] [tau]

use fedcl::federation::{run_experiment, ExperimentConfig};
use fedcl::parallel::Parallelism;

fn main() -> fedcl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ExperimentConfig::default();
    if let Some(m) = args.get(1) {
        cfg.round.mode = m.parse()?;
    }
    if let Some(r) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.round.rounds = r;
    }
    if let Some(lr) = args.get(3).and_then(|s| s.parse().ok()) {
        cfg.round.lr = lr;
    }
    if let Some(t) = args.get(4).and_then(|s| s.parse().ok()) {
        cfg.round.temperature = t;
    }
    let res = run_experiment(&cfg, &Parallelism::with_threads(4)?)?;
    for chunk in res.rounds.chunks(cfg.data.num_clients) {
        let n = chunk.len() as f64;
        println!(
            "round {:>3}  local {:.4}  remote {:.4}  align {:.4}",
            chunk[0].round,
            chunk.iter().map(|r| r.mean_loss_local).sum::<f64>() / n,
            chunk.iter().map(|r| r.mean_loss_remote).sum::<f64>() / n,
            chunk.iter().map(|r| r.alignment_metric).sum::<f64>() / n,
        );
    }
    for row in res.eval.iter().filter(|r| r.n == 1) {
        println!("fold {} acc {:.4}", row.fold, row.probe_accuracy);
    }
    Ok(())
}
