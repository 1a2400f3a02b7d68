//! Online compensation: train on the near c-arm placements, pick the epoch
//! on the laboratory and evaluate on the held-out placements, with and
//! without the quality input.
//!
//!     cargo run --release --example online_compensation

use emtcomp::config::ExperimentConfig;
use emtcomp::experiment::{self, ModelKind};

fn main() -> emtcomp::Result<()> {
    let cfg = ExperimentConfig::default();
    let data = experiment::generate(&cfg)?;
    let with_q = experiment::train_online(&cfg, &data, ModelKind::Ann, true, 0)?;
    let without_q = experiment::train_online(&cfg, &data, ModelKind::Ann, false, 0)?;

    println!("{:<20} {:<11} {:>8} {:>8} {:>8}", "scenario", "role", "raw", "ann+Q", "ann");
    for (a, b) in with_q.metrics.sets.iter().zip(&without_q.metrics.sets) {
        println!(
            "{:<20} {:<11} {:>8.3} {:>8.3} {:>8.3}",
            a.set, a.role, a.raw_rmse_mm, a.compensated_rmse_mm, b.compensated_rmse_mm
        );
    }
    let (q, n) = (&with_q.metrics.headline, &without_q.metrics.headline);
    println!("held-out reduction: {:.1}% with quality, {:.1}% without", q.reduction_pct, n.reduction_pct);

    let (model, metrics) = with_q.save(&cfg)?;
    println!("saved {} and {}", model.display(), metrics.display());
    Ok(())
}
