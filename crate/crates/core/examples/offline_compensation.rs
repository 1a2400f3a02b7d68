//! Offline compensation: network and polynomial trained and tested inside
//! each scenario on spatially disjoint cell groups.
//!
//!     cargo run --release --example offline_compensation

use emtcomp::config::ExperimentConfig;
use emtcomp::experiment::{self, ModelKind};

fn main() -> emtcomp::Result<()> {
    let cfg = ExperimentConfig::default();
    println!("{:<20} {:>9} {:>9} {:>9}", "scenario", "raw mm", "ann %", "poly %");
    for d in experiment::generate(&cfg)? {
        let ann = experiment::train_offline(&cfg, &d, ModelKind::Ann, true, 0)?;
        let poly = experiment::train_offline(&cfg, &d, ModelKind::Poly, true, cfg.poly.degree)?;
        println!(
            "{:<20} {:>9.3} {:>9.1} {:>9.1}",
            d.scenario.name,
            ann.metrics.headline.raw_rmse_mm,
            ann.metrics.headline.reduction_pct,
            poly.metrics.headline.reduction_pct
        );
    }
    Ok(())
}
