//! Generates the default scenario suite and writes one CSV per scenario.
//!
//!     cargo run --release --example generate_scenarios -- [out_dir]

use emtcomp::config::ExperimentConfig;
use emtcomp::experiment;
use emtcomp::geometry::displacement_rmse;

fn main() -> emtcomp::Result<()> {
    let mut cfg = ExperimentConfig::default();
    if let Some(out) = std::env::args().nth(1) {
        cfg.out_dir = out.into();
    }
    for d in experiment::generate(&cfg)? {
        println!(
            "{:<20} {:<10?} {:>4} measurements {:>4} pairs, raw displacement rmse {:.3} mm",
            d.scenario.name,
            d.scenario.role,
            d.dataset.measurements.len(),
            d.dataset.pairs.len(),
            displacement_rmse(&d.dataset.pairs, None)
        );
    }
    for p in experiment::cmd_generate(&cfg)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
